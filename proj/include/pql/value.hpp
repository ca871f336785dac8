#pragma once

// Dynamic values flowing through query execution and where-clause evaluation:
// bool, int, string, list, or Absent. Absent stands in for values that depend
// on holes the model has not produced yet; boolean connectives treat it with
// Kleene K3 logic and every other operator absorbs it.

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

namespace pql {

class EvalError : public std::runtime_error {
 public:
  explicit EvalError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Absent {
  friend bool operator==(const Absent&, const Absent&) { return true; }
};

class Value;
using ValueList = std::vector<Value>;

class Value {
 public:
  Value() : v_(Absent{}) {}
  Value(Absent a) : v_(a) {}
  Value(bool b) : v_(b) {}
  Value(std::int64_t i) : v_(i) {}
  Value(int i) : v_(static_cast<std::int64_t>(i)) {}
  Value(std::string s) : v_(std::move(s)) {}
  Value(const char* s) : v_(std::string(s)) {}
  Value(ValueList l) : v_(std::make_shared<ValueList>(std::move(l))) {}

  bool is_absent() const { return std::holds_alternative<Absent>(v_); }
  bool is_bool() const { return std::holds_alternative<bool>(v_); }
  bool is_int() const { return std::holds_alternative<std::int64_t>(v_); }
  bool is_string() const { return std::holds_alternative<std::string>(v_); }
  bool is_list() const { return std::holds_alternative<std::shared_ptr<ValueList>>(v_); }

  bool as_bool() const {
    if (!is_bool()) throw EvalError("expected a boolean, got " + type_name());
    return std::get<bool>(v_);
  }
  std::int64_t as_int() const {
    if (!is_int()) throw EvalError("expected an integer, got " + type_name());
    return std::get<std::int64_t>(v_);
  }
  const std::string& as_string() const {
    if (!is_string()) throw EvalError("expected a string, got " + type_name());
    return std::get<std::string>(v_);
  }
  const ValueList& as_list() const {
    if (!is_list()) throw EvalError("expected a list, got " + type_name());
    return *std::get<std::shared_ptr<ValueList>>(v_);
  }

  /// Copy-on-write append for script lists.
  Value appended(const Value& item) const {
    ValueList out = as_list();
    out.push_back(item);
    return Value(std::move(out));
  }

  std::string type_name() const {
    if (is_absent()) return "absent";
    if (is_bool()) return "bool";
    if (is_int()) return "int";
    if (is_string()) return "string";
    return "list";
  }

  friend bool operator==(const Value& a, const Value& b) {
    if (a.v_.index() != b.v_.index()) return false;
    if (a.is_list()) return a.as_list() == b.as_list();
    return a.v_ == b.v_;
  }

  /// Rendering used for placeholder substitution and result documents.
  std::string to_display() const {
    if (is_absent()) return "<absent>";
    if (is_bool()) return as_bool() ? "True" : "False";
    if (is_int()) return std::to_string(as_int());
    if (is_string()) return as_string();
    std::string out = "[";
    const auto& l = as_list();
    for (std::size_t i = 0; i < l.size(); ++i) {
      if (i) out += ", ";
      out += l[i].is_string() ? "\"" + l[i].as_string() + "\"" : l[i].to_display();
    }
    return out + "]";
  }

  nlohmann::json to_json() const {
    if (is_absent()) return nullptr;
    if (is_bool()) return as_bool();
    if (is_int()) return as_int();
    if (is_string()) return as_string();
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& v : as_list()) arr.push_back(v.to_json());
    return arr;
  }

 private:
  std::variant<Absent, bool, std::int64_t, std::string, std::shared_ptr<ValueList>> v_;
};

// --- Kleene K3 connectives over {true, false, Absent} ----------------------

inline Value kleene_not(const Value& a) {
  if (a.is_absent()) return Absent{};
  return !a.as_bool();
}

inline Value kleene_and(const Value& a, const Value& b) {
  if (a.is_bool() && !a.as_bool()) return false;
  if (b.is_bool() && !b.as_bool()) return false;
  if (a.is_absent() || b.is_absent()) return Absent{};
  return a.as_bool() && b.as_bool();
}

inline Value kleene_or(const Value& a, const Value& b) {
  if (a.is_bool() && a.as_bool()) return true;
  if (b.is_bool() && b.as_bool()) return true;
  if (a.is_absent() || b.is_absent()) return Absent{};
  return a.as_bool() || b.as_bool();
}

/// Definitively false: boolean false, not Absent.
inline bool is_false(const Value& v) { return v.is_bool() && !v.as_bool(); }
inline bool is_true(const Value& v) { return v.is_bool() && v.as_bool(); }

}  // namespace pql
