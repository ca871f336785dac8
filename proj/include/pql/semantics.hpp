#pragma once

// Partial-evaluation semantics for where clauses. Every computed value carries
// an annotator: FIN (fixed forever), VAR (may still change), INC/DEC (moves
// monotonically as the in-progress hole grows). The combiners here are shared
// between eval_final and the Follow operator so the two levels cannot drift
// apart.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "pql/ast.hpp"
#include "pql/value.hpp"
#include "pql/vocab.hpp"

namespace pql {

// --- Scope -------------------------------------------------------------------

enum class HoleState { NotStarted, InProgress, Complete };

/// Variable store threaded through execution. Hole variables additionally
/// carry a decode state; at most one hole is in progress at any time.
class Scope {
 public:
  Scope() = default;

  void declare_hole(const std::string& name) {
    if (!holes_.count(name)) holes_[name] = HoleState::NotStarted;
    known_.insert(name);
  }
  void declare_script_var(const std::string& name) { known_.insert(name); }

  void bind(const std::string& name, Value v) {
    values_[name] = std::move(v);
    known_.insert(name);
  }

  void start_hole(const std::string& name) {
    if (in_progress_) throw EvalError("hole \"" + *in_progress_ + "\" is already in progress");
    holes_[name] = HoleState::InProgress;
    in_progress_ = name;
    values_[name] = Value(std::string());
    known_.insert(name);
  }

  void update_hole(const std::string& name, std::string partial) {
    values_[name] = Value(std::move(partial));
  }

  void finish_hole(const std::string& name, std::string final_value) {
    holes_[name] = HoleState::Complete;
    values_[name] = Value(std::move(final_value));
    in_progress_.reset();
  }

  /// Marks the in-progress hole complete without reassigning (used to probe
  /// "what if decoding stopped here" during EOS handling).
  void abandon_in_progress() {
    if (in_progress_) {
      holes_[*in_progress_] = HoleState::Complete;
      in_progress_.reset();
    }
  }

  const std::optional<std::string>& in_progress() const { return in_progress_; }

  bool is_hole(const std::string& name) const { return holes_.count(name) > 0; }
  HoleState hole_state(const std::string& name) const {
    auto it = holes_.find(name);
    return it == holes_.end() ? HoleState::NotStarted : it->second;
  }

  bool has_value(const std::string& name) const { return values_.count(name) > 0; }
  const Value& value(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw EvalError("variable \"" + name + "\" has no value");
    return it->second;
  }

  bool known(const std::string& name) const { return known_.count(name) > 0; }

  const std::map<std::string, Value>& values() const { return values_; }

 private:
  std::map<std::string, Value> values_;
  std::map<std::string, HoleState> holes_;
  std::set<std::string> known_;
  std::optional<std::string> in_progress_;
};

// --- Annotators ----------------------------------------------------------------

enum class Ann { Fin, Var, Inc, Dec };

inline const char* ann_name(Ann a) {
  switch (a) {
    case Ann::Fin: return "fin";
    case Ann::Var: return "var";
    case Ann::Inc: return "inc";
    case Ann::Dec: return "dec";
  }
  return "?";
}

struct AValue {
  Value value;
  Ann ann = Ann::Var;

  bool fin_false() const { return ann == Ann::Fin && is_false(value); }
  bool fin_true() const { return ann == Ann::Fin && is_true(value); }

  friend bool operator==(const AValue& a, const AValue& b) {
    return a.ann == b.ann && a.value == b.value;
  }

  std::string to_display() const {
    std::string inner = value.is_string() ? "\"" + value.as_string() + "\"" : value.to_display();
    return std::string(ann_name(ann)) + "(" + inner + ")";
  }
};

inline AValue fin(Value v) { return {std::move(v), Ann::Fin}; }
inline AValue var_(Value v) { return {std::move(v), Ann::Var}; }
inline AValue inc(Value v) { return {std::move(v), Ann::Inc}; }

inline AValue absent() { return {Value(Absent{}), Ann::Var}; }

// --- Function registry and cache -------------------------------------------------

using PureFn = std::function<Value(const ValueList&)>;

/// User-registered functions; must be pure and deterministic.
class FunctionRegistry {
 public:
  void register_fn(const std::string& name, PureFn fn) { fns_[name] = std::move(fn); }
  bool has(const std::string& name) const { return fns_.count(name) > 0; }
  const PureFn& get(const std::string& name) const {
    auto it = fns_.find(name);
    if (it == fns_.end()) throw EvalError("unknown function \"" + name + "\"");
    return it->second;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : fns_) out.push_back(k);
    return out;
  }

 private:
  std::map<std::string, PureFn> fns_;
};

/// Memoizes function results on (name, argument values); at most one
/// evaluation per distinct key per query run.
class FunctionCache {
 public:
  Value get_or_compute(const std::string& name, const ValueList& args,
                       const std::function<Value()>& compute) {
    ++calls_;
    if (!enabled_) return compute();
    std::string key = name;
    for (const auto& a : args) {
      key += '\x1f';
      key += a.to_json().dump();
    }
    auto it = map_.find(key);
    if (it != map_.end()) {
      ++hits_;
      return it->second;
    }
    Value v = compute();
    map_.emplace(std::move(key), v);
    return v;
  }

  void set_enabled(bool on) { enabled_ = on; }
  std::uint64_t hits() const { return hits_; }
  std::uint64_t calls() const { return calls_; }

 private:
  bool enabled_ = true;
  std::uint64_t hits_ = 0;
  std::uint64_t calls_ = 0;
  std::unordered_map<std::string, Value> map_;
};

// --- Evaluation context ------------------------------------------------------------

struct EvalContext {
  const Scope* scope = nullptr;
  const Vocabulary* vocab = nullptr;            // needed by len_tokens and follow
  const FunctionRegistry* fns = nullptr;        // may be null
  FunctionCache* cache = nullptr;               // may be null (no caching)
  // actual token count of the hole being decoded (len_tokens must reflect the
  // stream the model produced, not a canonical retokenization)
  std::string current_token_var;
  std::optional<std::int64_t> current_var_tokens;
};

// --- Built-in value functions -------------------------------------------------------

namespace builtins {

inline ValueList words(const std::string& s) {
  ValueList out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && s[i] == ' ') ++i;
    if (i >= s.size()) break;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ') ++j;
    out.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

/// Split after each '.'; parts keep their trailing period and leading space so
/// concatenation reproduces the input.
inline ValueList sentences(const std::string& s) {
  ValueList out;
  std::string cur;
  for (char c : s) {
    cur += c;
    if (c == '.') {
      out.emplace_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.emplace_back(cur);
  return out;
}

/// Non-empty digit run with an optional single leading space.
inline bool is_int_string(const std::string& s) {
  std::size_t i = 0;
  if (i < s.size() && s[i] == ' ') ++i;
  if (i >= s.size()) return false;
  for (; i < s.size(); ++i)
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
  return true;
}

/// True while s can still grow into an int string (prefix of " ?[0-9]+").
inline bool is_int_prefix(const std::string& s) {
  std::size_t i = 0;
  if (i < s.size() && s[i] == ' ') ++i;
  for (; i < s.size(); ++i)
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
  return true;
}

inline bool endswith(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline bool startswith(const std::string& s, const std::string& prefix) {
  return s.size() >= prefix.size() && s.compare(0, prefix.size(), prefix) == 0;
}

inline ValueList split(const std::string& s, const std::string& sep) {
  if (sep.empty()) throw EvalError("split separator must be non-empty");
  ValueList out;
  std::size_t start = 0;
  while (true) {
    const std::size_t at = s.find(sep, start);
    if (at == std::string::npos) {
      out.emplace_back(s.substr(start));
      break;
    }
    out.emplace_back(s.substr(start, at - start));
    start = at + sep.size();
  }
  return out;
}

}  // namespace builtins

// --- Annotator combiners --------------------------------------------------------------
// The reconstruction of the final-propagation table: constants FIN, completed
// holes FIN, the in-progress hole INC, future holes VAR(Absent); short-circuit
// keeps FIN through and/or; monotone comparisons against FIN bounds decide
// early where the direction of growth allows it.

inline AValue combine_not(const AValue& a) {
  if (a.value.is_absent()) return absent();
  if (!a.value.is_bool()) throw EvalError("'not' expects a boolean, got " + a.value.type_name());
  const Ann ann = a.ann == Ann::Fin ? Ann::Fin : Ann::Var;
  return {kleene_not(a.value), ann};
}

inline AValue combine_and(const AValue& a, const AValue& b) {
  if (a.fin_false() || b.fin_false()) return fin(false);
  const Value v = kleene_and(a.value, b.value);
  if (a.ann == Ann::Fin && b.ann == Ann::Fin) return fin(v);
  return {v, Ann::Var};
}

inline AValue combine_or(const AValue& a, const AValue& b) {
  if (a.fin_true() || b.fin_true()) return fin(true);
  const Value v = kleene_or(a.value, b.value);
  if (a.ann == Ann::Fin && b.ann == Ann::Fin) return fin(v);
  return {v, Ann::Var};
}

namespace detail {

inline AValue compare_ordered(CmpOp op, const AValue& a, const AValue& b) {
  // mirror so the monotone operand is on the left where possible
  if (a.ann == Ann::Fin && (b.ann == Ann::Inc || b.ann == Ann::Dec)) {
    const CmpOp mirrored = op == CmpOp::Lt   ? CmpOp::Gt
                           : op == CmpOp::Gt ? CmpOp::Lt
                           : op == CmpOp::Le ? CmpOp::Ge
                                             : CmpOp::Le;
    return compare_ordered(mirrored, b, a);
  }
  const std::int64_t x = a.value.as_int();
  const std::int64_t c = b.value.as_int();
  bool now = false;
  switch (op) {
    case CmpOp::Lt: now = x < c; break;
    case CmpOp::Gt: now = x > c; break;
    case CmpOp::Le: now = x <= c; break;
    case CmpOp::Ge: now = x >= c; break;
    default: throw EvalError("not an ordering comparison");
  }
  if (a.ann == Ann::Fin && b.ann == Ann::Fin) return fin(now);
  if (a.ann == Ann::Inc && b.ann == Ann::Fin) {
    switch (op) {
      case CmpOp::Lt:
      case CmpOp::Le:
        return now ? var_(true) : fin(false);  // growing past the bound is forever
      case CmpOp::Gt:
      case CmpOp::Ge:
        return now ? fin(true) : var_(false);
      default: break;
    }
  }
  if (a.ann == Ann::Dec && b.ann == Ann::Fin) {
    switch (op) {
      case CmpOp::Lt:
      case CmpOp::Le:
        return now ? fin(true) : var_(false);
      case CmpOp::Gt:
      case CmpOp::Ge:
        return now ? var_(true) : fin(false);
      default: break;
    }
  }
  return var_(now);
}

inline AValue compare_eq(const AValue& a, const AValue& b) {
  // string vs string with one side growing gets the prefix three-way rule
  if (a.value.is_string() && b.value.is_string()) {
    const bool a_grows = a.ann == Ann::Inc;
    const bool b_grows = b.ann == Ann::Inc;
    if (a_grows != b_grows && (a.ann == Ann::Fin || b.ann == Ann::Fin)) {
      const std::string& grown = a_grows ? a.value.as_string() : b.value.as_string();
      const std::string& target = a_grows ? b.value.as_string() : a.value.as_string();
      if (grown == target) return fin(true);
      if (builtins::startswith(target, grown)) return var_(false);
      return fin(false);
    }
    const bool now = a.value.as_string() == b.value.as_string();
    return (a.ann == Ann::Fin && b.ann == Ann::Fin) ? fin(now) : var_(now);
  }
  if (a.value.is_int() && b.value.is_int()) {
    const std::int64_t x = a.value.as_int();
    const std::int64_t c = b.value.as_int();
    if (a.ann == Ann::Fin && b.ann == Ann::Fin) return fin(x == c);
    auto one_sided = [](Ann mono, std::int64_t m, std::int64_t k) -> std::optional<AValue> {
      if (mono == Ann::Inc) {
        if (m > k) return fin(false);
        return var_(m == k);
      }
      if (mono == Ann::Dec) {
        if (m < k) return fin(false);
        return var_(m == k);
      }
      return std::nullopt;
    };
    if (b.ann == Ann::Fin) {
      if (auto r = one_sided(a.ann, x, c)) return *r;
    }
    if (a.ann == Ann::Fin) {
      if (auto r = one_sided(b.ann, c, x)) return *r;
    }
    return var_(x == c);
  }
  if (a.value.is_bool() && b.value.is_bool()) {
    const bool now = a.value.as_bool() == b.value.as_bool();
    return (a.ann == Ann::Fin && b.ann == Ann::Fin) ? fin(now) : var_(now);
  }
  if (a.value.is_list() && b.value.is_list()) {
    const auto& xs = a.value.as_list();
    const auto& ys = b.value.as_list();
    const bool now = a.value == b.value;
    if (a.ann == Ann::Fin && b.ann == Ann::Fin) return fin(now);
    // an append-only list can never equal a fixed list it has outgrown
    auto list_prefix = [](const ValueList& p, const ValueList& full) {
      if (p.size() > full.size()) return false;
      return std::equal(p.begin(), p.end(), full.begin());
    };
    if (a.ann == Ann::Inc && b.ann == Ann::Fin) {
      if (now) return var_(true);
      return list_prefix(xs, ys) ? var_(false) : fin(false);
    }
    if (b.ann == Ann::Inc && a.ann == Ann::Fin) {
      if (now) return var_(true);
      return list_prefix(ys, xs) ? var_(false) : fin(false);
    }
    return var_(now);
  }
  throw EvalError("cannot compare " + a.value.type_name() + " with " + b.value.type_name());
}

inline AValue compare_in(const AValue& a, const AValue& b) {
  if (b.value.is_string()) {
    if (!a.value.is_string())
      throw EvalError("'in' over a string needs a string on the left, got " + a.value.type_name());
    const std::string& needle = a.value.as_string();
    const std::string& hay = b.value.as_string();
    const bool now = hay.find(needle) != std::string::npos;
    if (a.ann == Ann::Fin && b.ann == Ann::Fin) return fin(now);
    if (a.ann == Ann::Fin && b.ann == Ann::Inc)
      return now ? fin(true) : var_(false);  // substrings of an append-only string persist
    if (a.ann == Ann::Inc && b.ann == Ann::Fin)
      return now ? var_(true) : fin(false);  // a longer needle can only match where it already does
    return var_(now);
  }
  if (b.value.is_list()) {
    const auto& items = b.value.as_list();
    bool now = false;
    for (const auto& it : items)
      if (it == a.value) { now = true; break; }
    if (a.ann == Ann::Fin && b.ann == Ann::Fin) return fin(now);
    if (a.value.is_string() && a.ann == Ann::Inc && b.ann == Ann::Fin) {
      // three-way prefix rule over the candidate set
      if (now) return fin(true);
      const std::string& v = a.value.as_string();
      for (const auto& it : items) {
        if (it.is_string() && builtins::startswith(it.as_string(), v)) return var_(false);
      }
      return fin(false);
    }
    return var_(now);
  }
  throw EvalError("'in' needs a string or list on the right, got " + b.value.type_name());
}

}  // namespace detail

inline AValue combine_compare(CmpOp op, const AValue& a, const AValue& b) {
  if (a.value.is_absent() || b.value.is_absent()) return absent();
  switch (op) {
    case CmpOp::Lt:
    case CmpOp::Gt:
    case CmpOp::Le:
    case CmpOp::Ge:
      return detail::compare_ordered(op, a, b);
    case CmpOp::Eq:
      return detail::compare_eq(a, b);
    case CmpOp::In:
      return detail::compare_in(a, b);
  }
  throw EvalError("unknown comparison");
}

// --- Built-in application with final rules ------------------------------------------------

inline Value call_function_cached(const EvalContext& ctx, const std::string& name,
                                  const ValueList& args, const std::function<Value()>& compute) {
  if (ctx.cache) return ctx.cache->get_or_compute(name, args, compute);
  return compute();
}

/// Applies a built-in or registered function to annotated arguments, deriving
/// the result annotator from the operands.
inline AValue apply_call(const EvalContext& ctx, const std::string& name,
                         const std::vector<AValue>& args) {
  for (const auto& a : args)
    if (a.value.is_absent()) return absent();

  auto all_fin = [&] {
    return std::all_of(args.begin(), args.end(), [](const AValue& a) { return a.ann == Ann::Fin; });
  };
  auto arg_values = [&] {
    ValueList vs;
    for (const auto& a : args) vs.push_back(a.value);
    return vs;
  };
  auto need_args = [&](std::size_t n) {
    if (args.size() != n)
      throw EvalError(name + "() takes " + std::to_string(n) + " argument(s), got " +
                      std::to_string(args.size()));
  };

  if (name == "words" || name == "sentences") {
    need_args(1);
    const Value v = call_function_cached(ctx, name, arg_values(), [&] {
      const std::string& s = args[0].value.as_string();
      return Value(name == "words" ? builtins::words(s) : builtins::sentences(s));
    });
    Ann ann = args[0].ann;
    if (ann == Ann::Dec) ann = Ann::Var;  // strings never shrink here, but stay safe
    return {v, ann};
  }
  if (name == "len") {
    need_args(1);
    const Value v = call_function_cached(ctx, name, arg_values(), [&]() -> Value {
      const Value& x = args[0].value;
      if (x.is_string()) return Value(static_cast<std::int64_t>(x.as_string().size()));
      if (x.is_list()) return Value(static_cast<std::int64_t>(x.as_list().size()));
      throw EvalError("len() expects a string or list, got " + x.type_name());
    });
    return {v, args[0].ann};  // length is monotone in its argument
  }
  if (name == "len_tokens") {
    need_args(1);
    if (!ctx.vocab) throw EvalError("len_tokens needs a vocabulary");
    const Value v = call_function_cached(ctx, name, arg_values(), [&]() -> Value {
      return Value(static_cast<std::int64_t>(ctx.vocab->tokenize(args[0].value.as_string()).size()));
    });
    return {v, args[0].ann};
  }
  if (name == "stops_at") {
    need_args(2);
    const std::string& s = args[0].value.as_string();
    const std::string& ph = args[1].value.as_string();
    if (args[1].ann != Ann::Fin) throw EvalError(name + "() needs a fixed phrase");
    const bool b = builtins::endswith(s, ph);
    if (args[0].ann == Ann::Inc) return b ? fin(true) : var_(false);
    if (args[0].ann == Ann::Fin) return fin(b);
    return var_(b);
  }
  if (name == "stops_before") {
    need_args(2);
    const std::string& s = args[0].value.as_string();
    const std::string& ph = args[1].value.as_string();
    if (args[1].ann != Ann::Fin) throw EvalError(name + "() needs a fixed phrase");
    // pure stop directive: the phrase is stripped from the stored value, so a
    // completed variable always satisfies it
    if (args[0].ann == Ann::Inc) return builtins::endswith(s, ph) ? fin(true) : var_(true);
    return fin(true);
  }
  if (name == "endswith") {
    need_args(2);
    const bool b = builtins::endswith(args[0].value.as_string(), args[1].value.as_string());
    return all_fin() ? fin(b) : var_(b);
  }
  if (name == "int") {
    need_args(1);
    const std::string& s = args[0].value.as_string();
    const bool b = builtins::is_int_string(s);
    if (args[0].ann == Ann::Fin) return fin(b);
    if (args[0].ann == Ann::Inc) {
      if (!builtins::is_int_prefix(s)) return fin(false);  // a stray character never heals
      return var_(b);
    }
    return var_(b);
  }
  if (name == "split") {
    need_args(2);
    const Value v = call_function_cached(ctx, name, arg_values(), [&] {
      return Value(builtins::split(args[0].value.as_string(), args[1].value.as_string()));
    });
    if (args[0].ann == Ann::Inc && args[1].ann == Ann::Fin) return {v, Ann::Inc};
    return {v, all_fin() ? Ann::Fin : Ann::Var};
  }

  if (ctx.fns && ctx.fns->has(name)) {
    const Value v = call_function_cached(ctx, name, arg_values(),
                                         [&] { return ctx.fns->get(name)(arg_values()); });
    return {v, all_fin() ? Ann::Fin : Ann::Var};
  }
  throw EvalError("unknown function \"" + name + "\"");
}

// --- eval_final / eval_value -------------------------------------------------------------

inline AValue eval_final(const ExprPtr& e, const EvalContext& ctx);

inline AValue eval_varref(const std::string& name, const EvalContext& ctx) {
  const Scope& sc = *ctx.scope;
  if (sc.has_value(name)) {
    const bool growing = sc.in_progress() && *sc.in_progress() == name;
    return {sc.value(name), growing ? Ann::Inc : Ann::Fin};
  }
  if (sc.known(name)) return absent();  // future hole or not-yet-assigned script var
  throw EvalError("unknown variable \"" + name + "\"");
}

inline AValue eval_final(const ExprPtr& e, const EvalContext& ctx) {
  switch (e->kind) {
    case ExprKind::Literal:
      return fin(e->literal);
    case ExprKind::List: {
      ValueList items;
      bool all_fin = true;
      for (const auto& c : e->children) {
        AValue av = eval_final(c, ctx);
        if (av.value.is_absent()) return absent();
        all_fin = all_fin && av.ann == Ann::Fin;
        items.push_back(av.value);
      }
      return {Value(std::move(items)), all_fin ? Ann::Fin : Ann::Var};
    }
    case ExprKind::VarRef:
      return eval_varref(e->name, ctx);
    case ExprKind::Not:
      return combine_not(eval_final(e->children[0], ctx));
    case ExprKind::And: {
      const AValue a = eval_final(e->children[0], ctx);
      if (a.fin_false()) return fin(false);  // short-circuit: right side may be a future hole
      return combine_and(a, eval_final(e->children[1], ctx));
    }
    case ExprKind::Or: {
      const AValue a = eval_final(e->children[0], ctx);
      if (a.fin_true()) return fin(true);
      return combine_or(a, eval_final(e->children[1], ctx));
    }
    case ExprKind::Compare:
      return combine_compare(e->cmp, eval_final(e->children[0], ctx), eval_final(e->children[1], ctx));
    case ExprKind::Call: {
      // the actual token count beats retokenization for the hole under decode
      if (e->name == "len_tokens" && e->children.size() == 1 &&
          e->children[0]->kind == ExprKind::VarRef && ctx.current_var_tokens &&
          e->children[0]->name == ctx.current_token_var) {
        const bool growing =
            ctx.scope->in_progress() && *ctx.scope->in_progress() == ctx.current_token_var;
        return {Value(*ctx.current_var_tokens), growing ? Ann::Inc : Ann::Fin};
      }
      std::vector<AValue> args;
      for (const auto& c : e->children) args.push_back(eval_final(c, ctx));
      return apply_call(ctx, e->name, args);
    }
  }
  throw EvalError("malformed expression");
}

/// Value semantics: strict evaluation with Absent absorption.
inline Value eval_value(const ExprPtr& e, const EvalContext& ctx) { return eval_final(e, ctx).value; }

// --- Stop conditions -----------------------------------------------------------------------

struct StopCondition {
  std::string var;
  std::string phrase;
  bool keep_phrase = true;  // stops_at keeps it, stops_before strips it
};

/// Collects stop directives for `var` from the where clause (syntactic walk;
/// stops_at acts as a decoding directive wherever it appears).
inline void collect_stop_conditions(const ExprPtr& e, const std::string& var,
                                    std::vector<StopCondition>& out) {
  if (!e) return;
  if (e->kind == ExprKind::Call && (e->name == "stops_at" || e->name == "stops_before")) {
    if (e->children.size() == 2 && e->children[0]->kind == ExprKind::VarRef &&
        e->children[0]->name == var && e->children[1]->kind == ExprKind::Literal &&
        e->children[1]->literal.is_string()) {
      out.push_back({var, e->children[1]->literal.as_string(), e->name == "stops_at"});
    }
    return;
  }
  for (const auto& c : e->children) collect_stop_conditions(c, var, out);
}

}  // namespace pql
