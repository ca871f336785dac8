#pragma once

// Abstract syntax for query programs: decoder clause, prompt-body statements
// (top-level strings with holes/placeholders, bounded for, if/elif/else,
// assignment, list append, break), the model reference, the where expression
// and the optional distribute clause.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pql/value.hpp"

namespace pql {

struct SourcePos {
  int line = 0;
  int col = 0;
};

// --- Expressions ------------------------------------------------------------

enum class ExprKind { Literal, List, VarRef, Not, And, Or, Compare, Call };

enum class CmpOp { Lt, Gt, Le, Ge, Eq, In };

inline const char* cmp_op_name(CmpOp op) {
  switch (op) {
    case CmpOp::Lt: return "<";
    case CmpOp::Gt: return ">";
    case CmpOp::Le: return "<=";
    case CmpOp::Ge: return ">=";
    case CmpOp::Eq: return "==";
    case CmpOp::In: return "in";
  }
  return "?";
}

struct Expr;
using ExprPtr = std::shared_ptr<const Expr>;

struct Expr {
  ExprKind kind;
  SourcePos pos;

  Value literal;                 // Literal
  std::string name;              // VarRef, Call (normalized lowercase for builtins)
  CmpOp cmp = CmpOp::Eq;         // Compare
  std::vector<ExprPtr> children; // List elements, operands, call args

  static ExprPtr make_literal(Value v, SourcePos p = {}) {
    auto e = std::make_shared<Expr>();
    e->kind = ExprKind::Literal;
    e->literal = std::move(v);
    e->pos = p;
    return e;
  }
  static ExprPtr make_list(std::vector<ExprPtr> items, SourcePos p = {}) {
    auto e = std::make_shared<Expr>();
    e->kind = ExprKind::List;
    e->children = std::move(items);
    e->pos = p;
    return e;
  }
  static ExprPtr make_var(std::string name, SourcePos p = {}) {
    auto e = std::make_shared<Expr>();
    e->kind = ExprKind::VarRef;
    e->name = std::move(name);
    e->pos = p;
    return e;
  }
  static ExprPtr make_not(ExprPtr a, SourcePos p = {}) {
    auto e = std::make_shared<Expr>();
    e->kind = ExprKind::Not;
    e->children = {std::move(a)};
    e->pos = p;
    return e;
  }
  static ExprPtr make_bool_op(ExprKind kind, ExprPtr a, ExprPtr b, SourcePos p = {}) {
    auto e = std::make_shared<Expr>();
    e->kind = kind;
    e->children = {std::move(a), std::move(b)};
    e->pos = p;
    return e;
  }
  static ExprPtr make_compare(CmpOp op, ExprPtr a, ExprPtr b, SourcePos p = {}) {
    auto e = std::make_shared<Expr>();
    e->kind = ExprKind::Compare;
    e->cmp = op;
    e->children = {std::move(a), std::move(b)};
    e->pos = p;
    return e;
  }
  static ExprPtr make_call(std::string name, std::vector<ExprPtr> args, SourcePos p = {}) {
    auto e = std::make_shared<Expr>();
    e->kind = ExprKind::Call;
    e->name = std::move(name);
    e->children = std::move(args);
    e->pos = p;
    return e;
  }
};

// --- Prompt string segments --------------------------------------------------

enum class SegmentKind { Literal, Hole, Placeholder };

struct Segment {
  SegmentKind kind;
  std::string text;  // literal text or variable name
  friend bool operator==(const Segment&, const Segment&) = default;
};

// --- Statements ---------------------------------------------------------------

enum class StmtKind { Prompt, Assign, Append, ExprStmt, For, If, Break };

struct Statement;
using StmtPtr = std::shared_ptr<const Statement>;
using StmtList = std::vector<StmtPtr>;

struct IfArm {
  ExprPtr cond;
  StmtList body;
};

struct Statement {
  StmtKind kind;
  SourcePos pos;

  std::vector<Segment> segments;  // Prompt
  std::string raw_text;           // Prompt (original unescaped content, for printing)
  std::string target;             // Assign / Append / For loop var
  ExprPtr expr;                   // Assign / Append / ExprStmt value
  std::int64_t range = 0;         // For
  StmtList body;                  // For
  std::vector<IfArm> arms;        // If (cond+body per if/elif)
  StmtList else_body;             // If
};

// --- Program ------------------------------------------------------------------

enum class DecoderKind { Argmax, Sample, Beam };

inline const char* decoder_kind_name(DecoderKind k) {
  switch (k) {
    case DecoderKind::Argmax: return "argmax";
    case DecoderKind::Sample: return "sample";
    case DecoderKind::Beam: return "beam";
  }
  return "?";
}

struct DecoderClause {
  DecoderKind kind = DecoderKind::Argmax;
  int n = 1;
  std::map<std::string, double> params;  // open key-value list (temperature, max_length, ...)

  double param_or(const std::string& key, double fallback) const {
    auto it = params.find(key);
    return it == params.end() ? fallback : it->second;
  }
};

struct DistributeClause {
  std::string var;
  ExprPtr support;
};

struct QueryProgram {
  DecoderClause decoder;
  StmtList body;
  std::string model_ref;
  ExprPtr where;                             // may be null
  std::optional<DistributeClause> distribute;
  std::vector<std::string> hole_names;       // in first-occurrence order
  std::vector<std::string> params;           // free names that must be bound as query args
};

// --- JSON dumps (machine-readable AST behind a CLI flag; also AST equality) ---

inline nlohmann::json expr_to_json(const ExprPtr& e) {
  if (!e) return nullptr;
  nlohmann::json j;
  switch (e->kind) {
    case ExprKind::Literal:
      j["node"] = "literal";
      j["value"] = e->literal.to_json();
      if (e->literal.is_bool()) j["type"] = "bool";
      if (e->literal.is_string()) j["type"] = "string";
      if (e->literal.is_int()) j["type"] = "int";
      break;
    case ExprKind::List: {
      j["node"] = "list";
      auto& items = j["items"] = nlohmann::json::array();
      for (const auto& c : e->children) items.push_back(expr_to_json(c));
      break;
    }
    case ExprKind::VarRef:
      j["node"] = "var";
      j["name"] = e->name;
      break;
    case ExprKind::Not:
      j["node"] = "not";
      j["arg"] = expr_to_json(e->children[0]);
      break;
    case ExprKind::And:
    case ExprKind::Or:
      j["node"] = e->kind == ExprKind::And ? "and" : "or";
      j["lhs"] = expr_to_json(e->children[0]);
      j["rhs"] = expr_to_json(e->children[1]);
      break;
    case ExprKind::Compare:
      j["node"] = "compare";
      j["op"] = cmp_op_name(e->cmp);
      j["lhs"] = expr_to_json(e->children[0]);
      j["rhs"] = expr_to_json(e->children[1]);
      break;
    case ExprKind::Call: {
      j["node"] = "call";
      j["fn"] = e->name;
      auto& args = j["args"] = nlohmann::json::array();
      for (const auto& c : e->children) args.push_back(expr_to_json(c));
      break;
    }
  }
  return j;
}

inline nlohmann::json stmt_to_json(const StmtPtr& s);

inline nlohmann::json body_to_json(const StmtList& body) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : body) arr.push_back(stmt_to_json(s));
  return arr;
}

inline nlohmann::json stmt_to_json(const StmtPtr& s) {
  nlohmann::json j;
  switch (s->kind) {
    case StmtKind::Prompt: {
      j["node"] = "prompt";
      auto& segs = j["segments"] = nlohmann::json::array();
      for (const auto& seg : s->segments) {
        nlohmann::json js;
        js["kind"] = seg.kind == SegmentKind::Literal ? "literal"
                     : seg.kind == SegmentKind::Hole  ? "hole"
                                                      : "placeholder";
        js["text"] = seg.text;
        segs.push_back(js);
      }
      break;
    }
    case StmtKind::Assign:
      j["node"] = "assign";
      j["target"] = s->target;
      j["value"] = expr_to_json(s->expr);
      break;
    case StmtKind::Append:
      j["node"] = "append";
      j["target"] = s->target;
      j["value"] = expr_to_json(s->expr);
      break;
    case StmtKind::ExprStmt:
      j["node"] = "expr";
      j["value"] = expr_to_json(s->expr);
      break;
    case StmtKind::For:
      j["node"] = "for";
      j["var"] = s->target;
      j["range"] = s->range;
      j["body"] = body_to_json(s->body);
      break;
    case StmtKind::If: {
      j["node"] = "if";
      auto& arms = j["arms"] = nlohmann::json::array();
      for (const auto& arm : s->arms) {
        nlohmann::json ja;
        ja["cond"] = expr_to_json(arm.cond);
        ja["body"] = body_to_json(arm.body);
        arms.push_back(ja);
      }
      j["else"] = body_to_json(s->else_body);
      break;
    }
    case StmtKind::Break:
      j["node"] = "break";
      break;
  }
  return j;
}

inline nlohmann::json program_to_json(const QueryProgram& q) {
  nlohmann::json j;
  j["decoder"]["kind"] = decoder_kind_name(q.decoder.kind);
  j["decoder"]["n"] = q.decoder.n;
  for (const auto& [k, v] : q.decoder.params) j["decoder"]["params"][k] = v;
  j["body"] = body_to_json(q.body);
  j["model"] = q.model_ref;
  j["where"] = q.where ? expr_to_json(q.where) : nlohmann::json(nullptr);
  if (q.distribute) {
    j["distribute"]["var"] = q.distribute->var;
    j["distribute"]["support"] = expr_to_json(q.distribute->support);
  } else {
    j["distribute"] = nullptr;
  }
  j["holes"] = q.hole_names;
  j["params"] = q.params;
  return j;
}

}  // namespace pql
