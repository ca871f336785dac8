#pragma once

// Static validation of parsed programs: placeholder binding, distribute-clause
// placement, function arity, stop-directive shape, and the soundness guard
// rejecting negated exact-match constraints on hole variables.

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "pql/ast.hpp"
#include "pql/parse.hpp"

namespace pql {

struct Diagnostic {
  SourcePos pos;
  std::string message;
};

struct ValidateOptions {
  std::set<std::string> registered_fns;  // user-registered pure functions
};

namespace detail {

struct Validator {
  const QueryProgram& q;
  const ValidateOptions& opts;
  std::vector<Diagnostic>& out;

  std::set<std::string> holes;        // all hole names in the program
  std::set<std::string> script_vars;  // assign/append/loop targets
  std::set<std::string> params;       // free names: must be bound as query args

  void emit(SourcePos pos, std::string msg) { out.push_back({pos, std::move(msg)}); }

  static bool builtin_arity_ok(const std::string& name, std::size_t n) {
    if (name == "words" || name == "sentences" || name == "len" || name == "len_tokens" ||
        name == "int")
      return n == 1;
    if (name == "stops_at" || name == "stops_before" || name == "endswith" || name == "split")
      return n == 2;
    return true;
  }

  bool is_builtin(const std::string& name) const {
    return detail::builtin_names().count(name) > 0 || name == "stops_at";
  }

  void collect_targets(const StmtList& body) {
    for (const auto& s : body) {
      switch (s->kind) {
        case StmtKind::Assign:
        case StmtKind::Append:
          script_vars.insert(s->target);
          break;
        case StmtKind::For:
          script_vars.insert(s->target);
          collect_targets(s->body);
          break;
        case StmtKind::If:
          for (const auto& arm : s->arms) collect_targets(arm.body);
          collect_targets(s->else_body);
          break;
        default:
          break;
      }
    }
  }

  // -- expression checks: known names, arity, registered functions --
  void check_expr(const ExprPtr& e, const std::set<std::string>& assigned, bool inside_where) {
    switch (e->kind) {
      case ExprKind::Literal:
        break;
      case ExprKind::List:
      case ExprKind::Not:
      case ExprKind::And:
      case ExprKind::Or:
      case ExprKind::Compare:
        for (const auto& c : e->children) check_expr(c, assigned, inside_where);
        break;
      case ExprKind::VarRef: {
        if (holes.count(e->name) || script_vars.count(e->name) || assigned.count(e->name)) break;
        if (inside_where) {
          emit(e->pos, "unknown variable \"" + e->name + "\" in where clause");
        } else {
          params.insert(e->name);  // free name: becomes a query argument
        }
        break;
      }
      case ExprKind::Call: {
        if (is_builtin(e->name)) {
          if (!builtin_arity_ok(e->name, e->children.size()))
            emit(e->pos, "wrong number of arguments for " + e->name + "()");
        } else if (!opts.registered_fns.count(e->name)) {
          emit(e->pos, "unknown function \"" + e->name + "\"");
        }
        if (e->name == "stops_at" || e->name == "stops_before") {
          if (e->children.size() == 2) {
            if (e->children[0]->kind != ExprKind::VarRef || !holes.count(e->children[0]->name))
              emit(e->pos, e->name + "() needs a hole variable as its first argument");
            if (e->children[1]->kind != ExprKind::Literal || !e->children[1]->literal.is_string())
              emit(e->pos, e->name + "() needs a fixed string phrase");
          }
        }
        for (const auto& c : e->children) check_expr(c, assigned, inside_where);
        break;
      }
    }
  }

  // -- statement walk with must-assign tracking --
  void check_body(const StmtList& body, std::set<std::string>& assigned, bool in_loop) {
    for (const auto& s : body) {
      switch (s->kind) {
        case StmtKind::Prompt: {
          for (const auto& seg : s->segments) {
            if (seg.kind == SegmentKind::Placeholder) {
              if (assigned.count(seg.text)) continue;
              if (holes.count(seg.text) || script_vars.count(seg.text)) {
                emit(s->pos, "placeholder {" + seg.text + "} is read before it is assigned");
              } else {
                params.insert(seg.text);
              }
            } else if (seg.kind == SegmentKind::Hole) {
              if (script_vars.count(seg.text))
                emit(s->pos, "hole [" + seg.text + "] collides with a script variable");
              assigned.insert(seg.text);
            }
          }
          break;
        }
        case StmtKind::Assign:
          if (holes.count(s->target))
            emit(s->pos, "cannot assign to hole variable \"" + s->target + "\"");
          check_expr(s->expr, assigned, false);
          assigned.insert(s->target);
          break;
        case StmtKind::Append:
          if (!assigned.count(s->target))
            emit(s->pos, "append target \"" + s->target + "\" is not assigned yet");
          check_expr(s->expr, assigned, false);
          break;
        case StmtKind::ExprStmt:
          check_expr(s->expr, assigned, false);
          break;
        case StmtKind::For: {
          if (s->range < 0) emit(s->pos, "negative loop range");
          std::set<std::string> inner = assigned;
          inner.insert(s->target);
          check_body(s->body, inner, true);
          break;
        }
        case StmtKind::If: {
          std::vector<std::set<std::string>> arm_sets;
          for (const auto& arm : s->arms) {
            check_expr(arm.cond, assigned, false);
            std::set<std::string> inner = assigned;
            check_body(arm.body, inner, in_loop);
            arm_sets.push_back(std::move(inner));
          }
          if (!s->else_body.empty()) {
            std::set<std::string> inner = assigned;
            check_body(s->else_body, inner, in_loop);
            arm_sets.push_back(std::move(inner));
          } else {
            arm_sets.push_back(assigned);  // fall-through path assigns nothing
          }
          // guaranteed assignments: intersection over all paths
          std::set<std::string> common = arm_sets[0];
          for (const auto& as : arm_sets) {
            std::set<std::string> tmp;
            std::set_intersection(common.begin(), common.end(), as.begin(), as.end(),
                                  std::inserter(tmp, tmp.begin()));
            common = std::move(tmp);
          }
          assigned = std::move(common);
          break;
        }
        case StmtKind::Break:
          if (!in_loop) emit(s->pos, "break outside of a loop");
          break;
      }
    }
  }

  // -- negation polarity guard --
  void check_polarity(const ExprPtr& e, bool negated) {
    switch (e->kind) {
      case ExprKind::Not:
        check_polarity(e->children[0], !negated);
        break;
      case ExprKind::And:
      case ExprKind::Or:
        check_polarity(e->children[0], negated);
        check_polarity(e->children[1], negated);
        break;
      case ExprKind::Compare: {
        if (negated) {
          auto is_hole_ref = [&](const ExprPtr& c) {
            return c->kind == ExprKind::VarRef && holes.count(c->name) > 0;
          };
          if (e->cmp == CmpOp::In && is_hole_ref(e->children[0]) &&
              e->children[1]->kind == ExprKind::List)
            emit(e->pos, "negated membership constraint on a hole variable cannot be masked soundly");
          if (e->cmp == CmpOp::Eq && (is_hole_ref(e->children[0]) || is_hole_ref(e->children[1])))
            emit(e->pos, "negated equality constraint on a hole variable cannot be masked soundly");
        }
        break;
      }
      case ExprKind::Call:
        if (negated && (e->name == "stops_at" || e->name == "stops_before"))
          emit(e->pos, "negated " + e->name + "() is not supported");
        break;
      default:
        break;
    }
  }

  // -- distribute clause: the variable must be the final hole on every path --
  struct LastHoles {
    std::set<std::string> names;
    bool none_possible = true;  // some path may contribute no hole
  };

  static LastHoles last_holes_stmt(const StmtPtr& s) {
    LastHoles r;
    switch (s->kind) {
      case StmtKind::Prompt: {
        for (auto it = s->segments.rbegin(); it != s->segments.rend(); ++it) {
          if (it->kind == SegmentKind::Hole) {
            r.names.insert(it->text);
            r.none_possible = false;
            return r;
          }
        }
        return r;
      }
      case StmtKind::For: {
        LastHoles body = last_holes_body(s->body);
        if (s->range == 0) return LastHoles{};
        return body;
      }
      case StmtKind::If: {
        LastHoles r2;
        r2.none_possible = s->else_body.empty();
        for (const auto& arm : s->arms) {
          LastHoles a = last_holes_body(arm.body);
          r2.names.insert(a.names.begin(), a.names.end());
          r2.none_possible = r2.none_possible || a.none_possible;
        }
        if (!s->else_body.empty()) {
          LastHoles a = last_holes_body(s->else_body);
          r2.names.insert(a.names.begin(), a.names.end());
          r2.none_possible = r2.none_possible || a.none_possible;
        }
        return r2;
      }
      default:
        return r;
    }
  }

  static LastHoles last_holes_body(const StmtList& body) {
    LastHoles acc;
    for (auto it = body.rbegin(); it != body.rend(); ++it) {
      LastHoles s = last_holes_stmt(*it);
      acc.names.insert(s.names.begin(), s.names.end());
      if (!s.none_possible) {
        acc.none_possible = false;
        break;
      }
    }
    return acc;
  }

  void run() {
    holes.insert(q.hole_names.begin(), q.hole_names.end());
    collect_targets(q.body);

    std::set<std::string> assigned;
    check_body(q.body, assigned, false);

    if (q.where) {
      check_expr(q.where, assigned, true);
      check_polarity(q.where, false);
    }

    if (q.distribute) {
      const std::string& var = q.distribute->var;
      check_expr(q.distribute->support, assigned, true);
      if (!holes.count(var)) {
        emit({0, 0}, "distribute variable \"" + var + "\" is not a hole in the query");
      } else {
        LastHoles last = last_holes_body(q.body);
        if (last.none_possible || last.names.size() != 1 || !last.names.count(var))
          emit({0, 0},
               "distribute must refer to the last hole variable on every path (got \"" + var + "\")");
      }
    }

    if (q.decoder.params.count("temperature") && !(q.decoder.param_or("temperature", 1.0) > 0.0))
      emit({0, 0}, "decoder temperature must be positive");
    if (q.decoder.params.count("max_length") && q.decoder.param_or("max_length", 1.0) < 1.0)
      emit({0, 0}, "decoder max_length must be at least 1");

    if (q.body.empty()) emit({0, 0}, "query body is empty");
  }
};

}  // namespace detail

/// Empty result means the program satisfies all static invariants.
inline std::vector<Diagnostic> validate_program(const QueryProgram& q,
                                                const ValidateOptions& opts = {}) {
  std::vector<Diagnostic> out;
  detail::Validator v{q, opts, out, {}, {}, {}};
  v.run();
  return out;
}

/// Derived query parameters: free names used by the program (must be bound as
/// query arguments at execution time).
inline std::vector<std::string> query_params(const QueryProgram& q, const ValidateOptions& opts = {}) {
  std::vector<Diagnostic> sink;
  detail::Validator v{q, opts, sink, {}, {}, {}};
  v.run();
  return {v.params.begin(), v.params.end()};
}

}  // namespace pql
