#pragma once

// Executable soundness oracles. The admissible-token set is computed by
// exhaustive continuation enumeration (bounded depth) against the value-level
// semantics only, independent of the follow/mask path it checks: a token is
// admissible when some continuation ends the hole without the where clause
// being definitively false, honoring stop directives along the way.

#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "pql/runtime.hpp"
#include "pql/semantics.hpp"
#include "pql/vocab.hpp"

namespace pql {

struct OracleLimits {
  std::size_t max_vocab = 32;
  int max_depth = 5;
};

/// T_Q at one decode step: bit t is 1 iff picking t next still leaves a legal
/// way to end the hole within `depth` further tokens.
inline TokenMask brzozowski_admissible(const ExprPtr& where, const Scope& scope_at_step,
                                       const std::string& var, const std::string& value,
                                       const Vocabulary& vocab, const FunctionRegistry& fns,
                                       int depth, const OracleLimits& limits = {}) {
  if (vocab.size() > limits.max_vocab)
    throw RuntimeError("oracle: vocabulary too large for exhaustive enumeration (" +
                       std::to_string(vocab.size()) + " > " + std::to_string(limits.max_vocab) + ")");
  if (depth > limits.max_depth) throw RuntimeError("oracle: depth cap exceeded");

  std::vector<StopCondition> stops;
  if (where) collect_stop_conditions(where, var, stops);

  Scope probe = scope_at_step;
  probe.abandon_in_progress();  // probe evaluates completed-variable states

  EvalContext ctx;
  ctx.scope = &probe;
  ctx.vocab = &vocab;
  ctx.fns = &fns;

  auto legal_end = [&](const std::string& val) {
    if (!where) return true;
    probe.bind(var, Value(val));
    return !is_false(eval_value(where, ctx));
  };
  auto stop_hit = [&](const std::string& val) {
    for (const auto& sc : stops)
      if (!sc.phrase.empty() && builtins::endswith(val, sc.phrase)) return true;
    return false;
  };

  std::unordered_map<std::string, bool> memo;  // keyed by value + depth budget
  std::function<bool(const std::string&, int)> viable = [&](const std::string& val, int left) -> bool {
    const std::string key = val + '\x1f' + std::to_string(left);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    bool ok = legal_end(val);
    if (!ok && left > 0 && !stop_hit(val)) {
      for (TokenId t = 0; t < static_cast<TokenId>(vocab.size()) && !ok; ++t) {
        if (t == vocab.eos_id()) continue;
        ok = viable(val + vocab.entry(t), left - 1);
      }
    }
    memo.emplace(key, ok);
    return ok;
  };

  TokenMask out(vocab.size(), false);
  const bool stopped_here = stop_hit(value);
  for (TokenId t = 0; t < static_cast<TokenId>(vocab.size()); ++t) {
    if (t == vocab.eos_id()) {
      if (legal_end(value)) out.set(t);
      continue;
    }
    if (stopped_here) continue;  // the runtime ends the hole at a matched stop phrase
    if (viable(value + vocab.entry(t), depth - 1)) out.set(t);
  }
  return out;
}

// --- Per-step reports --------------------------------------------------------------------

struct OracleStepReport {
  std::size_t step = 0;
  std::string var;
  std::string value_so_far;
  std::size_t mask_size = 0;
  std::size_t admissible_size = 0;
  std::vector<TokenId> violations;  // admissible tokens the mask dropped
};

struct OracleReport {
  std::vector<OracleStepReport> steps;
  std::size_t total_violations = 0;
  bool ok() const { return total_violations == 0; }
};

/// Observer adaptor: checks T_Q ⊆ M at every masked decode step of a run.
class OracleObserver {
 public:
  OracleObserver(const ExprPtr& where, const Vocabulary& vocab, const FunctionRegistry& fns,
                 int depth, OracleLimits limits = {})
      : where_(where), vocab_(vocab), fns_(fns), depth_(depth), limits_(limits) {}

  StepObserver hook() {
    return [this](const MaskStep& step) { this->on_step(step); };
  }

  const OracleReport& report() const { return report_; }

 private:
  void on_step(const MaskStep& step) {
    OracleStepReport r;
    r.step = report_.steps.size();
    r.var = step.var;
    r.value_so_far = step.value_so_far;
    r.mask_size = step.mask.count();
    const TokenMask tq = brzozowski_admissible(where_, *step.scope, step.var, step.value_so_far,
                                               vocab_, fns_, depth_, limits_);
    r.admissible_size = tq.count();
    for (TokenId t = 0; t < static_cast<TokenId>(vocab_.size()); ++t) {
      if (tq.test(t) && !step.mask.test(t)) r.violations.push_back(t);
    }
    report_.total_violations += r.violations.size();
    report_.steps.push_back(std::move(r));
  }

  ExprPtr where_;
  const Vocabulary& vocab_;
  const FunctionRegistry& fns_;
  int depth_;
  OracleLimits limits_;
  OracleReport report_;
};

// --- Pointwise follow-vs-final soundness -----------------------------------------------------

struct PointwiseViolation {
  std::size_t step = 0;
  TokenId token = 0;
  std::string var;
  std::string value_so_far;
};

/// The soundness condition as an executable check: whenever the follow map
/// reports FIN(false) for a token, re-evaluating final semantics with the
/// token appended must also give FIN(false).
class PointwiseSoundnessObserver {
 public:
  PointwiseSoundnessObserver(const ExprPtr& where, const Vocabulary& vocab,
                             const FunctionRegistry& fns)
      : where_(where), vocab_(vocab), fns_(fns) {}

  StepObserver hook() {
    return [this](const MaskStep& step) { this->on_step(step); };
  }

  const std::vector<PointwiseViolation>& violations() const { return violations_; }
  std::size_t steps_checked() const { return steps_; }
  std::size_t tokens_checked() const { return tokens_; }

 private:
  void on_step(const MaskStep& step) {
    if (!step.follow_map) {
      ++steps_;
      return;
    }
    for (TokenId t = 0; t < static_cast<TokenId>(vocab_.size()); ++t) {
      ++tokens_;
      const AValue& fv = step.follow_map->evaluate(t, vocab_);
      if (!fv.fin_false()) continue;
      Scope probe = *step.scope;
      EvalContext ctx;
      ctx.scope = &probe;
      ctx.vocab = &vocab_;
      ctx.fns = &fns_;
      ctx.current_token_var = step.var;
      if (t == vocab_.eos_id()) {
        probe.finish_hole(step.var, step.value_so_far);
        ctx.current_var_tokens = step.value_tokens;
      } else {
        probe.update_hole(step.var, step.value_so_far + vocab_.entry(t));
        ctx.current_var_tokens = step.value_tokens + 1;
      }
      if (!eval_final(where_, ctx).fin_false())
        violations_.push_back({steps_, t, step.var, step.value_so_far});
    }
    ++steps_;
  }

  ExprPtr where_;
  const Vocabulary& vocab_;
  const FunctionRegistry& fns_;
  std::vector<PointwiseViolation> violations_;
  std::size_t steps_ = 0;
  std::size_t tokens_ = 0;
};

}  // namespace pql
