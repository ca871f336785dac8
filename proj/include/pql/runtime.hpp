#pragma once

// Query execution: trace-building statement evaluation, masked decoding with a
// bounded backtracking fallback, the naive backtracking baseline, scripted
// beam search, lockstep sampling, distribute scoring and the chunk-wise
// generate() baseline. One DFS engine drives both masked and naive decoding so
// the two stay comparable step for step.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pql/ast.hpp"
#include "pql/follow.hpp"
#include "pql/model.hpp"
#include "pql/rng.hpp"
#include "pql/semantics.hpp"
#include "pql/validate.hpp"
#include "pql/vocab.hpp"

namespace pql {

class RuntimeError : public std::runtime_error {
 public:
  explicit RuntimeError(const std::string& msg) : std::runtime_error(msg) {}
};

// --- Interaction trace -----------------------------------------------------------

struct TraceSpan {
  enum class Kind { Literal, Hole };
  Kind kind;
  std::string var;  // hole spans
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// The text transcript u plus its aligned token sequence and provenance spans.
struct InteractionTrace {
  std::string text;
  std::vector<TokenId> token_ids;
  std::vector<TraceSpan> spans;

  void append_literal(const Vocabulary& v, const std::string& s) {
    if (s.empty()) return;
    const auto ts = v.tokenize(s);
    spans.push_back({TraceSpan::Kind::Literal, "", text.size(), text.size() + s.size()});
    text += s;
    token_ids.insert(token_ids.end(), ts.begin(), ts.end());
  }

  void append_hole(const Vocabulary& v, const std::string& var, const std::string& value,
                   const std::vector<TokenId>& tokens) {
    spans.push_back({TraceSpan::Kind::Hole, var, text.size(), text.size() + value.size()});
    text += value;
    token_ids.insert(token_ids.end(), tokens.begin(), tokens.end());
    (void)v;
  }
};

// --- Cost accounting ---------------------------------------------------------------

struct CallRecord {
  std::size_t prompt_tokens = 0;
  std::size_t generated = 0;
};

struct CostStats {
  std::uint64_t model_queries = 0;
  std::uint64_t decoder_calls = 0;
  std::uint64_t billable_tokens = 0;
  std::uint64_t backtracks = 0;
  std::uint64_t cache_hits = 0;
  std::vector<CallRecord> calls;

  std::size_t start_call(std::size_t prompt_tokens) {
    ++decoder_calls;
    billable_tokens += prompt_tokens;
    calls.push_back({prompt_tokens, 0});
    return calls.size() - 1;
  }
  void count_generated(std::size_t call_idx, std::size_t n = 1) {
    billable_tokens += n;
    calls.at(call_idx).generated += n;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["model_queries"] = model_queries;
    j["decoder_calls"] = decoder_calls;
    j["billable_tokens"] = billable_tokens;
    j["backtracks"] = backtracks;
    j["cache_hits"] = cache_hits;
    return j;
  }
};

// --- Results --------------------------------------------------------------------------

struct BranchResult {
  std::string text;
  std::vector<TraceSpan> spans;
  std::map<std::string, Value> variables;
  double logprob = 0.0;
};

struct QueryResult {
  bool ok = false;
  std::string error;
  std::vector<BranchResult> branches;
  std::optional<std::vector<std::pair<std::string, double>>> distribution;
  CostStats stats;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["ok"] = ok;
    if (!ok) j["error"] = error;
    auto& bs = j["branches"] = nlohmann::ordered_json::array();
    for (const auto& b : branches) {
      nlohmann::ordered_json jb;
      jb["text"] = b.text;
      jb["logprob"] = b.logprob;
      auto& vars = jb["variables"] = nlohmann::ordered_json::object();
      for (const auto& [k, v] : b.variables) vars[k] = v.to_json();
      auto& spans = jb["spans"] = nlohmann::ordered_json::array();
      for (const auto& s : b.spans) {
        nlohmann::ordered_json js;
        js["kind"] = s.kind == TraceSpan::Kind::Hole ? "hole" : "literal";
        if (s.kind == TraceSpan::Kind::Hole) js["var"] = s.var;
        js["begin"] = s.begin;
        js["end"] = s.end;
        spans.push_back(js);
      }
      bs.push_back(jb);
    }
    if (distribution) {
      auto& d = j["distribution"] = nlohmann::ordered_json::object();
      for (const auto& [value, prob] : *distribution) d[value] = prob;
    } else {
      j["distribution"] = nullptr;
    }
    j["stats"] = stats.to_json();
    return j;
  }
};

// --- Execution log (per-statement snapshots for worked-example goldens) -----------------

struct ExecLogRow {
  std::string label;
  std::string trace_text;
  std::map<std::string, Value> scope;
};

using ExecLog = std::vector<ExecLogRow>;

// --- Observation hook (soundness oracles instrument every mask step) --------------------

struct MaskStep {
  const InteractionTrace* trace = nullptr;
  const Scope* scope = nullptr;
  std::string var;
  std::string value_so_far;
  std::int64_t value_tokens = 0;
  const FollowMap* follow_map = nullptr;  // null when no where clause
  TokenMask mask;
  std::vector<TokenId> context;
};

using StepObserver = std::function<void(const MaskStep&)>;

// --- Options -----------------------------------------------------------------------------

enum class DecodeMode { Masked, Naive };

struct RunOptions {
  std::uint64_t seed = 0;
  DecodeMode mode = DecodeMode::Masked;
  int default_max_length = 256;     // per hole, overridable by decoder params
  int backtrack_budget = 256;       // masked fallback expansions
  int naive_expansion_budget = 20000;
  std::int64_t statement_budget = 100000;
  bool cache_enabled = true;
  StepObserver observer;            // called at every masked decode step
  ExecLog* exec_log = nullptr;      // statement-level snapshots when non-null
};

// --- Mask computation ----------------------------------------------------------------------

/// Follow-derived mask plus the stop-directive restriction: once an active
/// stop phrase matches, only EOS survives.
inline TokenMask compute_mask(const ExprPtr& where, const FollowContext& fctx,
                              const std::vector<StopCondition>& stops, FollowMap* fm_out = nullptr) {
  const Vocabulary& v = *fctx.eval->vocab;
  TokenMask mask(v.size(), true);
  if (where) {
    FollowMap fm = follow(where, fctx);
    mask = derive_mask(fm, v);
    if (fm_out) *fm_out = std::move(fm);
  }
  for (const auto& sc : stops) {
    if (!sc.phrase.empty() && builtins::endswith(fctx.current_value, sc.phrase)) {
      TokenMask eos_only(v.size(), false);
      if (mask.test(v.eos_id())) eos_only.set(v.eos_id());
      mask = eos_only;
      break;
    }
  }
  return mask;
}

// --- Runtime ----------------------------------------------------------------------------------

class Runtime {
 public:
  Runtime(const Vocabulary& vocab, std::shared_ptr<Model> model)
      : vocab_(vocab), model_(std::move(model)) {
    if (model_->vocab_size() != vocab_.size())
      throw RuntimeError("model and vocabulary disagree on |V|");
  }

  FunctionRegistry& functions() { return fns_; }
  const FunctionRegistry& functions() const { return fns_; }

  QueryResult execute(const QueryProgram& q, const std::map<std::string, Value>& args,
                      const RunOptions& opts = {});

  /// generate()-style baseline: unconstrained chunks, post-hoc truncation at
  /// stop phrases, no token-level masks. Same statement machinery and stats.
  QueryResult execute_chunkwise(const QueryProgram& q, const std::map<std::string, Value>& args,
                                int chunk_size, const RunOptions& opts = {});

  /// Full decoding: enumerates every mask-legal execution of the program and
  /// returns all completed traces ranked by accumulated logprob. Test oracle
  /// only; cost is exponential in the reachable sequence space.
  std::vector<BranchResult> enumerate_executions(const QueryProgram& q,
                                                 const std::map<std::string, Value>& args,
                                                 std::size_t limit = 10000,
                                                 const RunOptions& opts = {});

 private:
  // ---- branch state ----
  struct Frame {
    const StmtList* body = nullptr;
    std::size_t idx = 0;
    bool is_loop = false;
    std::string loop_var;
    std::int64_t loop_i = 0;
    std::int64_t loop_n = 0;
    SourcePos loop_pos;
  };

  struct HoleDecode {
    std::string var;
    std::string value;
    std::vector<TokenId> tokens;
    std::vector<StopCondition> stops;
  };

  enum class Status { Running, Done, Failed };

  struct Branch {
    InteractionTrace trace;
    Scope scope;
    std::vector<Frame> frames;
    std::size_t seg_idx = 0;
    std::optional<HoleDecode> hole;
    double logprob = 0.0;
    Status status = Status::Running;
    std::string failure;
    bool distribute_pending = false;
    int index = 0;
    std::optional<Rng> rng;
    bool stream_open = false;
    std::size_t call_idx = 0;  // CallRecord backing this branch's stream
  };

  enum class Advance { NeedHole, Done, Failed };

  struct Ctx {
    const QueryProgram* q = nullptr;
    const RunOptions* opts = nullptr;
    CostStats stats;
    FunctionCache cache;
    std::int64_t statements_left = 0;
    int next_branch_index = 1;
    bool final_where_check = true;  // the chunkwise baseline cannot enforce constraints
  };

  // ---- shared helpers ----

  EvalContext eval_ctx(const Branch& b, Ctx& c) const {
    EvalContext ctx;
    ctx.scope = &b.scope;
    ctx.vocab = &vocab_;
    ctx.fns = &fns_;
    ctx.cache = c.opts->cache_enabled ? &c.cache : nullptr;
    if (b.hole) {
      ctx.current_token_var = b.hole->var;
      ctx.current_var_tokens = static_cast<std::int64_t>(b.hole->tokens.size());
    }
    return ctx;
  }

  std::vector<TokenId> model_context(const Branch& b) const {
    std::vector<TokenId> ctx = b.trace.token_ids;
    if (b.hole) ctx.insert(ctx.end(), b.hole->tokens.begin(), b.hole->tokens.end());
    return ctx;
  }

  ScoreVector query_model(const Branch& b, Ctx& c) {
    ++c.stats.model_queries;
    return model_->score_next(model_context(b));
  }

  void open_stream(Branch& b, Ctx& c) {
    if (b.stream_open) return;
    b.stream_open = true;
    b.call_idx = c.stats.start_call(b.trace.token_ids.size());
  }

  void bill_generated(Branch& b, Ctx& c, std::size_t n = 1) {
    if (b.stream_open) c.stats.count_generated(b.call_idx, n);
  }

  double temperature(const QueryProgram& q) const { return q.decoder.param_or("temperature", 1.0); }
  int max_length(const QueryProgram& q, const RunOptions& opts) const {
    return static_cast<int>(q.decoder.param_or("max_length", opts.default_max_length));
  }

  /// Accept test for ending the hole at its current value: completing must not
  /// make the where clause definitively false.
  bool accept_completion(Branch& b, Ctx& c) {
    if (!c.q->where) return true;
    Scope probe = b.scope;
    probe.finish_hole(b.hole->var, b.hole->value);
    EvalContext ctx;
    ctx.scope = &probe;
    ctx.vocab = &vocab_;
    ctx.fns = &fns_;
    ctx.cache = c.opts->cache_enabled ? &c.cache : nullptr;
    ctx.current_token_var = b.hole->var;
    ctx.current_var_tokens = static_cast<std::int64_t>(b.hole->tokens.size());
    return !eval_final(c.q->where, ctx).fin_false();
  }

  std::optional<StopCondition> triggered_stop(const Branch& b) const {
    for (const auto& sc : b.hole->stops) {
      if (!sc.phrase.empty() && builtins::endswith(b.hole->value, sc.phrase)) return sc;
    }
    return std::nullopt;
  }

  void commit_hole(Branch& b, Ctx& c, std::size_t strip_len = 0) {
    std::string value = b.hole->value;
    std::vector<TokenId> tokens = b.hole->tokens;
    if (strip_len > 0) {
      value.resize(value.size() - strip_len);
      tokens = vocab_.tokenize(value);
    }
    b.trace.append_hole(vocab_, b.hole->var, value, tokens);
    b.scope.finish_hole(b.hole->var, value);
    b.hole.reset();
    ++b.seg_idx;
  }

  void fail_branch(Branch& b, const std::string& why) {
    b.status = Status::Failed;
    b.failure = why;
    if (b.hole) {
      b.scope.abandon_in_progress();
      b.hole.reset();
    }
  }

  void log_row(Branch& b, Ctx& c, const std::string& label) {
    if (!c.opts->exec_log) return;
    c.opts->exec_log->push_back({label, b.trace.text, b.scope.values()});
  }

  // ---- statement machine ----

  Advance advance(Branch& b, Ctx& c) {
    while (true) {
      if (b.status == Status::Failed) return Advance::Failed;
      if (b.frames.empty()) {
        if (c.q->where && c.final_where_check) {
          EvalContext ctx = eval_ctx(b, c);
          if (is_false(eval_value(c.q->where, ctx))) {
            fail_branch(b, "completed trace violates the where clause");
            return Advance::Failed;
          }
        }
        b.status = Status::Done;
        return Advance::Done;
      }
      Frame& f = b.frames.back();
      if (f.idx >= f.body->size()) {
        if (f.is_loop) {
          if (b.frames.size() == 2)
            log_row(b, c, "line " + std::to_string(f.loop_pos.line) + ", i=" + std::to_string(f.loop_i));
          ++f.loop_i;
          if (f.loop_i < f.loop_n) {
            b.scope.bind(f.loop_var, Value(f.loop_i));
            f.idx = 0;
            continue;
          }
        }
        b.frames.pop_back();
        continue;
      }
      if (--c.statements_left < 0) {
        fail_branch(b, "statement budget exceeded (runaway loop?)");
        return Advance::Failed;
      }
      const Statement& s = *(*f.body)[f.idx];
      try {
        switch (s.kind) {
          case StmtKind::Prompt: {
            while (b.seg_idx < s.segments.size()) {
              const Segment& seg = s.segments[b.seg_idx];
              if (seg.kind == SegmentKind::Literal) {
                b.trace.append_literal(vocab_, seg.text);
                bill_generated(b, c, vocab_.tokenize(seg.text).size());
                ++b.seg_idx;
              } else if (seg.kind == SegmentKind::Placeholder) {
                if (!b.scope.has_value(seg.text))
                  throw RuntimeError("placeholder {" + seg.text + "} is unbound");
                const std::string sub = b.scope.value(seg.text).to_display();
                b.trace.append_literal(vocab_, sub);
                bill_generated(b, c, vocab_.tokenize(sub).size());
                ++b.seg_idx;
              } else {
                if (c.q->distribute && c.q->distribute->var == seg.text) {
                  b.distribute_pending = true;
                  b.status = Status::Done;
                  return Advance::Done;
                }
                HoleDecode h;
                h.var = seg.text;
                if (c.q->where) collect_stop_conditions(c.q->where, h.var, h.stops);
                b.scope.start_hole(h.var);
                b.hole = std::move(h);
                return Advance::NeedHole;
              }
            }
            b.seg_idx = 0;
            ++f.idx;
            if (b.frames.size() == 1) log_row(b, c, "line " + std::to_string(s.pos.line));
            break;
          }
          case StmtKind::Assign: {
            EvalContext ctx = eval_ctx(b, c);
            b.scope.bind(s.target, eval_value(s.expr, ctx));
            ++f.idx;
            if (b.frames.size() == 1) log_row(b, c, "line " + std::to_string(s.pos.line));
            break;
          }
          case StmtKind::Append: {
            EvalContext ctx = eval_ctx(b, c);
            b.scope.bind(s.target, b.scope.value(s.target).appended(eval_value(s.expr, ctx)));
            ++f.idx;
            break;
          }
          case StmtKind::ExprStmt: {
            EvalContext ctx = eval_ctx(b, c);
            eval_value(s.expr, ctx);
            ++f.idx;
            break;
          }
          case StmtKind::For: {
            ++f.idx;
            if (s.range > 0) {
              Frame lf;
              lf.body = &s.body;
              lf.is_loop = true;
              lf.loop_var = s.target;
              lf.loop_i = 0;
              lf.loop_n = s.range;
              lf.loop_pos = s.pos;
              b.scope.declare_script_var(s.target);
              b.scope.bind(s.target, Value(std::int64_t{0}));
              b.frames.push_back(lf);
            }
            break;
          }
          case StmtKind::If: {
            ++f.idx;
            EvalContext ctx = eval_ctx(b, c);
            const StmtList* chosen = nullptr;
            for (const auto& arm : s.arms) {
              const Value v = eval_value(arm.cond, ctx);
              if (v.is_absent())
                throw RuntimeError("if condition depends on an undecoded hole");
              if (is_true(v)) {
                chosen = &arm.body;
                break;
              }
            }
            if (!chosen && !s.else_body.empty()) chosen = &s.else_body;
            if (chosen) {
              Frame bf;
              bf.body = chosen;
              b.frames.push_back(bf);
            }
            break;
          }
          case StmtKind::Break: {
            while (!b.frames.empty() && !b.frames.back().is_loop) b.frames.pop_back();
            if (b.frames.empty()) throw RuntimeError("break outside of a loop");
            b.frames.pop_back();
            break;
          }
        }
      } catch (const std::exception& e) {
        fail_branch(b, e.what());
        return Advance::Failed;
      }
    }
  }

  // ---- token-level decode helpers ----

  struct StepChoice {
    TokenMask mask;          // masked mode only
    ProbVector probs;        // pick distribution (renormalized in masked mode)
    bool mask_empty = false;
  };

  StepChoice prepare_step(Branch& b, Ctx& c, bool masked) {
    StepChoice sc;
    const double tau = temperature(*c.q);
    if (masked) {
      FollowContext fctx;
      EvalContext ectx = eval_ctx(b, c);
      fctx.eval = &ectx;
      fctx.current_var = b.hole->var;
      fctx.current_value = b.hole->value;
      FollowMap fm;
      sc.mask = compute_mask(c.q->where, fctx, b.hole->stops, &fm);
      if (c.opts->observer) {
        MaskStep step;
        step.trace = &b.trace;
        step.scope = &b.scope;
        step.var = b.hole->var;
        step.value_so_far = b.hole->value;
        step.value_tokens = static_cast<std::int64_t>(b.hole->tokens.size());
        step.follow_map = c.q->where ? &fm : nullptr;
        step.mask = sc.mask;
        step.context = model_context(b);
        c.opts->observer(step);
      }
      if (!sc.mask.any()) {
        sc.mask_empty = true;
        return sc;
      }
      const ScoreVector z = query_model(b, c);
      sc.probs = apply_mask(softmax_temp(z, tau), sc.mask);
    } else {
      const ScoreVector z = query_model(b, c);
      sc.probs = softmax_temp(z, tau);
      sc.mask = TokenMask(vocab_.size(), true);
    }
    return sc;
  }

  /// argmax pick: highest probability, ties to the lowest token id.
  static std::optional<TokenId> pick_argmax(const ProbVector& p, const TokenMask& banned) {
    std::optional<TokenId> best;
    double best_p = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const TokenId t = static_cast<TokenId>(i);
      if (banned.test(t) || p[i] <= 0.0) continue;
      if (!best || p[i] > best_p) {
        best = t;
        best_p = p[i];
      }
    }
    return best;
  }

  static std::optional<TokenId> pick_sample(const ProbVector& p, const TokenMask& banned, Rng& rng) {
    std::vector<double> w(p.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (!banned.test(static_cast<TokenId>(i)) && p[i] > 0.0) {
        w[i] = p[i];
        total += p[i];
      }
    }
    if (total <= 0.0) return std::nullopt;
    return static_cast<TokenId>(rng.categorical(w));
  }

  // ---- DFS decode engine (argmax; masked and naive modes) ----

  struct DfsBudget {
    int expansions_left;
    int backtracks_left;
  };

  bool dfs_decode(Branch& b, Ctx& c, int depth, DfsBudget& budget) {
    const bool masked = c.opts->mode == DecodeMode::Masked;
    if (--budget.expansions_left < 0) return false;

    StepChoice sc = prepare_step(b, c, masked);
    if (masked && sc.mask_empty) return false;

    if (!masked) {
      // eager validation after the entry query: a definitive violation ends
      // this subtree for the price of the one query above
      EvalContext ctx = eval_ctx(b, c);
      if (c.q->where && eval_final(c.q->where, ctx).fin_false()) return false;
    }

    TokenMask banned(vocab_.size(), false);
    if (static_cast<int>(b.hole->tokens.size()) >= max_length(*c.q, *c.opts)) {
      for (TokenId t = 0; t < static_cast<TokenId>(vocab_.size()); ++t)
        if (t != vocab_.eos_id()) banned.set(t);
    }
    while (true) {
      const auto pick = pick_argmax(sc.probs, banned);
      if (!pick) return false;
      const TokenId t = *pick;
      if (t == vocab_.eos_id()) {
        if (accept_completion(b, c)) {
          commit_hole(b, c);
          return true;
        }
        banned.set(t);
        ++c.stats.backtracks;
        if (--budget.backtracks_left < 0) return false;
        continue;
      }
      // take the token
      b.hole->value += vocab_.entry(t);
      b.hole->tokens.push_back(t);
      b.scope.update_hole(b.hole->var, b.hole->value);
      bill_generated(b, c);

      bool child_ok = false;
      if (const auto stop = triggered_stop(b)) {
        if (accept_completion(b, c)) {
          commit_hole(b, c, stop->keep_phrase ? 0 : stop->phrase.size());
          return true;
        }
      } else {
        child_ok = dfs_decode(b, c, depth + 1, budget);
        if (child_ok) return true;
      }
      // rewind
      b.hole->tokens.pop_back();
      b.hole->value.resize(b.hole->value.size() - vocab_.entry(t).size());
      b.scope.update_hole(b.hole->var, b.hole->value);
      if (budget.expansions_left < 0) return false;
      banned.set(t);
      ++c.stats.backtracks;
      if (--budget.backtracks_left < 0) return false;
    }
  }

  // ---- single-branch sampled decode (lockstep round step) ----

  enum class SampleStep { Continue, HoleDone, Dead };

  SampleStep sample_token_step(Branch& b, Ctx& c) {
    StepChoice sc = prepare_step(b, c, true);
    if (sc.mask_empty) {
      fail_branch(b, "no viable token under the constraint mask");
      return SampleStep::Dead;
    }
    TokenMask no_ban(vocab_.size(), false);
    const auto pick = pick_sample(sc.probs, no_ban, *b.rng);
    if (!pick) {
      fail_branch(b, "no viable token");
      return SampleStep::Dead;
    }
    const TokenId t = *pick;
    b.logprob += std::log(sc.probs[static_cast<std::size_t>(t)]);
    if (t == vocab_.eos_id()) {
      if (!accept_completion(b, c)) {
        fail_branch(b, "completion rejected by the where clause");
        return SampleStep::Dead;
      }
      commit_hole(b, c);
      return SampleStep::HoleDone;
    }
    b.hole->value += vocab_.entry(t);
    b.hole->tokens.push_back(t);
    b.scope.update_hole(b.hole->var, b.hole->value);
    bill_generated(b, c);
    if (const auto stop = triggered_stop(b)) {
      if (!accept_completion(b, c)) {
        fail_branch(b, "stop directive ends the hole but the where clause rejects it");
        return SampleStep::Dead;
      }
      commit_hole(b, c, stop->keep_phrase ? 0 : stop->phrase.size());
      return SampleStep::HoleDone;
    }
    if (static_cast<int>(b.hole->tokens.size()) >= max_length(*c.q, *c.opts)) {
      fail_branch(b, "hole exceeded max_length");
      return SampleStep::Dead;
    }
    return SampleStep::Continue;
  }

  // ---- drivers ----

  Branch make_root(const QueryProgram& q, const std::map<std::string, Value>& args, Ctx& c) const {
    Branch b;
    for (const auto& name : q.hole_names) b.scope.declare_hole(name);
    // every target name is known up front so reads ahead of assignment read Absent
    std::function<void(const StmtList&)> declare = [&](const StmtList& body) {
      for (const auto& s : body) {
        if (s->kind == StmtKind::Assign || s->kind == StmtKind::For) b.scope.declare_script_var(s->target);
        if (s->kind == StmtKind::For) declare(s->body);
        if (s->kind == StmtKind::If) {
          for (const auto& arm : s->arms) declare(arm.body);
          declare(s->else_body);
        }
      }
    };
    declare(q.body);
    for (const auto& [k, v] : args) b.scope.bind(k, v);
    Frame root;
    root.body = &q.body;
    b.frames.push_back(root);
    (void)c;
    return b;
  }

  BranchResult branch_result(const Branch& b) const {
    BranchResult r;
    r.text = b.trace.text;
    r.spans = b.trace.spans;
    r.logprob = b.logprob;
    for (const auto& [k, v] : b.scope.values()) r.variables[k] = v;
    return r;
  }

  void finalize_result(QueryResult& res, Ctx& c) {
    res.stats = std::move(c.stats);
    res.stats.cache_hits = c.cache.hits();
  }

  QueryResult run_argmax(const QueryProgram& q, const std::map<std::string, Value>& args,
                         const RunOptions& opts, Ctx& c) {
    QueryResult res;
    Branch b = make_root(q, args, c);
    log_row(b, c, "init");
    while (true) {
      const Advance a = advance(b, c);
      if (a == Advance::Done) break;
      if (a == Advance::Failed) {
        res.ok = false;
        res.error = b.failure;
        res.branches.push_back(branch_result(b));
        finalize_result(res, c);
        return res;
      }
      open_stream(b, c);
      DfsBudget budget{opts.mode == DecodeMode::Naive
                           ? opts.naive_expansion_budget
                           : opts.backtrack_budget + max_length(q, opts) + 1,
                       opts.backtrack_budget};
      if (!dfs_decode(b, c, 0, budget)) {
        fail_branch(b, "decode failed: constraints admit no completion for [" +
                           (b.hole ? b.hole->var : std::string("?")) + "]");
        res.ok = false;
        res.error = b.failure;
        res.branches.push_back(branch_result(b));
        finalize_result(res, c);
        return res;
      }
    }
    res.ok = true;
    res.branches.push_back(branch_result(b));
    if (q.distribute && b.distribute_pending) score_distribution(q, b, c, res);
    finalize_result(res, c);
    return res;
  }

  QueryResult run_sample(const QueryProgram& q, const std::map<std::string, Value>& args,
                         const RunOptions& opts, Ctx& c) {
    QueryResult res;
    std::vector<Branch> branches;
    for (int i = 0; i < q.decoder.n; ++i) {
      Branch b = make_root(q, args, c);
      b.index = i;
      b.rng = Rng::substream(opts.seed, static_cast<std::uint64_t>(i));
      branches.push_back(std::move(b));
    }
    // lockstep rounds: every live branch advances one token per round so the
    // per-round model calls form one batch
    bool any_running = true;
    for (auto& b : branches) {
      if (advance(b, c) == Advance::NeedHole) open_stream(b, c);
    }
    while (any_running) {
      any_running = false;
      for (auto& b : branches) {
        if (b.status != Status::Running || !b.hole) continue;
        const SampleStep step = sample_token_step(b, c);
        if (step == SampleStep::HoleDone) {
          if (advance(b, c) == Advance::NeedHole) open_stream(b, c);
        }
        if (b.status == Status::Running) any_running = true;
      }
    }
    std::vector<const Branch*> done;
    for (const auto& b : branches)
      if (b.status == Status::Done) done.push_back(&b);
    if (done.empty()) {
      res.ok = false;
      res.error = branches.front().failure.empty() ? "all branches failed" : branches.front().failure;
      for (const auto& b : branches) res.branches.push_back(branch_result(b));
      finalize_result(res, c);
      return res;
    }
    std::stable_sort(done.begin(), done.end(), [](const Branch* x, const Branch* y) {
      if (x->logprob != y->logprob) return x->logprob > y->logprob;
      return x->index < y->index;
    });
    res.ok = true;
    for (const Branch* b : done) res.branches.push_back(branch_result(*b));
    if (q.distribute && done.front()->distribute_pending) {
      Branch top = *done.front();
      score_distribution(q, top, c, res);
    }
    finalize_result(res, c);
    return res;
  }

  QueryResult run_beam(const QueryProgram& q, const std::map<std::string, Value>& args,
                       const RunOptions& opts, Ctx& c) {
    QueryResult res;
    const int n = q.decoder.n;
    std::vector<Branch> beam;
    {
      Branch root = make_root(q, args, c);
      const Advance a = advance(root, c);
      if (a == Advance::Failed) {
        res.ok = false;
        res.error = root.failure;
        res.branches.push_back(branch_result(root));
        finalize_result(res, c);
        return res;
      }
      if (a == Advance::NeedHole) open_stream(root, c);
      beam.push_back(std::move(root));
    }

    std::string last_failure;
    while (std::any_of(beam.begin(), beam.end(),
                       [](const Branch& b) { return b.status == Status::Running; })) {
      struct Candidate {
        std::size_t from;
        bool carry;       // finished branch kept in the pool
        TokenId token = -1;
        double logprob;
      };
      std::vector<Candidate> cands;
      for (std::size_t i = 0; i < beam.size(); ++i) {
        Branch& b = beam[i];
        if (b.status == Status::Done) {
          cands.push_back({i, true, -1, b.logprob});
          continue;
        }
        if (b.status == Status::Failed) {
          last_failure = b.failure;
          continue;
        }
        StepChoice sc = prepare_step(b, c, true);
        if (sc.mask_empty) {
          last_failure = "no viable token under the constraint mask";
          fail_branch(b, last_failure);
          continue;
        }
        for (std::size_t ti = 0; ti < sc.probs.size(); ++ti) {
          if (sc.probs[ti] <= 0.0) continue;
          cands.push_back({i, false, static_cast<TokenId>(ti), b.logprob + std::log(sc.probs[ti])});
        }
      }
      if (cands.empty()) break;
      std::stable_sort(cands.begin(), cands.end(), [&](const Candidate& a, const Candidate& bb) {
        if (a.logprob != bb.logprob) return a.logprob > bb.logprob;
        if (beam[a.from].index != beam[bb.from].index) return beam[a.from].index < beam[bb.from].index;
        return a.token < bb.token;
      });
      if (static_cast<int>(cands.size()) > n) cands.resize(static_cast<std::size_t>(n));

      std::vector<Branch> next;
      for (const auto& cand : cands) {
        if (cand.carry) {
          next.push_back(beam[cand.from]);
          continue;
        }
        Branch nb = beam[cand.from];  // fork: scope, trace, frames, stream
        nb.index = c.next_branch_index++;
        nb.logprob = cand.logprob;
        const TokenId t = cand.token;
        if (t == vocab_.eos_id()) {
          if (!accept_completion(nb, c)) {
            last_failure = "completion rejected by the where clause";
            continue;
          }
          commit_hole(nb, c);
          if (advance(nb, c) == Advance::NeedHole) open_stream(nb, c);
        } else {
          nb.hole->value += vocab_.entry(t);
          nb.hole->tokens.push_back(t);
          nb.scope.update_hole(nb.hole->var, nb.hole->value);
          bill_generated(nb, c);
          if (const auto stop = triggered_stop(nb)) {
            if (!accept_completion(nb, c)) {
              last_failure = "stop directive ends the hole but the where clause rejects it";
              continue;
            }
            commit_hole(nb, c, stop->keep_phrase ? 0 : stop->phrase.size());
            if (advance(nb, c) == Advance::NeedHole) open_stream(nb, c);
          } else if (static_cast<int>(nb.hole->tokens.size()) >= max_length(q, opts)) {
            last_failure = "hole exceeded max_length";
            continue;
          }
        }
        if (nb.status != Status::Failed) next.push_back(std::move(nb));
      }
      beam = std::move(next);
      if (beam.empty()) break;
    }

    std::vector<const Branch*> done;
    for (const auto& b : beam)
      if (b.status == Status::Done) done.push_back(&b);
    std::stable_sort(done.begin(), done.end(), [](const Branch* x, const Branch* y) {
      if (x->logprob != y->logprob) return x->logprob > y->logprob;
      return x->index < y->index;
    });
    if (done.empty()) {
      res.ok = false;
      res.error = last_failure.empty() ? "all beams failed" : last_failure;
      for (const auto& b : beam) res.branches.push_back(branch_result(b));
      finalize_result(res, c);
      return res;
    }
    res.ok = true;
    for (const Branch* b : done) res.branches.push_back(branch_result(*b));
    if (q.distribute && done.front()->distribute_pending) {
      Branch top = *done.front();
      score_distribution(q, top, c, res);
    }
    finalize_result(res, c);
    return res;
  }

  void score_distribution(const QueryProgram& q, Branch& b, Ctx& c, QueryResult& res) {
    EvalContext ctx = eval_ctx(b, c);
    const Value support = eval_value(q.distribute->support, ctx);
    if (!support.is_list() || support.as_list().empty())
      throw RuntimeError("distribute support must be a non-empty list");
    std::vector<std::string> values;
    for (const auto& v : support.as_list()) {
      if (!v.is_string()) throw RuntimeError("distribute support values must be strings");
      values.push_back(v.as_string());
    }
    std::vector<double> logprobs;
    for (const auto& v : values) {
      const std::vector<TokenId> cont = vocab_.tokenize(v);
      if (cont.empty()) throw RuntimeError("distribute support value \"" + v + "\" is empty");
      const std::size_t call = c.stats.start_call(b.trace.token_ids.size());
      const std::uint64_t before = model_->query_count();
      logprobs.push_back(sequence_logprob(*model_, b.trace.token_ids, cont));
      c.stats.model_queries += model_->query_count() - before;
      c.stats.count_generated(call, cont.size());
    }
    // renormalize the sequence probabilities over the support
    double mx = *std::max_element(logprobs.begin(), logprobs.end());
    double z = 0.0;
    for (double lp : logprobs) z += std::exp(lp - mx);
    std::vector<std::pair<std::string, double>> dist;
    for (std::size_t i = 0; i < values.size(); ++i)
      dist.emplace_back(values[i], std::exp(logprobs[i] - mx) / z);
    res.distribution = std::move(dist);
  }

  // ---- chunkwise baseline ----

  void chunkwise_fill_hole(Branch& b, Ctx& c, int chunk_size, const QueryProgram& q,
                           const RunOptions& opts) {
    const double tau = temperature(q);
    const int maxlen = max_length(q, opts);
    std::optional<Rng> rng;
    if (q.decoder.kind == DecoderKind::Sample) rng = Rng::substream(opts.seed, 0);
    while (true) {
      // one generate() call: prompt is re-processed every time
      const std::size_t call = c.stats.start_call(model_context(b).size());
      bool saw_eos = false;
      for (int k = 0; k < chunk_size; ++k) {
        const ScoreVector z = query_model(b, c);
        const ProbVector p = softmax_temp(z, tau);
        TokenMask none(vocab_.size(), false);
        const auto pick = q.decoder.kind == DecoderKind::Sample ? pick_sample(p, none, *rng)
                                                                : pick_argmax(p, none);
        const TokenId t = *pick;
        if (t == vocab_.eos_id()) {
          saw_eos = true;
          break;
        }
        b.hole->value += vocab_.entry(t);
        b.hole->tokens.push_back(t);
        c.stats.count_generated(call, 1);
        if (static_cast<int>(b.hole->tokens.size()) >= maxlen) {
          saw_eos = true;
          break;
        }
      }
      // post-hoc parsing: truncate at the earliest stop phrase
      std::size_t best_cut = std::string::npos;
      std::size_t strip = 0;
      for (const auto& sc : b.hole->stops) {
        if (sc.phrase.empty()) continue;
        const std::size_t at = b.hole->value.find(sc.phrase);
        if (at == std::string::npos) continue;
        const std::size_t cut = at + sc.phrase.size();
        if (cut < best_cut) {
          best_cut = cut;
          strip = sc.keep_phrase ? 0 : sc.phrase.size();
        }
      }
      if (best_cut != std::string::npos) {
        b.hole->value.resize(best_cut);
        b.hole->tokens = vocab_.tokenize(b.hole->value);
        commit_hole(b, c, strip);
        return;
      }
      if (saw_eos || b.hole->stops.empty()) {
        // without a stop phrase the API caller takes the chunk as-is
        commit_hole(b, c);
        return;
      }
    }
  }

  const Vocabulary& vocab_;
  std::shared_ptr<Model> model_;
  FunctionRegistry fns_;
};

inline QueryResult Runtime::execute(const QueryProgram& q, const std::map<std::string, Value>& args,
                                    const RunOptions& opts) {
  Ctx c;
  c.q = &q;
  c.opts = &opts;
  c.statements_left = opts.statement_budget;
  c.cache.set_enabled(opts.cache_enabled);
  try {
    switch (q.decoder.kind) {
      case DecoderKind::Argmax:
        return run_argmax(q, args, opts, c);
      case DecoderKind::Sample:
        if (opts.mode == DecodeMode::Naive)
          throw RuntimeError("naive decoding supports argmax queries only");
        return run_sample(q, args, opts, c);
      case DecoderKind::Beam:
        if (opts.mode == DecodeMode::Naive)
          throw RuntimeError("naive decoding does not support beam search");
        return run_beam(q, args, opts, c);
    }
    throw RuntimeError("unknown decoder");
  } catch (const std::exception& e) {
    QueryResult res;
    res.ok = false;
    res.error = e.what();
    finalize_result(res, c);
    return res;
  }
}

inline std::vector<BranchResult> Runtime::enumerate_executions(
    const QueryProgram& q, const std::map<std::string, Value>& args, std::size_t limit,
    const RunOptions& opts) {
  Ctx c;
  c.q = &q;
  c.opts = &opts;
  c.statements_left = opts.statement_budget * 10;
  c.cache.set_enabled(opts.cache_enabled);

  std::vector<Branch> frontier;
  std::vector<Branch> done;
  {
    Branch root = make_root(q, args, c);
    const Advance a = advance(root, c);
    if (a == Advance::Done) done.push_back(std::move(root));
    else if (a == Advance::NeedHole) frontier.push_back(std::move(root));
  }
  while (!frontier.empty()) {
    if (frontier.size() + done.size() > limit)
      throw RuntimeError("enumeration limit exceeded: reachable space too large");
    std::vector<Branch> next;
    for (Branch& b : frontier) {
      StepChoice sc = prepare_step(b, c, true);
      if (sc.mask_empty) continue;  // dead end: drop this execution
      for (std::size_t ti = 0; ti < sc.probs.size(); ++ti) {
        if (sc.probs[ti] <= 0.0) continue;
        const TokenId t = static_cast<TokenId>(ti);
        Branch nb = b;
        nb.logprob += std::log(sc.probs[ti]);
        if (t == vocab_.eos_id()) {
          if (!accept_completion(nb, c)) continue;
          commit_hole(nb, c);
        } else {
          nb.hole->value += vocab_.entry(t);
          nb.hole->tokens.push_back(t);
          nb.scope.update_hole(nb.hole->var, nb.hole->value);
          if (const auto stop = triggered_stop(nb)) {
            if (!accept_completion(nb, c)) continue;
            commit_hole(nb, c, stop->keep_phrase ? 0 : stop->phrase.size());
          } else if (static_cast<int>(nb.hole->tokens.size()) >= max_length(q, opts)) {
            continue;
          } else {
            next.push_back(std::move(nb));
            continue;
          }
        }
        const Advance a = advance(nb, c);
        if (a == Advance::Done) done.push_back(std::move(nb));
        else if (a == Advance::NeedHole) next.push_back(std::move(nb));
      }
    }
    frontier = std::move(next);
  }
  std::vector<BranchResult> out;
  for (const auto& b : done) out.push_back(branch_result(b));
  std::stable_sort(out.begin(), out.end(), [](const BranchResult& x, const BranchResult& y) {
    if (x.logprob != y.logprob) return x.logprob > y.logprob;
    return x.text < y.text;
  });
  return out;
}

inline QueryResult Runtime::execute_chunkwise(const QueryProgram& q,
                                              const std::map<std::string, Value>& args,
                                              int chunk_size, const RunOptions& opts) {
  if (chunk_size < 1) throw RuntimeError("chunk size must be >= 1");
  Ctx c;
  c.q = &q;
  c.opts = &opts;
  c.statements_left = opts.statement_budget;
  c.cache.set_enabled(opts.cache_enabled);
  c.final_where_check = false;
  QueryResult res;
  try {
    Branch b = make_root(q, args, c);
    while (true) {
      const Advance a = advance(b, c);
      if (a == Advance::Done) break;
      if (a == Advance::Failed) {
        res.ok = false;
        res.error = b.failure;
        res.branches.push_back(branch_result(b));
        finalize_result(res, c);
        return res;
      }
      chunkwise_fill_hole(b, c, chunk_size, q, opts);
    }
    res.ok = true;
    res.branches.push_back(branch_result(b));
    if (q.distribute && b.distribute_pending) score_distribution(q, b, c, res);
    finalize_result(res, c);
    return res;
  } catch (const std::exception& e) {
    res.ok = false;
    res.error = e.what();
    finalize_result(res, c);
    return res;
  }
}

}  // namespace pql
