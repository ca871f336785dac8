#pragma once

// Follow semantics: for the expression under evaluation and the current
// partial trace, build a piecewise map from next-token patterns to annotated
// values. Composite expressions compose their operands' maps case-wise with
// the same combiners eval_final uses; the derived decoding mask zeroes exactly
// the tokens whose follow value is FIN(false).

#include <algorithm>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pql/semantics.hpp"
#include "pql/vocab.hpp"

namespace pql {

enum class PatternKind { ExactContinuation, IsEos, TokenSet, Otherwise };

struct TokenPattern {
  PatternKind kind = PatternKind::Otherwise;
  std::string text;  // ExactContinuation
  TokenMask tokens;  // TokenSet

  static TokenPattern exact(std::string s) {
    TokenPattern p;
    p.kind = PatternKind::ExactContinuation;
    p.text = std::move(s);
    return p;
  }
  static TokenPattern eos() {
    TokenPattern p;
    p.kind = PatternKind::IsEos;
    return p;
  }
  static TokenPattern set(TokenMask m) {
    TokenPattern p;
    p.kind = PatternKind::TokenSet;
    p.tokens = std::move(m);
    return p;
  }
  static TokenPattern otherwise() { return TokenPattern{}; }
};

struct FollowCase {
  TokenPattern pattern;
  AValue value;
};

class FollowMap {
 public:
  FollowMap() = default;
  explicit FollowMap(std::vector<FollowCase> cases) : cases_(std::move(cases)) {}

  const std::vector<FollowCase>& cases() const { return cases_; }

  /// First matching case wins; exhaustiveness is a construction invariant.
  const AValue& evaluate(TokenId t, const Vocabulary& v) const {
    for (const auto& c : cases_) {
      if (matches(c.pattern, t, v)) return c.value;
    }
    throw EvalError("follow map is not exhaustive at token " + std::to_string(t));
  }

  /// True if exactly one case matches every token id.
  bool is_partition(const Vocabulary& v) const {
    for (TokenId t = 0; t < static_cast<TokenId>(v.size()); ++t) {
      int n = 0;
      for (std::size_t i = 0; i < cases_.size(); ++i) {
        if (cases_[i].pattern.kind == PatternKind::Otherwise) {
          // matches whatever earlier cases left over
          bool earlier = false;
          for (std::size_t j = 0; j < i; ++j) earlier = earlier || matches(cases_[j].pattern, t, v);
          if (!earlier) ++n;
        } else if (matches(cases_[i].pattern, t, v)) {
          ++n;
        }
        if (n > 1) return false;
      }
      if (n != 1) return false;
    }
    return true;
  }

  static bool matches(const TokenPattern& p, TokenId t, const Vocabulary& v) {
    switch (p.kind) {
      case PatternKind::ExactContinuation:
        return !v.entry(t).empty() && v.entry(t) == p.text;
      case PatternKind::IsEos:
        return t == v.eos_id();
      case PatternKind::TokenSet:
        return p.tokens.test(t);
      case PatternKind::Otherwise:
        return true;
    }
    return false;
  }

  std::string dump(const Vocabulary& v) const {
    std::ostringstream os;
    for (const auto& c : cases_) {
      os << "  case ";
      switch (c.pattern.kind) {
        case PatternKind::ExactContinuation:
          os << "exact \"" << c.pattern.text << "\"";
          break;
        case PatternKind::IsEos:
          os << "eos";
          break;
        case PatternKind::TokenSet: {
          os << "tokens {";
          bool first = true;
          for (TokenId t = 0; t < static_cast<TokenId>(v.size()); ++t) {
            if (!c.pattern.tokens.test(t)) continue;
            if (!first) os << ", ";
            os << "\"" << v.entry(t) << "\"";
            first = false;
          }
          os << "}";
          break;
        }
        case PatternKind::Otherwise:
          os << "otherwise";
          break;
      }
      os << " -> " << c.value.to_display() << "\n";
    }
    return os.str();
  }

 private:
  std::vector<FollowCase> cases_;
};

/// Masked = guaranteed violators only: bit t stays 1 unless every case
/// covering t carries FIN(false). ExactContinuation cases are lowered through
/// the vocabulary prefix scan, which admits every token that can begin a
/// factorization of the continuation (the sound over-approximation).
inline TokenMask derive_mask(const FollowMap& fm, const Vocabulary& v) {
  const std::size_t n = v.size();
  TokenMask allowed(n, false);
  TokenMask matched(n, false);  // pointwise coverage so far, for Otherwise
  for (const auto& c : fm.cases()) {
    TokenMask pointwise(n, false);
    TokenMask lowered(n, false);
    switch (c.pattern.kind) {
      case PatternKind::ExactContinuation: {
        if (auto t = v.find(c.pattern.text)) pointwise.set(*t);
        lowered = v.prefix_feasible_tokens(c.pattern.text);
        break;
      }
      case PatternKind::IsEos:
        pointwise.set(v.eos_id());
        lowered = pointwise;
        break;
      case PatternKind::TokenSet:
        pointwise = c.pattern.tokens;
        lowered = pointwise;
        break;
      case PatternKind::Otherwise:
        for (TokenId t = 0; t < static_cast<TokenId>(n); ++t)
          if (!matched.test(t)) pointwise.set(t);
        lowered = pointwise;
        break;
    }
    if (!c.value.fin_false()) allowed |= lowered;
    matched |= pointwise;
  }
  return allowed;
}

// --- The Follow operator ------------------------------------------------------------

namespace detail {

struct ResolvedCase {
  bool is_exact = false;
  std::string text;   // when is_exact
  TokenMask set;      // pointwise match set (always filled)
  AValue value;
};

inline std::vector<ResolvedCase> resolve(const FollowMap& fm, const Vocabulary& v) {
  const std::size_t n = v.size();
  std::vector<ResolvedCase> out;
  TokenMask matched(n, false);
  for (const auto& c : fm.cases()) {
    ResolvedCase rc;
    rc.value = c.value;
    rc.set = TokenMask(n, false);
    switch (c.pattern.kind) {
      case PatternKind::ExactContinuation:
        rc.is_exact = true;
        rc.text = c.pattern.text;
        if (auto t = v.find(c.pattern.text)) {
          if (!matched.test(*t)) rc.set.set(*t);
        }
        break;
      case PatternKind::IsEos:
        if (!matched.test(v.eos_id())) rc.set.set(v.eos_id());
        break;
      case PatternKind::TokenSet:
        for (TokenId t = 0; t < static_cast<TokenId>(n); ++t)
          if (c.pattern.tokens.test(t) && !matched.test(t)) rc.set.set(t);
        break;
      case PatternKind::Otherwise:
        for (TokenId t = 0; t < static_cast<TokenId>(n); ++t)
          if (!matched.test(t)) rc.set.set(t);
        break;
    }
    matched |= rc.set;
    // keep exact cases even when the vocabulary lacks the exact token: their
    // lowering still widens the mask
    if (rc.is_exact || rc.set.any()) out.push_back(std::move(rc));
  }
  return out;
}

inline FollowMap from_resolved(std::vector<ResolvedCase> cases, const Vocabulary& v) {
  // merge equal-valued token-set cases; the product of two partitions is a
  // partition, so order between disjoint sets is free
  std::vector<FollowCase> out;
  std::vector<std::size_t> set_case_at;  // index into out for merge targets
  for (auto& rc : cases) {
    if (rc.is_exact) {
      out.push_back({TokenPattern::exact(rc.text), rc.value});
      continue;
    }
    bool merged = false;
    for (std::size_t idx : set_case_at) {
      if (out[idx].value == rc.value) {
        out[idx].pattern.tokens |= rc.set;
        merged = true;
        break;
      }
    }
    if (!merged) {
      set_case_at.push_back(out.size());
      out.push_back({TokenPattern::set(rc.set), rc.value});
    }
  }
  // render pure-EOS sets as the eos pattern
  for (auto& c : out) {
    if (c.pattern.kind == PatternKind::TokenSet && c.pattern.tokens.count() == 1 &&
        c.pattern.tokens.test(v.eos_id()))
      c.pattern = TokenPattern::eos();
  }
  return FollowMap(std::move(out));
}

template <typename Combine>
inline FollowMap compose(const FollowMap& A, const FollowMap& B, const Vocabulary& v, Combine&& f) {
  const auto ra = resolve(A, v);
  const auto rb = resolve(B, v);
  std::vector<ResolvedCase> out;
  for (const auto& a : ra) {
    for (const auto& b : rb) {
      ResolvedCase rc;
      rc.set = a.set;
      rc.set &= b.set;
      if (a.is_exact && b.is_exact) {
        if (a.text != b.text) continue;  // incompatible continuations drop
        rc.is_exact = true;
        rc.text = a.text;
      } else if (a.is_exact && b.set.all()) {
        rc.is_exact = true;
        rc.text = a.text;
      } else if (b.is_exact && a.set.all()) {
        rc.is_exact = true;
        rc.text = b.text;
      } else if (!rc.set.any()) {
        continue;
      }
      rc.value = f(a.value, b.value);
      out.push_back(std::move(rc));
    }
  }
  return from_resolved(std::move(out), v);
}

template <typename Apply>
inline FollowMap map_values(const FollowMap& A, const Vocabulary& v, Apply&& f) {
  auto ra = resolve(A, v);
  std::vector<ResolvedCase> out;
  for (auto& a : ra) {
    ResolvedCase rc = a;
    rc.value = f(a.value);
    out.push_back(std::move(rc));
  }
  return from_resolved(std::move(out), v);
}

/// N-ary case-wise composition preserving each operand's annotated value.
template <typename Combine>
inline FollowMap compose_n(const std::vector<FollowMap>& maps, const Vocabulary& v, Combine&& f) {
  struct Partial {
    bool is_exact = false;
    std::string text;
    TokenMask set;
    std::vector<AValue> values;
  };
  Partial seed;
  seed.set = TokenMask(v.size(), true);
  std::vector<Partial> acc{seed};
  for (const auto& m : maps) {
    const auto rcs = resolve(m, v);
    std::vector<Partial> next;
    for (const auto& p : acc) {
      for (const auto& rc : rcs) {
        Partial q;
        q.values = p.values;
        q.values.push_back(rc.value);
        q.set = p.set;
        q.set &= rc.set;
        if (p.is_exact && rc.is_exact) {
          if (p.text != rc.text) continue;
          q.is_exact = true;
          q.text = p.text;
        } else if (p.is_exact && rc.set.all()) {
          q.is_exact = true;
          q.text = p.text;
        } else if (rc.is_exact && p.set.all()) {
          q.is_exact = true;
          q.text = rc.text;
        } else if (!q.set.any()) {
          continue;
        }
        next.push_back(std::move(q));
      }
    }
    acc = std::move(next);
  }
  std::vector<ResolvedCase> out;
  for (auto& p : acc) {
    ResolvedCase rc;
    rc.is_exact = p.is_exact;
    rc.text = p.text;
    rc.set = p.set;
    rc.value = f(p.values);
    out.push_back(std::move(rc));
  }
  return from_resolved(std::move(out), v);
}

}  // namespace detail

/// Follow context: evaluation context plus the open hole. The trace position
/// must sit on a subtoken boundary, which the decode loop guarantees.
struct FollowContext {
  const EvalContext* eval = nullptr;
  std::string current_var;
  std::string current_value;
};

inline FollowMap follow(const ExprPtr& e, const FollowContext& fctx);

namespace detail {

inline FollowMap constant_map(AValue v) {
  return FollowMap({{TokenPattern::otherwise(), std::move(v)}});
}

/// Base map of the in-progress hole: fin(v) at EOS, inc(v + token) elsewhere.
inline FollowMap current_var_map(const FollowContext& fctx) {
  const Vocabulary& voc = *fctx.eval->vocab;
  std::vector<FollowCase> cases;
  cases.push_back({TokenPattern::eos(), fin(Value(fctx.current_value))});
  for (TokenId t = 0; t < static_cast<TokenId>(voc.size()); ++t) {
    if (t == voc.eos_id()) continue;
    TokenMask m(voc.size(), false);
    m.set(t);
    cases.push_back({TokenPattern::set(std::move(m)), inc(Value(fctx.current_value + voc.entry(t)))});
  }
  return FollowMap(std::move(cases));
}

/// Three-way membership map for `v in candidates` / `v == candidate` on the
/// open hole: exact completions fin(true), viable prefixes var(false),
/// everything else fin(false).
inline FollowMap exact_match_map(const FollowContext& fctx, const std::vector<std::string>& candidates) {
  const Vocabulary& voc = *fctx.eval->vocab;
  const std::string& v = fctx.current_value;

  bool complete_now = false;
  std::vector<std::string> remainders;
  for (const auto& e : candidates) {
    if (e == v) {
      complete_now = true;
      continue;
    }
    if (builtins::startswith(e, v)) {
      std::string rem = e.substr(v.size());
      if (std::find(remainders.begin(), remainders.end(), rem) == remainders.end())
        remainders.push_back(std::move(rem));
    }
  }

  std::vector<FollowCase> cases;
  cases.push_back({TokenPattern::eos(), complete_now ? fin(true) : fin(false)});

  TokenMask exact_tokens(voc.size(), false);
  for (const auto& rem : remainders) {
    cases.push_back({TokenPattern::exact(rem), fin(true)});
    if (auto t = voc.find(rem)) exact_tokens.set(*t);
  }

  TokenMask prefix_tokens(voc.size(), false);
  for (TokenId t = 0; t < static_cast<TokenId>(voc.size()); ++t) {
    if (t == voc.eos_id() || exact_tokens.test(t)) continue;
    const std::string& entry = voc.entry(t);
    for (const auto& rem : remainders) {
      if (entry.size() < rem.size() && builtins::startswith(rem, entry)) {
        prefix_tokens.set(t);
        break;
      }
    }
  }
  if (prefix_tokens.any()) cases.push_back({TokenPattern::set(std::move(prefix_tokens)), var_(false)});
  cases.push_back({TokenPattern::otherwise(), fin(false)});
  return FollowMap(std::move(cases));
}

inline bool is_current_var_ref(const ExprPtr& e, const FollowContext& fctx) {
  return e->kind == ExprKind::VarRef && e->name == fctx.current_var;
}

inline FollowMap follow_compare(const ExprPtr& e, const FollowContext& fctx) {
  const ExprPtr& lhs = e->children[0];
  const ExprPtr& rhs = e->children[1];
  const Vocabulary& voc = *fctx.eval->vocab;

  // `v in [..]` over the open hole with a fixed candidate list
  if (e->cmp == CmpOp::In && is_current_var_ref(lhs, fctx)) {
    const AValue r = eval_final(rhs, *fctx.eval);
    if (r.ann == Ann::Fin && r.value.is_list()) {
      std::vector<std::string> candidates;
      bool all_strings = true;
      for (const auto& item : r.value.as_list()) {
        if (!item.is_string()) { all_strings = false; break; }
        candidates.push_back(item.as_string());
      }
      if (all_strings) return exact_match_map(fctx, candidates);
    }
  }
  // `v == "a"` / `"a" == v` over the open hole
  if (e->cmp == CmpOp::Eq) {
    const bool lcur = is_current_var_ref(lhs, fctx);
    const bool rcur = is_current_var_ref(rhs, fctx);
    if (lcur != rcur) {
      const AValue other = eval_final(lcur ? rhs : lhs, *fctx.eval);
      if (other.ann == Ann::Fin && other.value.is_string())
        return exact_match_map(fctx, {other.value.as_string()});
    }
  }
  return compose(follow(lhs, fctx), follow(rhs, fctx), voc,
                 [&](const AValue& a, const AValue& b) { return combine_compare(e->cmp, a, b); });
}

inline FollowMap follow_call(const ExprPtr& e, const FollowContext& fctx) {
  const Vocabulary& voc = *fctx.eval->vocab;
  // token-count row of the open hole: fin(k) at EOS, inc(k+1) elsewhere
  if (e->name == "len_tokens" && e->children.size() == 1 &&
      is_current_var_ref(e->children[0], fctx) && fctx.eval->current_var_tokens) {
    const std::int64_t k = *fctx.eval->current_var_tokens;
    std::vector<FollowCase> cases;
    cases.push_back({TokenPattern::eos(), fin(Value(k))});
    cases.push_back({TokenPattern::otherwise(), inc(Value(k + 1))});
    return FollowMap(std::move(cases));
  }
  if (e->children.empty()) return constant_map(apply_call(*fctx.eval, e->name, {}));
  std::vector<FollowMap> operands;
  for (const auto& c : e->children) operands.push_back(follow(c, fctx));
  return compose_n(operands, voc, [&](const std::vector<AValue>& args) {
    return apply_call(*fctx.eval, e->name, args);
  });
}

}  // namespace detail

/// Recursive construction of the expression's FollowMap from per-operator
/// base cases; composite nodes compose sub-maps case-wise.
inline FollowMap follow(const ExprPtr& e, const FollowContext& fctx) {
  const Vocabulary& voc = *fctx.eval->vocab;
  switch (e->kind) {
    case ExprKind::Literal:
      return detail::constant_map(fin(e->literal));
    case ExprKind::List: {
      if (e->children.empty()) return detail::constant_map(fin(Value(ValueList{})));
      std::vector<FollowMap> operands;
      for (const auto& c : e->children) operands.push_back(follow(c, fctx));
      return detail::compose_n(operands, voc, [](const std::vector<AValue>& items) {
        ValueList values;
        bool all_fin = true;
        for (const auto& a : items) {
          if (a.value.is_absent()) return absent();
          values.push_back(a.value);
          all_fin = all_fin && a.ann == Ann::Fin;
        }
        return AValue{Value(std::move(values)), all_fin ? Ann::Fin : Ann::Var};
      });
    }
    case ExprKind::VarRef: {
      if (detail::is_current_var_ref(e, fctx)) return detail::current_var_map(fctx);
      return detail::constant_map(eval_varref(e->name, *fctx.eval));
    }
    case ExprKind::Not:
      return detail::map_values(follow(e->children[0], fctx), voc,
                                [](const AValue& a) { return combine_not(a); });
    case ExprKind::And:
      return detail::compose(follow(e->children[0], fctx), follow(e->children[1], fctx), voc,
                             [](const AValue& a, const AValue& b) { return combine_and(a, b); });
    case ExprKind::Or:
      return detail::compose(follow(e->children[0], fctx), follow(e->children[1], fctx), voc,
                             [](const AValue& a, const AValue& b) { return combine_or(a, b); });
    case ExprKind::Compare:
      return detail::follow_compare(e, fctx);
    case ExprKind::Call:
      return detail::follow_call(e, fctx);
  }
  throw EvalError("malformed expression");
}

}  // namespace pql
