#pragma once

// The language-model abstraction: a deterministic map from a token context to
// raw logits over the vocabulary, plus the softmax / temperature / masked
// renormalization arithmetic. Two reference models back all testing: a table
// model (exact control) and a seeded hash n-gram model (varied but
// deterministic).

#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pql/rng.hpp"
#include "pql/vocab.hpp"

namespace pql {

class ModelError : public std::runtime_error {
 public:
  explicit ModelError(const std::string& msg) : std::runtime_error(msg) {}
};

using ScoreVector = std::vector<double>;  // raw logits, |V| entries
using ProbVector = std::vector<double>;   // normalized, |V| entries

/// softmax(z/tau) with max-subtraction for stability.
inline ProbVector softmax_temp(const ScoreVector& z, double tau) {
  if (!(tau > 0.0)) throw ModelError("temperature must be positive");
  if (z.empty()) throw ModelError("empty score vector");
  double mx = z[0] / tau;
  for (double v : z) mx = std::max(mx, v / tau);
  ProbVector p(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] / tau - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

/// m ⊙ p, renormalized over the survivors. Throws NoViableToken when the
/// surviving mass is zero; the runtime maps that to decode termination.
class NoViableToken : public std::runtime_error {
 public:
  NoViableToken() : std::runtime_error("no viable token under mask") {}
};

inline ProbVector apply_mask(const ProbVector& p, const TokenMask& m) {
  if (p.size() != m.size()) throw ModelError("mask/probability size mismatch");
  ProbVector out(p.size(), 0.0);
  double mass = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (m.test(static_cast<TokenId>(i))) mass += p[i];
  }
  if (!(mass > 0.0)) throw NoViableToken();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (m.test(static_cast<TokenId>(i))) out[i] = p[i] / mass;
  }
  return out;
}

/// f: V* -> R^|V|. Implementations must be deterministic; every score_next
/// call counts one model query.
class Model {
 public:
  virtual ~Model() = default;

  ScoreVector score_next(const std::vector<TokenId>& context) const {
    for (TokenId t : context) {
      if (t < 0 || static_cast<std::size_t>(t) >= vocab_size())
        throw ModelError("context token out of range: " + std::to_string(t));
    }
    ++query_count_;
    return score_impl(context);
  }

  virtual std::size_t vocab_size() const = 0;

  std::uint64_t query_count() const { return query_count_.load(); }
  void reset_query_count() const { query_count_.store(0); }

 protected:
  virtual ScoreVector score_impl(const std::vector<TokenId>& context) const = 0;

 private:
  // Lockstep rounds may batch calls from several branches; keep the counter
  // safe to bump from wherever the round is driven.
  mutable std::atomic<std::uint64_t> query_count_{0};
};

/// Explicit context -> scores table with a default row.
class TableModel : public Model {
 public:
  TableModel(std::size_t vocab_size, ScoreVector default_row)
      : n_(vocab_size), default_row_(std::move(default_row)) {
    if (default_row_.size() != n_) throw ModelError("default row size mismatch");
  }

  void set_row(std::vector<TokenId> context, ScoreVector scores) {
    if (scores.size() != n_) throw ModelError("table row size mismatch");
    rows_[std::move(context)] = std::move(scores);
  }

  std::size_t vocab_size() const override { return n_; }

 protected:
  ScoreVector score_impl(const std::vector<TokenId>& context) const override {
    auto it = rows_.find(context);
    return it == rows_.end() ? default_row_ : it->second;
  }

 private:
  std::size_t n_;
  ScoreVector default_row_;
  std::map<std::vector<TokenId>, ScoreVector> rows_;
};

/// Hash n-gram model: logits derived from (seed, last n-1 context tokens,
/// candidate). smoothing blends toward uniform; logit = ln(smoothing + h) with
/// h uniform in [0,1) from splitmix64.
class NgramModel : public Model {
 public:
  NgramModel(std::size_t vocab_size, int order, std::uint64_t seed, double smoothing)
      : n_(vocab_size), order_(order), seed_(seed), smoothing_(smoothing) {
    if (order_ < 1) throw ModelError("ngram order must be >= 1");
    if (!(smoothing_ > 0.0)) throw ModelError("smoothing must be positive");
  }

  std::size_t vocab_size() const override { return n_; }

 protected:
  ScoreVector score_impl(const std::vector<TokenId>& context) const override {
    std::uint64_t h = seed_ ^ 0x6a09e667f3bcc908ULL;
    const std::size_t tail = std::min<std::size_t>(context.size(), static_cast<std::size_t>(order_ - 1));
    for (std::size_t i = context.size() - tail; i < context.size(); ++i) {
      h ^= static_cast<std::uint64_t>(context[i]) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    }
    ScoreVector z(n_);
    for (std::size_t t = 0; t < n_; ++t) {
      std::uint64_t s = h ^ (0x2545f4914f6cdd1dULL * (t + 1));
      const double u = static_cast<double>(splitmix64(s) >> 11) * 0x1.0p-53;
      z[t] = std::log(smoothing_ + u);
    }
    return z;
  }

 private:
  std::size_t n_;
  int order_;
  std::uint64_t seed_;
  double smoothing_;
};

/// Sum of log softmax(z) at the realized continuation tokens (tau fixed to 1).
inline double sequence_logprob(const Model& model, std::vector<TokenId> prefix,
                               const std::vector<TokenId>& continuation) {
  if (continuation.empty()) throw ModelError("empty continuation");
  double lp = 0.0;
  for (TokenId t : continuation) {
    const ProbVector p = softmax_temp(model.score_next(prefix), 1.0);
    const double pt = p.at(static_cast<std::size_t>(t));
    lp += std::log(pt);
    prefix.push_back(t);
  }
  return lp;
}

// ---------------------------------------------------------------------------
// Model spec files (JSON, versioned):
//   {"version":1,"kind":"ngram","order":2,"seed":7,"smoothing":0.05,
//    "vocab_size":40}
//   {"version":1,"kind":"table","vocab_size":4,"default":[0,0,0,0],
//    "rows":[{"context":[0],"scores":[0,1,0,0]}]}

inline std::shared_ptr<Model> load_model_json(const nlohmann::json& doc, std::size_t vocab_size) {
  if (!doc.contains("kind")) throw ModelError("model spec needs \"kind\"");
  const std::string kind = doc["kind"].get<std::string>();
  if (doc.contains("vocab_size") && doc["vocab_size"].get<std::size_t>() != vocab_size)
    throw ModelError("model spec vocab_size does not match the loaded vocabulary");
  if (kind == "ngram") {
    const int order = doc.value("order", 2);
    const std::uint64_t seed = doc.value("seed", std::uint64_t{0});
    const double smoothing = doc.value("smoothing", 0.05);
    return std::make_shared<NgramModel>(vocab_size, order, seed, smoothing);
  }
  if (kind == "table") {
    if (!doc.contains("default")) throw ModelError("table model needs a \"default\" row");
    auto table = std::make_shared<TableModel>(vocab_size, doc["default"].get<ScoreVector>());
    if (doc.contains("rows")) {
      for (const auto& row : doc["rows"]) {
        table->set_row(row["context"].get<std::vector<TokenId>>(), row["scores"].get<ScoreVector>());
      }
    }
    return table;
  }
  throw ModelError("unknown model kind: " + kind);
}

inline std::shared_ptr<Model> load_model(const std::string& path, std::size_t vocab_size) {
  std::ifstream in(path);
  if (!in) throw ModelError("cannot open model spec: " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ModelError("model spec " + path + ": " + e.what());
  }
  return load_model_json(doc, vocab_size);
}

}  // namespace pql
