#include <catch_amalgamated.hpp>

#include <cmath>

#include "pql/model.hpp"
#include "pql/rng.hpp"
#include "pql/vocab.hpp"

using namespace pql;
using Catch::Matchers::WithinAbs;

TEST_CASE("softmax: uniform on equal scores") {
  const ProbVector p = softmax_temp({1.5, 1.5, 1.5, 1.5}, 0.7);
  for (double v : p) CHECK_THAT(v, WithinAbs(0.25, 1e-12));
}

TEST_CASE("softmax: hand-computed two-entry case") {
  // z = [0, ln 3], tau = 1 -> [1/4, 3/4]
  const ProbVector p = softmax_temp({0.0, std::log(3.0)}, 1.0);
  CHECK_THAT(p[0], WithinAbs(0.25, 1e-12));
  CHECK_THAT(p[1], WithinAbs(0.75, 1e-12));
}

TEST_CASE("softmax: large temperature approaches uniform") {
  const ProbVector p = softmax_temp({0.0, 1.0}, 1000.0);
  CHECK_THAT(p[0], WithinAbs(0.5, 1e-3));
  CHECK_THAT(p[1], WithinAbs(0.5, 1e-3));
}

TEST_CASE("softmax: rejects non-positive temperature") {
  CHECK_THROWS_AS(softmax_temp({0.0, 1.0}, 0.0), ModelError);
  CHECK_THROWS_AS(softmax_temp({0.0, 1.0}, -1.0), ModelError);
}

TEST_CASE("softmax: normalization within 1e-9 on random vectors") {
  Rng rng(42);
  for (int it = 0; it < 200; ++it) {
    ScoreVector z(8);
    for (double& v : z) v = (rng.uniform01() - 0.5) * 50.0;
    const ProbVector p = softmax_temp(z, 0.25 + rng.uniform01() * 3.0);
    double sum = 0.0;
    for (double v : p) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK_THAT(sum, WithinAbs(1.0, 1e-9));
  }
}

TEST_CASE("temperature monotonicity: lower tau sharpens the max entry") {
  Rng rng(7);
  for (int it = 0; it < 100; ++it) {
    ScoreVector z(6);
    for (double& v : z) v = rng.uniform01() * 10.0;
    const double t1 = 0.3 + rng.uniform01();
    const double t2 = t1 + 0.5 + rng.uniform01();
    const ProbVector p1 = softmax_temp(z, t1);
    const ProbVector p2 = softmax_temp(z, t2);
    const double m1 = *std::max_element(p1.begin(), p1.end());
    const double m2 = *std::max_element(p2.begin(), p2.end());
    CHECK(m1 >= m2 - 1e-12);
  }
}

TEST_CASE("apply_mask: identity, symmetry, renormalization") {
  TokenMask all(4, true);
  const ProbVector p{0.1, 0.2, 0.3, 0.4};
  CHECK(apply_mask(p, all) == p);

  TokenMask two(4, false);
  two.set(1);
  two.set(3);
  const ProbVector u{0.25, 0.25, 0.25, 0.25};
  const ProbVector r = apply_mask(u, two);
  CHECK_THAT(r[1], WithinAbs(0.5, 1e-12));
  CHECK_THAT(r[3], WithinAbs(0.5, 1e-12));
  CHECK(r[0] == 0.0);
  CHECK(r[2] == 0.0);

  TokenMask ends(4, false);
  ends.set(0);
  ends.set(3);
  const ProbVector r2 = apply_mask(p, ends);
  CHECK_THAT(r2[0], WithinAbs(0.2, 1e-12));
  CHECK_THAT(r2[3], WithinAbs(0.8, 1e-12));
}

TEST_CASE("apply_mask: masked entries are exactly zero; empty mass signals") {
  const ProbVector p{0.5, 0.5, 0.0, 0.0};
  TokenMask dead(4, false);
  dead.set(2);
  dead.set(3);
  CHECK_THROWS_AS(apply_mask(p, dead), NoViableToken);
}

TEST_CASE("table model: default row and explicit rows") {
  TableModel m(4, {0.0, 0.0, 0.0, 0.0});
  CHECK(m.score_next({}) == ScoreVector{0.0, 0.0, 0.0, 0.0});
  m.set_row({0}, {0.0, 9.0, 0.0, 0.0});
  CHECK(m.score_next({0}) == ScoreVector{0.0, 9.0, 0.0, 0.0});
  CHECK(m.score_next({1}) == ScoreVector{0.0, 0.0, 0.0, 0.0});
  CHECK_THROWS_AS(m.score_next({99}), ModelError);
}

TEST_CASE("model query counter counts invocations") {
  TableModel m(2, {0.0, 0.0});
  m.reset_query_count();
  m.score_next({});
  m.score_next({0});
  CHECK(m.query_count() == 2);
}

TEST_CASE("ngram model: deterministic, context-sensitive") {
  NgramModel m(6, 2, 7, 0.05);
  const auto a = m.score_next({1, 2, 3});
  const auto b = m.score_next({1, 2, 3});
  CHECK(a == b);
  // order 2 looks at the last token only
  CHECK(m.score_next({5, 3}) == m.score_next({0, 3}));
  CHECK(m.score_next({3}) != m.score_next({4}));
  for (double v : a) CHECK(std::isfinite(v));
}

TEST_CASE("ngram model: different seeds differ") {
  NgramModel m1(6, 2, 7, 0.05);
  NgramModel m2(6, 2, 8, 0.05);
  CHECK(m1.score_next({1}) != m2.score_next({1}));
}

TEST_CASE("sequence_logprob: uniform model") {
  TableModel m(4, {1.0, 1.0, 1.0, 1.0});
  const double lp = sequence_logprob(m, {}, {0, 1});
  CHECK_THAT(lp, WithinAbs(2.0 * std::log(0.25), 1e-12));
  CHECK_THROWS_AS(sequence_logprob(m, {}, {}), ModelError);
}

TEST_CASE("sequence_logprob: chain rule on random cases") {
  NgramModel m(5, 3, 123, 0.1);
  Rng rng(99);
  for (int it = 0; it < 100; ++it) {
    std::vector<TokenId> prefix, a, b;
    const auto rnd_tok = [&] { return static_cast<TokenId>(rng.next_u64() % 5); };
    for (int i = 0; i < 2; ++i) prefix.push_back(rnd_tok());
    for (int i = 0; i < 1 + static_cast<int>(rng.next_u64() % 3); ++i) a.push_back(rnd_tok());
    for (int i = 0; i < 1 + static_cast<int>(rng.next_u64() % 3); ++i) b.push_back(rnd_tok());
    std::vector<TokenId> ab = a;
    ab.insert(ab.end(), b.begin(), b.end());
    std::vector<TokenId> pa = prefix;
    pa.insert(pa.end(), a.begin(), a.end());
    const double lhs = sequence_logprob(m, prefix, ab);
    const double rhs = sequence_logprob(m, prefix, a) + sequence_logprob(m, pa, b);
    CHECK_THAT(lhs, WithinAbs(rhs, 1e-9));
  }
}

TEST_CASE("model spec files load") {
  const Vocabulary v = load_vocabulary(std::string(PQL_DEMOS_DIR) + "/vocab40.json");
  auto m = load_model(std::string(PQL_DEMOS_DIR) + "/things_model.json", v.size());
  CHECK(m->vocab_size() == 40);
  const Vocabulary hv = load_vocabulary(std::string(PQL_DEMOS_DIR) + "/hawking_vocab.json");
  auto hm = load_model(std::string(PQL_DEMOS_DIR) + "/hawking_model.json", hv.size());
  CHECK(hm->vocab_size() == 20);
  CHECK_THROWS_AS(load_model(std::string(PQL_DEMOS_DIR) + "/hawking_model.json", 40), ModelError);
}

TEST_CASE("rng: substreams are stable and independent of batching") {
  Rng a = Rng::substream(42, 0);
  Rng b = Rng::substream(42, 0);
  CHECK(a.next_u64() == b.next_u64());
  Rng c = Rng::substream(42, 1);
  Rng d = Rng::substream(43, 0);
  Rng e = Rng::substream(42, 0);
  const auto v = e.next_u64();
  CHECK(v != c.next_u64());
  CHECK(v != d.next_u64());
}
