// Acceptance suite: one test case per criterion, each printing a pass/fail
// line. Tolerances and thresholds are pinned in code.

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "pql/pql.hpp"
#include "support/corpus.hpp"
#include "support/models.hpp"

using namespace pql;
using namespace pql::testing;
using Catch::Matchers::WithinAbs;

namespace {

struct Criterion {
  int id;
  bool passed = false;
  std::string detail;
  ~Criterion() {
    std::printf("[criterion %d] %s%s%s\n", id, passed ? "PASS" : "FAIL",
                detail.empty() ? "" : " - ", detail.c_str());
    std::fflush(stdout);
  }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

QueryProgram parse_checked(const std::string& src) {
  QueryProgram q = parse_query(src);
  ValidateOptions vopts;
  vopts.registered_fns = {"evenlen"};
  const auto diags = validate_program(q, vopts);
  for (const auto& d : diags) UNSCOPED_INFO(d.message);
  REQUIRE(diags.empty());
  return q;
}

struct CorpusRun {
  Vocabulary vocab;
  std::shared_ptr<Model> model;
  Runtime runtime;
  QueryProgram program;

  explicit CorpusRun(const CorpusEntry& e)
      : vocab(corpus_vocab(e)),
        model(corpus_model(e, vocab.size())),
        runtime(vocab, model),
        program(parse_checked(e.query)) {
    register_corpus_functions(runtime.functions());
  }
};

}  // namespace

TEST_CASE("criterion 1: Brzozowski soundness over the corpus") {
  Criterion crit{1};
  std::size_t total_steps = 0;
  std::size_t total_violations = 0;
  REQUIRE(corpus().size() >= 20);
  for (const auto& entry : corpus()) {
    CorpusRun run(entry);
    OracleObserver oracle(run.program.where, run.vocab, run.runtime.functions(), 4);
    RunOptions opts;
    opts.observer = oracle.hook();
    const auto res = run.runtime.execute(run.program, {}, opts);
    INFO(entry.name << ": " << res.error);
    REQUIRE(res.ok);
    const auto& report = oracle.report();
    total_steps += report.steps.size();
    total_violations += report.total_violations;
    for (const auto& s : report.steps) {
      INFO(entry.name << " step " << s.step << " var " << s.var << " value \"" << s.value_so_far
                      << "\"");
      REQUIRE(s.violations.empty());
      REQUIRE(s.admissible_size <= s.mask_size);
    }
  }
  REQUIRE(total_violations == 0);
  REQUIRE(total_steps > 50);
  crit.passed = true;
  crit.detail = "T_Q subset of M at all " + std::to_string(total_steps) + " decode steps, depth 4";
}

TEST_CASE("criterion 2: pointwise soundness of follow against final") {
  Criterion crit{2};
  std::size_t tokens_checked = 0;
  std::size_t violations = 0;
  for (const auto& entry : corpus()) {
    CorpusRun run(entry);
    PointwiseSoundnessObserver pointwise(run.program.where, run.vocab, run.runtime.functions());
    RunOptions opts;
    opts.observer = pointwise.hook();
    const auto res = run.runtime.execute(run.program, {}, opts);
    REQUIRE(res.ok);
    tokens_checked += pointwise.tokens_checked();
    violations += pointwise.violations().size();
    for (const auto& v : pointwise.violations()) {
      FAIL_CHECK(entry.name << ": follow=fin(false) but final disagrees at step " << v.step
                            << " token " << v.token << " after \"" << v.value_so_far << "\"");
    }
  }
  REQUIRE(violations == 0);
  REQUIRE(tokens_checked > 1000);
  crit.passed = true;
  crit.detail = "0 violations over " + std::to_string(tokens_checked) + " (step, token) pairs";
}

TEST_CASE("criterion 3: masked and naive decoding agree; masking saves queries") {
  Criterion crit{3};
  std::size_t compared = 0;
  for (const auto& entry : corpus()) {
    CorpusRun run(entry);
    const auto masked = run.runtime.execute(run.program, {});
    RunOptions nopts;
    nopts.mode = DecodeMode::Naive;
    nopts.naive_expansion_budget = 200000;
    const auto naive = run.runtime.execute(run.program, {}, nopts);
    INFO(entry.name << " masked: " << masked.error << " naive: " << naive.error);
    REQUIRE(masked.ok);
    REQUIRE(naive.ok);
    ++compared;
    INFO(entry.name << ": masked " << masked.stats.model_queries << " queries, naive "
                    << naive.stats.model_queries);
    REQUIRE(masked.branches[0].text == naive.branches[0].text);
    for (const auto& [k, v] : masked.branches[0].variables)
      REQUIRE(naive.branches[0].variables.at(k) == v);
    REQUIRE(masked.stats.model_queries <= naive.stats.model_queries);
    if (entry.exact_constraint)
      REQUIRE(masked.stats.model_queries < naive.stats.model_queries);
  }
  REQUIRE(compared == corpus().size());
  crit.passed = true;
  crit.detail = "identical traces on " + std::to_string(compared) +
                " queries; masked queries <= naive everywhere, strict on exact constraints";
}

TEST_CASE("criterion 4: scripted beam search equals full enumeration") {
  Criterion crit{4};
  struct Fixture {
    std::string name;
    std::vector<std::string> tokens;
    std::string body;  // everything after "beam(n=N)"
    std::uint64_t seed;
  };
  const std::vector<Fixture> fixtures = {
      {"single_hole",
       {"a", "b", "c", ".", " ", "ab", "<eos>"},
       "\n  \"c [A].[B]\"\nfrom \"m\"\nwhere A in [\"a\", \"ab\", \"b\"] and B in [\"ab\", \"b\", \"c\"]\n",
       2},
      {"two_values",
       {"a", "b", "c", ".", " ", ":", "<eos>"},
       "\n  \"[A]: [B]\"\nfrom \"m\"\nwhere A in [\"ab\", \"ba\", \"cab\"] and B in [\"a.\", \"b.\", \"c.\"]\n",
       3},
      {"control_flow",
       {"a", "b", "c", ".", " ", ":", "<eos>"},
       "\n  \"[MODE]\"\n  if MODE == \"b\":\n    \" b: [X]\"\n  else:\n    \" c: [X]\"\nfrom \"m\"\n"
       "where MODE in [\"b\", \"c\"] and X in [\"a.\", \"cb\"]\n",
       2},
  };
  std::size_t compared = 0;
  for (const auto& f : fixtures) {
    Vocabulary vocab(f.tokens, "<eos>");
    auto model = std::make_shared<NgramModel>(vocab.size(), 2, f.seed, 0.1);
    Runtime rt(vocab, model);
    const auto all = rt.enumerate_executions(parse_checked("beam(n=1)" + f.body), {}, 10000);
    REQUIRE(all.size() >= 4);
    for (int n = 1; n <= 3; ++n) {
      const auto res = rt.execute(parse_checked("beam(n=" + std::to_string(n) + ")" + f.body), {});
      INFO(f.name << " n=" << n << ": " << res.error);
      REQUIRE(res.ok);
      const std::size_t expect = std::min<std::size_t>(all.size(), static_cast<std::size_t>(n));
      REQUIRE(res.branches.size() == expect);
      for (std::size_t i = 0; i < expect; ++i) {
        INFO(f.name << " n=" << n << " rank " << i);
        REQUIRE(res.branches[i].text == all[i].text);
        REQUIRE_THAT(res.branches[i].logprob, WithinAbs(all[i].logprob, 1e-9));
        ++compared;
      }
    }
  }
  crit.passed = true;
  crit.detail = "top-n equality (set and order) for n in {1,2,3}; " + std::to_string(compared) +
                " ranked branches matched";
}

TEST_CASE("criterion 5: distribution normalization and the chain rule") {
  Criterion crit{5};
  // single support value scores exactly 1.0
  {
    Vocabulary v({"a", "b", "c", ".", " ", "ab", "<eos>"}, "<eos>");
    auto model = std::make_shared<NgramModel>(v.size(), 2, 9, 0.3);
    Runtime rt(v, model);
    const auto q = parse_checked("argmax \"c[D]\" from \"m\" distribute D over [\"ab\"]\n");
    const auto res = rt.execute(q, {});
    REQUIRE(res.ok);
    REQUIRE(res.distribution);
    REQUIRE(res.distribution->size() == 1);
    REQUIRE((*res.distribution)[0].second == 1.0);
  }
  // every distribute result sums to 1 within 1e-9
  for (const std::uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL}) {
    Vocabulary v({"a", "b", "c", ".", " ", "ab", "<eos>"}, "<eos>");
    auto model = std::make_shared<NgramModel>(v.size(), 2, seed, 0.2);
    Runtime rt(v, model);
    const auto q = parse_checked(
        "argmax \"c [A] [D]\" from \"m\" where A in [\"a\", \"b\"] "
        "distribute D over [\"ab\", \"ba c\", \"c\", \"a\"]\n");
    const auto res = rt.execute(q, {});
    REQUIRE(res.ok);
    REQUIRE(res.distribution);
    double sum = 0.0;
    for (const auto& [value, p] : *res.distribution) {
      CHECK(p > 0.0);
      sum += p;
    }
    REQUIRE_THAT(sum, WithinAbs(1.0, 1e-9));
  }
  // chain-rule identity of sequence_logprob on 100 random cases
  NgramModel m(6, 3, 123, 0.1);
  Rng rng(99);
  for (int it = 0; it < 100; ++it) {
    std::vector<TokenId> prefix, a, b;
    const auto rnd = [&] { return static_cast<TokenId>(rng.next_u64() % 6); };
    for (int i = 0; i < 2; ++i) prefix.push_back(rnd());
    for (int i = 0; i < 1 + static_cast<int>(rng.next_u64() % 3); ++i) a.push_back(rnd());
    for (int i = 0; i < 1 + static_cast<int>(rng.next_u64() % 3); ++i) b.push_back(rnd());
    std::vector<TokenId> ab = a;
    ab.insert(ab.end(), b.begin(), b.end());
    std::vector<TokenId> pa = prefix;
    pa.insert(pa.end(), a.begin(), a.end());
    REQUIRE_THAT(sequence_logprob(m, prefix, ab),
                 WithinAbs(sequence_logprob(m, prefix, a) + sequence_logprob(m, pa, b), 1e-9));
  }
  crit.passed = true;
  crit.detail = "sums within 1e-9, singleton exactly 1.0, chain rule on 100 cases";
}

TEST_CASE("criterion 6: cost direction on the scripted interaction query") {
  Criterion crit{6};
  const Vocabulary v = load_vocabulary(std::string(PQL_DEMOS_DIR) + "/vocab40.json");
  auto model = load_model(std::string(PQL_DEMOS_DIR) + "/react_model.json", v.size());
  Runtime rt(v, model);
  const auto q = parse_checked(read_file(std::string(PQL_DEMOS_DIR) + "/react.pql"));
  const std::map<std::string, Value> args{{"QUESTION", Value("what should i pack?")}};

  const auto eager = rt.execute(q, args);
  REQUIRE(eager.ok);
  REQUIRE(eager.stats.decoder_calls == 1);

  struct SweepPoint {
    int chunk;
    std::uint64_t calls, queries, billable;
  };
  std::vector<SweepPoint> sweep;
  for (const int chunk : {20, 30, 40, 50}) {
    const auto base = rt.execute_chunkwise(q, args, chunk);
    REQUIRE(base.ok);
    REQUIRE(base.stats.decoder_calls >= 5);
    sweep.push_back({chunk, base.stats.decoder_calls, base.stats.model_queries,
                     base.stats.billable_tokens});
  }
  // billable reduction of at least 30% against the best chunk size
  std::uint64_t best_billable = sweep[0].billable;
  for (const auto& p : sweep) best_billable = std::min(best_billable, p.billable);
  const double reduction =
      1.0 - static_cast<double>(eager.stats.billable_tokens) / static_cast<double>(best_billable);
  INFO("eager billable " << eager.stats.billable_tokens << " vs best baseline " << best_billable);
  REQUIRE(reduction >= 0.30);
  // model queries do not decrease with chunk size beyond the optimum
  std::size_t opt = 0;
  for (std::size_t i = 1; i < sweep.size(); ++i)
    if (sweep[i].queries < sweep[opt].queries) opt = i;
  for (std::size_t i = opt; i + 1 < sweep.size(); ++i) {
    INFO("chunk " << sweep[i].chunk << " -> " << sweep[i + 1].chunk);
    REQUIRE(sweep[i].queries <= sweep[i + 1].queries);
  }
  crit.passed = true;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "decoder calls 1 vs >=5; billable cut %.0f%% vs best chunk; query sweep shape holds",
                reduction * 100.0);
  crit.detail = buf;
}

TEST_CASE("criterion 7: worked-example goldens") {
  Criterion crit{7};
  // (a) the five-row execution table, reproduced statement for statement
  {
    const Vocabulary v = load_vocabulary(std::string(PQL_DEMOS_DIR) + "/vocab40.json");
    const std::string line1 = "a list of things not to forget when travelling:\n";
    const std::string target =
        line1 + "- sun screen\n- beach towel\nthe most important of these is sun screen.";
    auto model = std::make_shared<TextScriptModel>(v, target);
    Runtime rt(v, model);
    const auto q = parse_checked(read_file(std::string(PQL_DEMOS_DIR) + "/things.pql"));
    RunOptions opts;
    ExecLog log;
    opts.exec_log = &log;
    const auto res = rt.execute(q, {}, opts);
    REQUIRE(res.ok);
    REQUIRE(log.size() == 6);  // init, prompt, assign, two iterations, final prompt

    REQUIRE(log[0].label == "init");
    REQUIRE(log[0].trace_text.empty());
    REQUIRE(log[0].scope.empty());

    REQUIRE(log[1].trace_text == line1);
    REQUIRE(log[1].scope.empty());

    REQUIRE(log[2].trace_text == line1);
    REQUIRE(log[2].scope.at("things") == Value(ValueList{}));

    REQUIRE_THAT(log[3].label, Catch::Matchers::ContainsSubstring("i=0"));
    REQUIRE(log[3].trace_text == line1 + "- sun screen\n");
    REQUIRE(log[3].scope.at("i") == Value(std::int64_t{0}));
    REQUIRE(log[3].scope.at("THING") == Value("sun screen"));
    REQUIRE(log[3].scope.at("things") == Value(ValueList{Value("sun screen")}));

    REQUIRE_THAT(log[4].label, Catch::Matchers::ContainsSubstring("i=1"));
    REQUIRE(log[4].trace_text == line1 + "- sun screen\n- beach towel\n");
    REQUIRE(log[4].scope.at("i") == Value(std::int64_t{1}));
    REQUIRE(log[4].scope.at("THING") == Value("beach towel"));
    REQUIRE(log[4].scope.at("things") ==
            Value(ValueList{Value("sun screen"), Value("beach towel")}));

    REQUIRE(log[5].trace_text == target);
    REQUIRE(res.branches[0].variables.at("ITEM") == Value("sun screen"));
  }
  // (b) the mid-word membership follow map lowers to exactly the prefix scan
  {
    const Vocabulary v = load_vocabulary(std::string(PQL_DEMOS_DIR) + "/hawking_vocab.json");
    Scope scope;
    scope.declare_hole("TEXT");
    scope.start_hole("TEXT");
    scope.update_hole("TEXT", "Steph");
    FunctionRegistry fns;
    EvalContext ectx;
    ectx.scope = &scope;
    ectx.vocab = &v;
    ectx.fns = &fns;
    ectx.current_token_var = "TEXT";
    ectx.current_var_tokens = 1;
    FollowContext fctx;
    fctx.eval = &ectx;
    fctx.current_var = "TEXT";
    fctx.current_value = "Steph";
    const auto q = parse_checked("argmax \"[TEXT]\" from \"m\" where TEXT in [\"Stephen Hawking\"]\n");
    const FollowMap fm = follow(q.where, fctx);
    REQUIRE(derive_mask(fm, v) == v.prefix_feasible_tokens("en Hawking"));
    REQUIRE_THAT(fm.dump(v), Catch::Matchers::ContainsSubstring("exact \"en Hawking\" -> fin(True)"));
  }
  crit.passed = true;
  crit.detail = "five-row execution table and the prefix-scan mask reproduced exactly";
}

TEST_CASE("criterion 8: exhaustive round trip and prefix-scan completeness") {
  Criterion crit{8};
  const Vocabulary v = load_vocabulary(std::string(PQL_DEMOS_DIR) + "/vocab40.json");

  // character set of the demo vocabulary
  std::vector<char> chars;
  for (TokenId t = 0; t < static_cast<TokenId>(v.size()); ++t)
    if (v.entry(t).size() == 1) chars.push_back(v.entry(t)[0]);
  REQUIRE(chars.size() == 34);

  // round trip for every string of length <= 6: parallel exhaustive sweep
  const int max_len = 6;
  std::atomic<std::uint64_t> checked{0};
  std::atomic<bool> failed{false};
  const unsigned n_threads = std::min(8u, std::max(2u, std::thread::hardware_concurrency()));
  std::vector<std::thread> workers;
  for (unsigned w = 0; w < n_threads; ++w) {
    workers.emplace_back([&, w] {
      std::string buf;
      std::uint64_t local = 0;
      std::function<void()> rec = [&] {
        if (!buf.empty()) {
          ++local;
          // greedy tokenize + detokenize must reproduce the string
          std::size_t pos = 0;
          while (pos < buf.size()) {
            const TokenId t = v.match_longest(buf, pos);
            if (t < 0 || v.entry(t) != buf.substr(pos, v.entry(t).size())) {
              failed.store(true);
              return;
            }
            pos += v.entry(t).size();
          }
        }
        if (static_cast<int>(buf.size()) >= max_len || failed.load(std::memory_order_relaxed))
          return;
        for (char c : chars) {
          buf.push_back(c);
          rec();
          buf.pop_back();
        }
      };
      // partition the sweep by the first character
      for (std::size_t i = w; i < chars.size(); i += n_threads) {
        buf.assign(1, chars[i]);
        ++local;
        std::size_t pos = 0;
        while (pos < buf.size()) {
          const TokenId t = v.match_longest(buf, pos);
          if (t < 0) {
            failed.store(true);
            break;
          }
          pos += v.entry(t).size();
        }
        for (char c : chars) {
          buf.push_back(c);
          rec();
          buf.pop_back();
        }
      }
      checked += local;
    });
  }
  for (auto& t : workers) t.join();
  REQUIRE_FALSE(failed.load());
  // 34 + 34^2 + ... + 34^6 strings
  std::uint64_t expect = 0, power = 1;
  for (int k = 1; k <= max_len; ++k) {
    power *= chars.size();
    expect += power;
  }
  REQUIRE(checked.load() == expect);

  // prefix-scan completeness: every first token of every token sequence is
  // admitted for every prefix of its detokenization
  std::uint64_t scan_checks = 0;
  for (TokenId t0 = 0; t0 < static_cast<TokenId>(v.size()); ++t0) {
    if (t0 == v.eos_id()) continue;
    for (TokenId t1 = -1; t1 < static_cast<TokenId>(v.size()); ++t1) {
      if (t1 == v.eos_id()) continue;
      std::vector<TokenId> seq{t0};
      if (t1 >= 0) seq.push_back(t1);
      const std::string s = v.detokenize(seq);
      for (std::size_t len = 1; len <= std::min<std::size_t>(s.size(), 6); ++len) {
        ++scan_checks;
        REQUIRE(v.prefix_feasible_tokens(s.substr(0, len)).test(t0));
      }
    }
  }
  crit.passed = true;
  crit.detail = "round trip over " + std::to_string(checked.load()) + " strings; " +
                std::to_string(scan_checks) + " prefix-scan completeness checks";
}

TEST_CASE("criterion 9: byte-identical determinism across decoders") {
  Criterion crit{9};
  const Vocabulary v = load_vocabulary(std::string(PQL_DEMOS_DIR) + "/vocab40.json");
  const std::string where =
      "from \"m\"\nwhere A in [\"sun screen\", \"keys\", \"beach\"] and B in [\"keys\", \"a\"]\n";
  const std::vector<std::string> sources = {
      "argmax\n  \"take [A] and [B].\"\n" + where,
      "sample(n=2)\n  \"take [A] and [B].\"\n" + where,
      "beam(n=2)\n  \"take [A] and [B].\"\n" + where,
  };
  for (const auto& src : sources) {
    const auto q = parse_checked(src);
    RunOptions opts;
    opts.seed = 17;
    auto model = std::make_shared<NgramModel>(v.size(), 2, 41, 0.1);
    Runtime rt1(v, model);
    const auto r1 = rt1.execute(q, {}, opts);
    Runtime rt2(v, model);
    const auto r2 = rt2.execute(q, {}, opts);
    REQUIRE(r1.ok);
    REQUIRE(r1.to_json().dump() == r2.to_json().dump());
  }
  crit.passed = true;
  crit.detail = "argmax, seeded sample and beam produce byte-identical structured output";
}
