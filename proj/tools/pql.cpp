// pql: run prompt-query programs against deterministic reference models,
// check the mask soundness oracle, or compare the eager runtime against the
// chunk-wise generate() baseline.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pql/pql.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitDecodeFailure = 1;
constexpr int kExitBadQuery = 2;

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct CommonConfig {
  std::string query_path;
  std::string vocab_path;
  std::string model_path;
  std::vector<std::string> args;
  std::uint64_t seed = 0;
  std::string format = "text";
  bool dump_ast = false;
  bool dump_followmaps = false;
  bool no_cache = false;
  bool color = false;
};

void add_common(CLI::App* cmd, CommonConfig& cfg) {
  cmd->add_option("--query", cfg.query_path, "query program file")->required();
  cmd->add_option("--vocab", cfg.vocab_path, "vocabulary file (json)")->required();
  cmd->add_option("--model", cfg.model_path, "model spec file (json)")->required();
  cmd->add_option("--arg", cfg.args, "query argument binding name=value (repeatable)");
  cmd->add_option("--seed", cfg.seed, "rng seed (default 0)");
  cmd->add_option("--format", cfg.format, "output format: text or json")
      ->check(CLI::IsMember({"text", "json"}));
  cmd->add_flag("--dump-ast", cfg.dump_ast, "print the parsed program as json and continue");
  cmd->add_flag("--dump-followmaps", cfg.dump_followmaps, "print the follow map at every decode step");
  cmd->add_flag("--no-cache", cfg.no_cache, "disable the function-result cache");
  cmd->add_flag("--color", cfg.color, "colorize hole spans in text output");
}

std::map<std::string, pql::Value> parse_args(const std::vector<std::string>& kvs) {
  std::map<std::string, pql::Value> out;
  for (const auto& kv : kvs) {
    const auto at = kv.find('=');
    if (at == std::string::npos) throw std::runtime_error("--arg expects name=value, got " + kv);
    const std::string key = kv.substr(0, at);
    const std::string raw = kv.substr(at + 1);
    // integers bind as ints, everything else as strings
    try {
      std::size_t used = 0;
      const long long n = std::stoll(raw, &used);
      if (used == raw.size()) {
        out.emplace(key, pql::Value(static_cast<std::int64_t>(n)));
        continue;
      }
    } catch (...) {
    }
    out.emplace(key, pql::Value(raw));
  }
  return out;
}

struct Loaded {
  pql::QueryProgram program;
  pql::Vocabulary vocab;
  std::shared_ptr<pql::Model> model;
};

Loaded load_all(const CommonConfig& cfg, const pql::FunctionRegistry& fns) {
  pql::QueryProgram q;
  try {
    q = pql::parse_query(read_file(cfg.query_path));
  } catch (const pql::ParseError& e) {
    std::cerr << cfg.query_path << ":" << e.what() << "\n";
    std::exit(kExitBadQuery);
  }
  pql::ValidateOptions vopts;
  for (const auto& name : fns.names()) vopts.registered_fns.insert(name);
  const auto diags = pql::validate_program(q, vopts);
  if (!diags.empty()) {
    for (const auto& d : diags)
      std::cerr << cfg.query_path << ":" << d.pos.line << ":" << d.pos.col << ": " << d.message << "\n";
    std::exit(kExitBadQuery);
  }
  if (cfg.dump_ast) std::cout << pql::program_to_json(q).dump(2) << "\n";
  pql::Vocabulary vocab = pql::load_vocabulary(cfg.vocab_path);
  auto model = pql::load_model(cfg.model_path, vocab.size());
  return {std::move(q), std::move(vocab), std::move(model)};
}

/// Deterministic external stubs so ReAct-style demos run self-contained.
void register_demo_functions(pql::FunctionRegistry& fns) {
  fns.register_fn("lookup", [](const pql::ValueList& args) -> pql::Value {
    if (args.empty() || !args[0].is_string()) throw pql::EvalError("lookup(key) needs a string");
    const std::string& key = args[0].as_string();
    return pql::Value("found " + std::to_string(key.size() % 10) + " notes on " + key);
  });
  fns.register_fn("calc", [](const pql::ValueList& args) -> pql::Value {
    if (args.empty() || !args[0].is_string()) throw pql::EvalError("calc(expr) needs a string");
    // toy arithmetic: sums digit runs in the input
    long long total = 0, cur = 0;
    bool any = false;
    for (char ch : args[0].as_string()) {
      if (ch >= '0' && ch <= '9') {
        cur = cur * 10 + (ch - '0');
        any = true;
      } else if (any) {
        total += cur;
        cur = 0;
        any = false;
      }
    }
    if (any) total += cur;
    return pql::Value(std::to_string(total));
  });
}

void print_trace(const pql::BranchResult& b, bool color) {
  std::string out;
  for (const auto& span : b.spans) {
    const std::string piece = b.text.substr(span.begin, span.end - span.begin);
    if (span.kind == pql::TraceSpan::Kind::Hole) {
      if (color)
        out += "\033[36m[" + span.var + "|" + piece + "]\033[0m";
      else
        out += "[" + span.var + "|" + piece + "]";
    } else {
      out += piece;
    }
  }
  std::cout << out << "\n";
}

void print_stats(const pql::CostStats& s) {
  std::cout << "stats: model_queries=" << s.model_queries << " decoder_calls=" << s.decoder_calls
            << " billable_tokens=" << s.billable_tokens << " backtracks=" << s.backtracks
            << " cache_hits=" << s.cache_hits << "\n";
}

int cmd_run(const CommonConfig& cfg) {
  pql::FunctionRegistry fns;
  register_demo_functions(fns);
  Loaded l = load_all(cfg, fns);
  pql::Runtime rt(l.vocab, l.model);
  rt.functions() = fns;

  pql::RunOptions opts;
  opts.seed = cfg.seed;
  opts.cache_enabled = !cfg.no_cache;
  if (cfg.dump_followmaps) {
    opts.observer = [&](const pql::MaskStep& step) {
      std::cout << "-- follow map for [" << step.var << "] after \"" << step.value_so_far << "\"\n";
      if (step.follow_map) std::cout << step.follow_map->dump(l.vocab);
      std::cout << "   mask size " << step.mask.count() << "\n";
    };
  }

  const auto result = rt.execute(l.program, parse_args(cfg.args), opts);
  if (cfg.format == "json") {
    std::cout << result.to_json().dump(2) << "\n";
  } else {
    if (!result.ok) std::cerr << "decode failed: " << result.error << "\n";
    for (std::size_t i = 0; i < result.branches.size(); ++i) {
      if (result.branches.size() > 1)
        std::cout << "branch " << i << " (logprob " << result.branches[i].logprob << "):\n";
      print_trace(result.branches[i], cfg.color);
    }
    if (result.distribution) {
      std::cout << "distribution:\n";
      for (const auto& [value, prob] : *result.distribution)
        std::printf("  %-24s %.4f\n", value.c_str(), prob);
    }
    print_stats(result.stats);
  }
  return result.ok ? kExitOk : kExitDecodeFailure;
}

int cmd_oracle(const CommonConfig& cfg, int depth) {
  pql::FunctionRegistry fns;
  register_demo_functions(fns);
  Loaded l = load_all(cfg, fns);
  if (l.vocab.size() > 32) {
    std::cerr << "oracle: vocabulary too large for exhaustive checking (|V| <= 32)\n";
    return kExitBadQuery;
  }
  if (depth > 5) {
    std::cerr << "oracle: depth capped at 5\n";
    return kExitBadQuery;
  }
  pql::Runtime rt(l.vocab, l.model);
  rt.functions() = fns;

  pql::OracleObserver oracle(l.program.where, l.vocab, rt.functions(), depth);
  pql::RunOptions opts;
  opts.seed = cfg.seed;
  opts.observer = oracle.hook();
  const auto result = rt.execute(l.program, parse_args(cfg.args), opts);

  const auto& report = oracle.report();
  if (cfg.format == "json") {
    nlohmann::ordered_json j;
    j["ok"] = report.ok();
    j["violations"] = report.total_violations;
    auto& steps = j["steps"] = nlohmann::ordered_json::array();
    for (const auto& s : report.steps) {
      nlohmann::ordered_json js;
      js["step"] = s.step;
      js["var"] = s.var;
      js["mask"] = s.mask_size;
      js["admissible"] = s.admissible_size;
      js["violations"] = s.violations.size();
      steps.push_back(js);
    }
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << "step  var          |M|  |T_Q|  over-approx  violations\n";
    for (const auto& s : report.steps) {
      const double ratio = s.admissible_size ? static_cast<double>(s.mask_size) / s.admissible_size : 0.0;
      std::printf("%4zu  %-12s %4zu %5zu  %10.2f  %zu\n", s.step, s.var.c_str(), s.mask_size,
                  s.admissible_size, ratio, s.violations.size());
    }
    std::cout << (report.ok() ? "oracle: no violations" : "oracle: VIOLATIONS FOUND") << " across "
              << report.steps.size() << " steps\n";
    if (!result.ok) std::cout << "(query itself failed: " << result.error << ")\n";
  }
  return report.ok() ? kExitOk : kExitDecodeFailure;
}

int cmd_compare(const CommonConfig& cfg, int chunk_size) {
  pql::FunctionRegistry fns;
  register_demo_functions(fns);
  Loaded l = load_all(cfg, fns);
  pql::Runtime rt(l.vocab, l.model);
  rt.functions() = fns;

  pql::RunOptions opts;
  opts.seed = cfg.seed;
  const auto args = parse_args(cfg.args);
  const auto eager = rt.execute(l.program, args, opts);
  const auto baseline = rt.execute_chunkwise(l.program, args, chunk_size, opts);

  auto delta = [](double ours, double base) { return base == 0.0 ? 0.0 : (ours - base) / base * 100.0; };
  const auto& es = eager.stats;
  const auto& bs = baseline.stats;
  if (cfg.format == "json") {
    nlohmann::ordered_json j;
    j["chunk_size"] = chunk_size;
    j["baseline"] = bs.to_json();
    j["eager"] = es.to_json();
    j["delta_pct"]["decoder_calls"] = delta(double(es.decoder_calls), double(bs.decoder_calls));
    j["delta_pct"]["model_queries"] = delta(double(es.model_queries), double(bs.model_queries));
    j["delta_pct"]["billable_tokens"] = delta(double(es.billable_tokens), double(bs.billable_tokens));
    std::cout << j.dump(2) << "\n";
  } else {
    std::printf("%-18s %18s %12s %9s\n", "", "Standard Decoding", "pql", "Delta");
    std::printf("%-18s %18llu %12llu %8.2f%%\n", "Decoder Calls",
                static_cast<unsigned long long>(bs.decoder_calls),
                static_cast<unsigned long long>(es.decoder_calls),
                delta(double(es.decoder_calls), double(bs.decoder_calls)));
    std::printf("%-18s %18llu %12llu %8.2f%%\n", "Model Queries",
                static_cast<unsigned long long>(bs.model_queries),
                static_cast<unsigned long long>(es.model_queries),
                delta(double(es.model_queries), double(bs.model_queries)));
    std::printf("%-18s %18llu %12llu %8.2f%%\n", "Billable Tokens",
                static_cast<unsigned long long>(bs.billable_tokens),
                static_cast<unsigned long long>(es.billable_tokens),
                delta(double(es.billable_tokens), double(bs.billable_tokens)));
    if (!eager.ok) std::cout << "note: eager run failed: " << eager.error << "\n";
    if (!baseline.ok) std::cout << "note: baseline run failed: " << baseline.error << "\n";
  }
  return (eager.ok && baseline.ok) ? kExitOk : kExitDecodeFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prompt query language runtime"};
  app.require_subcommand(1);

  CommonConfig run_cfg;
  auto* run = app.add_subcommand("run", "execute a query and print the interaction trace");
  add_common(run, run_cfg);

  CommonConfig oracle_cfg;
  int oracle_depth = 4;
  auto* oracle = app.add_subcommand("oracle", "check the mask soundness oracle on a query run");
  add_common(oracle, oracle_cfg);
  oracle->add_option("--oracle-depth", oracle_depth, "continuation search depth (<= 5)");

  CommonConfig cmp_cfg;
  int chunk_size = 30;
  auto* cmp = app.add_subcommand("compare", "compare eager decoding against the chunk-wise baseline");
  add_common(cmp, cmp_cfg);
  cmp->add_option("--chunk-size", chunk_size, "baseline generate() chunk size");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(run_cfg);
    if (oracle->parsed()) return cmd_oracle(oracle_cfg, oracle_depth);
    if (cmp->parsed()) return cmd_compare(cmp_cfg, chunk_size);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadQuery;
  }
  return kExitOk;
}
