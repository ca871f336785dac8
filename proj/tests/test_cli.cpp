#include <catch_amalgamated.hpp>

#include <array>
#include <cstdio>
#include <fstream>
#include <string>

#include <json.hpp>

namespace {

struct CmdResult {
  int exit_code;
  std::string out;
};

CmdResult run_cmd(const std::string& args) {
  const std::string cmd = std::string(PQL_CLI_PATH) + " " + args + " 2>&1";
  std::array<char, 4096> buf{};
  std::string out;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  while (fgets(buf.data(), buf.size(), pipe)) out += buf.data();
  const int status = pclose(pipe);
  return {WEXITSTATUS(status), out};
}

const std::string kDemos = PQL_DEMOS_DIR;

std::string demo_args(const std::string& query, const std::string& vocab, const std::string& model) {
  return "--query " + kDemos + "/" + query + " --vocab " + kDemos + "/" + vocab + " --model " +
         kDemos + "/" + model;
}

}  // namespace

TEST_CASE("run: things demo exits zero with a trace and stats") {
  const auto r = run_cmd("run " + demo_args("things.pql", "vocab40.json", "things_model.json"));
  CHECK(r.exit_code == 0);
  CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("a list of things not to forget"));
  CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("[THING|"));
  CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("stats: model_queries="));
}

TEST_CASE("run: unsatisfiable query exits one and shows the partial trace") {
  const std::string path = std::string(PQL_DEMOS_DIR) + "/_tmp_false.pql";
  {
    std::ofstream f(path);
    f << "argmax \"a[V]\" from \"demo\" where False\n";
  }
  const auto r = run_cmd("run --query " + path + " --vocab " + kDemos + "/vocab40.json --model " +
                         kDemos + "/things_model.json");
  CHECK(r.exit_code == 1);
  CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("decode failed"));
  std::remove(path.c_str());
}

TEST_CASE("run: malformed query exits two with a positioned diagnostic") {
  const std::string path = std::string(PQL_DEMOS_DIR) + "/_tmp_bad.pql";
  {
    std::ofstream f(path);
    f << "argmax \"x [\" from \"demo\"\n";
  }
  const auto r = run_cmd("run --query " + path + " --vocab " + kDemos + "/vocab40.json --model " +
                         kDemos + "/things_model.json");
  CHECK(r.exit_code == 2);
  CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring(":1:"));
  std::remove(path.c_str());
}

TEST_CASE("run: follow-map dump shows the exact-continuation case") {
  const auto r = run_cmd("run --dump-followmaps " +
                         demo_args("hawking.pql", "hawking_vocab.json", "hawking_model.json"));
  CHECK(r.exit_code == 0);
  CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("exact \"en Hawking\" -> fin(True)"));
  CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("[TEXT|Stephen Hawking]"));
}

TEST_CASE("run: json output is schema-stable and byte-deterministic") {
  const std::string args = "run --format json " +
                           demo_args("things.pql", "vocab40.json", "things_model.json");
  const auto a = run_cmd(args);
  const auto b = run_cmd(args);
  CHECK(a.exit_code == 0);
  CHECK(a.out == b.out);
  const auto j = nlohmann::json::parse(a.out);
  CHECK(j["version"] == 1);
  CHECK(j["ok"] == true);
  CHECK(j["branches"].is_array());
  CHECK(j["stats"]["model_queries"].is_number());
  CHECK(j["stats"]["decoder_calls"].is_number());
  CHECK(j["stats"]["billable_tokens"].is_number());
}

TEST_CASE("run: ast dump is machine readable") {
  const auto r = run_cmd("run --dump-ast --format json " +
                         demo_args("things.pql", "vocab40.json", "things_model.json"));
  CHECK(r.exit_code == 0);
  // two json documents: the ast dump, then the result
  const auto at = r.out.find("}\n{");
  REQUIRE(at != std::string::npos);
  const auto ast = nlohmann::json::parse(r.out.substr(0, at + 2));
  CHECK(ast["decoder"]["kind"] == "argmax");
  CHECK(ast["holes"].size() == 2);
}

TEST_CASE("oracle: hawking demo has zero violations at depth 4") {
  const auto r = run_cmd("oracle --oracle-depth 4 " +
                         demo_args("hawking.pql", "hawking_vocab.json", "hawking_model.json"));
  CHECK(r.exit_code == 0);
  CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("no violations"));
}

TEST_CASE("oracle: vocabulary cap is enforced") {
  const auto r = run_cmd("oracle " + demo_args("things.pql", "vocab40.json", "things_model.json"));
  CHECK(r.exit_code == 2);
  CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("too large"));
}

TEST_CASE("compare: react demo reports the three metrics with deltas") {
  const auto r = run_cmd("compare --chunk-size 30 --arg QUESTION=\"what to pack?\" " +
                         demo_args("react.pql", "vocab40.json", "react_model.json"));
  CHECK(r.exit_code == 0);
  CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("Decoder Calls"));
  CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("Model Queries"));
  CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("Billable Tokens"));
  CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("%"));
}

TEST_CASE("compare: json deltas follow (ours - baseline) / baseline") {
  const auto r = run_cmd("compare --format json --chunk-size 30 --arg QUESTION=\"what to pack?\" " +
                         demo_args("react.pql", "vocab40.json", "react_model.json"));
  CHECK(r.exit_code == 0);
  const auto j = nlohmann::json::parse(r.out);
  const double base = j["baseline"]["decoder_calls"].get<double>();
  const double ours = j["eager"]["decoder_calls"].get<double>();
  const double delta = j["delta_pct"]["decoder_calls"].get<double>();
  CHECK(std::abs(delta - (ours - base) / base * 100.0) < 1e-9);
  CHECK(ours == 1.0);
  CHECK(base >= 5.0);
}
