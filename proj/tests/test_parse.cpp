#include <catch_amalgamated.hpp>

#include <string>

#include "pql/ast.hpp"
#include "pql/parse.hpp"
#include "pql/rng.hpp"
#include "pql/validate.hpp"

using namespace pql;

namespace {

const char* kJokeQuery = R"(beam(n=3)
    "a list of good dad jokes. a indicates the "
    "punchline\n"
    "q: how does a penguin build its house?\n"
    "a: igloos it together. end\n"
    "q: [JOKE]\n"
    "a: [PUNCHLINE]\n"
from "demo"
where
    STOPS_AT(JOKE, "?") and STOPS_AT(PUNCHLINE, "end")
    and len(words(JOKE)) < 20
    and len(PUNCHLINE) > 10
)";

const char* kThingsQuery = R"(argmax
    "a list of things not to forget when travelling:\n"
    things = []
    for i in range(2):
        "- [THING]\n"
        things.append(THING)
    "the most important of these is [ITEM]."
from "demo"
where
    THING in ["passport", "phone", "keys"]
    and len(words(THING)) <= 2
)";

const char* kReactQuery = R"(sample(n=1)
    "question: {QUESTION}\n"
    for i in range(1024):
        "[MODE] {i}:"
        if MODE == "tho":
            "[THOUGHT]\n"
        elif MODE == "act":
            " [ACTION] '[SUBJECT]\n"
            if ACTION == "search":
                result = lookup(SUBJECT)
                "obs {i}: {result}\n"
            else:
                break
from "demo"
where
    MODE in ["tho", "act"] and stops_at(THOUGHT, "\n") and
    ACTION in ["search", "finish"] and len(words(THOUGHT)) > 2 and
    stops_at(SUBJECT, "'") and not "tho" in THOUGHT
)";

}  // namespace

TEST_CASE("parse: joke query (beam n=3, two holes)") {
  const QueryProgram q = parse_query(kJokeQuery);
  CHECK(q.decoder.kind == DecoderKind::Beam);
  CHECK(q.decoder.n == 3);
  REQUIRE(q.hole_names.size() == 2);
  CHECK(q.hole_names[0] == "JOKE");
  CHECK(q.hole_names[1] == "PUNCHLINE");
  REQUIRE(q.where);
  CHECK(q.where->kind == ExprKind::And);
  CHECK(validate_program(q).empty());
}

TEST_CASE("parse: minimal program") {
  const QueryProgram q = parse_query("argmax \"hi\" from \"m\"\n");
  CHECK(q.decoder.kind == DecoderKind::Argmax);
  CHECK(q.decoder.n == 1);
  REQUIRE(q.body.size() == 1);
  CHECK(q.body[0]->kind == StmtKind::Prompt);
  CHECK_FALSE(q.where);
  CHECK_FALSE(q.distribute);
  CHECK(q.model_ref == "m");
}

TEST_CASE("parse: loop query (Fig 1b shape)") {
  const QueryProgram q = parse_query(kThingsQuery);
  REQUIRE(q.body.size() == 4);
  CHECK(q.body[1]->kind == StmtKind::Assign);
  REQUIRE(q.body[2]->kind == StmtKind::For);
  CHECK(q.body[2]->range == 2);
  REQUIRE(q.body[2]->body.size() == 2);
  CHECK(q.body[2]->body[0]->kind == StmtKind::Prompt);
  REQUIRE(q.body[2]->body[0]->segments.size() == 3);
  CHECK(q.body[2]->body[0]->segments[1].kind == SegmentKind::Hole);
  CHECK(q.body[2]->body[0]->segments[1].text == "THING");
  CHECK(q.body[2]->body[1]->kind == StmtKind::Append);
  CHECK(validate_program(q).empty());
}

TEST_CASE("parse: react-style query validates cleanly") {
  const QueryProgram q = parse_query(kReactQuery);
  ValidateOptions opts;
  opts.registered_fns.insert("lookup");
  const auto diags = validate_program(q, opts);
  for (const auto& d : diags) UNSCOPED_INFO(d.message);
  CHECK(diags.empty());
  const auto params = query_params(q, opts);
  REQUIRE(params.size() == 1);
  CHECK(params[0] == "QUESTION");
}

TEST_CASE("parse: case-insensitive clause keywords and builtins") {
  const QueryProgram q = parse_query("ARGMAX \"[A]\" FROM \"m\" WHERE STOP_AT(A, \".\")\n");
  REQUIRE(q.where);
  CHECK(q.where->kind == ExprKind::Call);
  CHECK(q.where->name == "stops_at");  // normalized spelling
}

TEST_CASE("parse: distribute accepts over and in") {
  for (const std::string kw : {"over", "in"}) {
    const QueryProgram q =
        parse_query("argmax \"x [A]\" from \"m\" distribute A " + kw + " [\"u\", \"v\"]\n");
    REQUIRE(q.distribute);
    CHECK(q.distribute->var == "A");
  }
}

TEST_CASE("parse: '=' and '==' are both equality in conditions") {
  const QueryProgram q1 = parse_query("argmax \"[A]\" from \"m\" where A == \"x\"\n");
  const QueryProgram q2 = parse_query("argmax \"[A]\" from \"m\" where A = \"x\"\n");
  CHECK(expr_to_json(q1.where) == expr_to_json(q2.where));
}

TEST_CASE("parse errors carry positions") {
  CHECK_THROWS_AS(parse_query("argmax \"unterminated\n from \"m\"\n"), ParseError);
  CHECK_THROWS_AS(parse_query("bestfirst \"x\" from \"m\"\n"), ParseError);
  CHECK_THROWS_AS(parse_query("argmax(n=2) \"x\" from \"m\"\n"), ParseError);
  CHECK_THROWS_AS(parse_query("argmax \"x\"\n"), ParseError);
  try {
    parse_query("argmax\n  \"x\"\n  for i in range(2)\n    \"y\"\nfrom \"m\"\n");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.pos.line >= 3);
  }
}

TEST_CASE("unpack_segments: hole splitting") {
  const auto segs = unpack_segments("a [b] c");
  REQUIRE(segs.size() == 3);
  CHECK(segs[0] == Segment{SegmentKind::Literal, "a "});
  CHECK(segs[1] == Segment{SegmentKind::Hole, "b"});
  CHECK(segs[2] == Segment{SegmentKind::Literal, " c"});
}

TEST_CASE("unpack_segments: plain text and mixed placeholders") {
  CHECK(unpack_segments("plain") == std::vector<Segment>{{SegmentKind::Literal, "plain"}});
  const auto segs = unpack_segments("indeed, {EXPERT} said: [ANSWER]");
  REQUIRE(segs.size() == 4);
  CHECK(segs[0] == Segment{SegmentKind::Literal, "indeed, "});
  CHECK(segs[1] == Segment{SegmentKind::Placeholder, "EXPERT"});
  CHECK(segs[2] == Segment{SegmentKind::Literal, " said: "});
  CHECK(segs[3] == Segment{SegmentKind::Hole, "ANSWER"});
}

TEST_CASE("unpack_segments: escapes and bracket doubling") {
  const auto segs = unpack_segments("x\\n[[y]] {{z}}");
  REQUIRE(segs.size() == 1);
  CHECK(segs[0].text == "x\n[y] {z}");
  CHECK_THROWS_AS(unpack_segments("broken [x"), ParseError);
  CHECK_THROWS_AS(unpack_segments("empty []"), ParseError);
  CHECK_THROWS_AS(unpack_segments("bad [9x]"), ParseError);
}

TEST_CASE("pretty-print round trip over the corpus") {
  for (const char* src : {kJokeQuery, kThingsQuery, kReactQuery}) {
    const QueryProgram q1 = parse_query(src);
    const std::string printed = pretty_print(q1);
    const QueryProgram q2 = parse_query(printed);
    CHECK(program_to_json(q1) == program_to_json(q2));
    CHECK(pretty_print(q2) == printed);
  }
}

TEST_CASE("validation: distribute must name the last hole") {
  const auto q = parse_query(
      "argmax\n  \"[A] then [B]\"\nfrom \"m\"\ndistribute A over [\"x\"]\n");
  const auto diags = validate_program(q);
  REQUIRE_FALSE(diags.empty());
  CHECK_THAT(diags[0].message, Catch::Matchers::ContainsSubstring("last hole"));

  const auto ok = parse_query(
      "argmax\n  \"[A] then [B]\"\nfrom \"m\"\ndistribute B over [\"x\"]\n");
  CHECK(validate_program(ok).empty());
}

TEST_CASE("validation: unknown variable in where clause") {
  const auto q = parse_query("argmax \"no holes\" from \"m\" where HOLE == \"x\"\n");
  const auto diags = validate_program(q);
  REQUIRE_FALSE(diags.empty());
  CHECK_THAT(diags[0].message, Catch::Matchers::ContainsSubstring("unknown variable"));
}

TEST_CASE("validation: placeholder read before assignment") {
  const auto q = parse_query("argmax \"{X} then [X]\" from \"m\"\n");
  const auto diags = validate_program(q);
  REQUIRE_FALSE(diags.empty());
  CHECK_THAT(diags[0].message, Catch::Matchers::ContainsSubstring("before it is assigned"));
}

TEST_CASE("validation: negated exact-match constraints are rejected") {
  const auto q1 = parse_query("argmax \"[A]\" from \"m\" where not (A in [\"x\"])\n");
  CHECK_FALSE(validate_program(q1).empty());
  const auto q2 = parse_query("argmax \"[A]\" from \"m\" where not (A == \"x\")\n");
  CHECK_FALSE(validate_program(q2).empty());
  const auto q3 = parse_query("argmax \"[A]\" from \"m\" where not stops_at(A, \".\")\n");
  CHECK_FALSE(validate_program(q3).empty());
  // negation over containment and length comparisons stays sound and allowed
  const auto q4 = parse_query("argmax \"[A]\" from \"m\" where not (\"x\" in A) and not (len(A) > 9)\n");
  CHECK(validate_program(q4).empty());
}

TEST_CASE("validation: break outside loop, unknown function, bad arity") {
  const auto q1 = parse_query("argmax\n  \"x\"\n  break\nfrom \"m\"\n");
  CHECK_FALSE(validate_program(q1).empty());
  const auto q2 = parse_query("argmax \"[A]\" from \"m\" where mystery(A)\n");
  CHECK_FALSE(validate_program(q2).empty());
  const auto q3 = parse_query("argmax \"[A]\" from \"m\" where len(A, A) < 3\n");
  CHECK_FALSE(validate_program(q3).empty());
}

TEST_CASE("fuzz: mutated sources parse or raise positioned diagnostics") {
  const std::string base = kThingsQuery;
  Rng rng(2024);
  int parsed = 0, rejected = 0;
  for (int it = 0; it < 3000; ++it) {
    std::string s = base;
    const int edits = 1 + static_cast<int>(rng.next_u64() % 4);
    for (int e = 0; e < edits; ++e) {
      const std::size_t at = rng.next_u64() % s.size();
      switch (rng.next_u64() % 3) {
        case 0: s[at] = static_cast<char>(32 + rng.next_u64() % 95); break;
        case 1: s.erase(at, 1); break;
        default: s.insert(at, 1, static_cast<char>(32 + rng.next_u64() % 95)); break;
      }
    }
    try {
      const QueryProgram q = parse_query(s);
      validate_program(q);
      ++parsed;
    } catch (const ParseError& e) {
      CHECK(e.pos.line >= 1);
      ++rejected;
    }
  }
  CHECK(parsed + rejected == 3000);
  CHECK(rejected > 100);  // mutations do break things
}
