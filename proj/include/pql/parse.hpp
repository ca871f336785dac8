#pragma once

// Lexer and recursive-descent parser for query programs. Layout follows the
// python offside rule (INDENT/DEDENT blocks for for/if bodies); clause
// keywords (argmax/sample/beam/from/where/distribute/over) and built-in
// function names are case-insensitive and normalized at parse time.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pql/ast.hpp"

namespace pql {

struct ParseError : std::runtime_error {
  ParseError(SourcePos p, const std::string& msg)
      : std::runtime_error(std::to_string(p.line) + ":" + std::to_string(p.col) + ": " + msg),
        pos(p),
        message(msg) {}
  SourcePos pos;
  std::string message;
};

namespace detail {

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

inline const std::set<std::string>& builtin_names() {
  static const std::set<std::string> names = {"words",    "sentences", "len",      "len_tokens",
                                              "stops_at", "stop_at",   "stops_before", "int",
                                              "endswith", "split"};
  return names;
}

/// stop_at and stops_at are the same built-in (the paper spells it both ways).
inline std::string normalize_fn_name(const std::string& name) {
  std::string low = lower(name);
  if (low == "stop_at") low = "stops_at";
  if (builtin_names().count(low)) return low;
  return name;
}

enum class Tok {
  End, Newline, Indent, Dedent,
  Str, Int, Name,
  LParen, RParen, LBracket, RBracket,
  Comma, Colon, Dot, Assign, Eq, Lt, Gt, Le, Ge, Minus
};

struct Token {
  Tok kind;
  std::string text;   // Name: identifier; Str: raw content between quotes
  std::int64_t ival = 0;
  SourcePos pos;
};

class Lexer {
 public:
  explicit Lexer(const std::string& src) : src_(src) { indents_.push_back(0); }

  std::vector<Token> run() {
    std::vector<Token> out;
    bool at_line_start = true;
    while (true) {
      if (at_line_start) {
        at_line_start = false;
        const int indent = consume_indent();
        if (eof()) break;
        if (peek() == '\n') { get(); at_line_start = true; continue; }  // blank line
        if (peek() == '#') { skip_comment(); at_line_start = true; continue; }
        if (indent > indents_.back()) {
          indents_.push_back(indent);
          out.push_back({Tok::Indent, "", 0, here()});
        }
        while (indent < indents_.back()) {
          indents_.pop_back();
          out.push_back({Tok::Dedent, "", 0, here()});
        }
        if (indent != indents_.back()) throw ParseError(here(), "inconsistent indentation");
      }
      if (eof()) break;
      const char c = peek();
      if (c == '\n') {
        get();
        out.push_back({Tok::Newline, "", 0, here()});
        at_line_start = true;
        continue;
      }
      if (c == ' ' || c == '\t' || c == '\r') { get(); continue; }
      if (c == '#') { skip_comment(); continue; }
      const SourcePos p = here();
      if (c == '"' || c == '\'') {
        out.push_back(lex_string(p));
        continue;
      }
      if (std::isdigit(static_cast<unsigned char>(c))) {
        out.push_back(lex_int(p));
        continue;
      }
      if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
        std::string name;
        while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_')) name += get();
        out.push_back({Tok::Name, name, 0, p});
        continue;
      }
      switch (get()) {
        case '(': out.push_back({Tok::LParen, "", 0, p}); break;
        case ')': out.push_back({Tok::RParen, "", 0, p}); break;
        case '[': out.push_back({Tok::LBracket, "", 0, p}); break;
        case ']': out.push_back({Tok::RBracket, "", 0, p}); break;
        case ',': out.push_back({Tok::Comma, "", 0, p}); break;
        case ':': out.push_back({Tok::Colon, "", 0, p}); break;
        case '.': out.push_back({Tok::Dot, "", 0, p}); break;
        case '-': out.push_back({Tok::Minus, "", 0, p}); break;
        case '=':
          if (!eof() && peek() == '=') { get(); out.push_back({Tok::Eq, "", 0, p}); }
          else out.push_back({Tok::Assign, "", 0, p});
          break;
        case '<':
          if (!eof() && peek() == '=') { get(); out.push_back({Tok::Le, "", 0, p}); }
          else out.push_back({Tok::Lt, "", 0, p});
          break;
        case '>':
          if (!eof() && peek() == '=') { get(); out.push_back({Tok::Ge, "", 0, p}); }
          else out.push_back({Tok::Gt, "", 0, p});
          break;
        default:
          throw ParseError(p, std::string("unexpected character '") + c + "'");
      }
    }
    out.push_back({Tok::Newline, "", 0, here()});
    while (indents_.size() > 1) {
      indents_.pop_back();
      out.push_back({Tok::Dedent, "", 0, here()});
    }
    out.push_back({Tok::End, "", 0, here()});
    return out;
  }

 private:
  bool eof() const { return pos_ >= src_.size(); }
  char peek() const { return src_[pos_]; }
  char get() {
    const char c = src_[pos_++];
    if (c == '\n') { ++line_; col_ = 1; } else { ++col_; }
    return c;
  }
  SourcePos here() const { return {line_, col_}; }

  void skip_comment() {
    while (!eof() && peek() != '\n') get();
  }

  int consume_indent() {
    int n = 0;
    while (!eof() && (peek() == ' ' || peek() == '\t')) {
      n += peek() == '\t' ? 8 - (n % 8) : 1;
      get();
    }
    return n;
  }

  Token lex_string(SourcePos p) {
    const char quote = get();
    std::string raw;
    while (true) {
      if (eof() || peek() == '\n') throw ParseError(p, "unterminated string literal");
      const char c = get();
      if (c == quote) break;
      raw += c;
      if (c == '\\') {
        if (eof() || peek() == '\n') throw ParseError(p, "unterminated string literal");
        raw += get();
      }
    }
    return {Tok::Str, raw, 0, p};
  }

  Token lex_int(SourcePos p) {
    std::int64_t v = 0;
    std::string digits;
    while (!eof() && std::isdigit(static_cast<unsigned char>(peek()))) {
      digits += peek();
      v = v * 10 + (get() - '0');
    }
    return {Tok::Int, digits, v, p};
  }

  const std::string& src_;
  std::size_t pos_ = 0;
  int line_ = 1;
  int col_ = 1;
  std::vector<int> indents_;
};

}  // namespace detail

// --- Segment unpacking --------------------------------------------------------
// "a [b] c" -> Literal("a "), Hole(b), Literal(" c"). Backslash escapes follow
// the usual conventions; literal "[" is written "[[", literal "{" is "{{".

inline std::vector<Segment> unpack_segments(const std::string& raw, SourcePos pos = {}) {
  std::vector<Segment> out;
  std::string lit;
  auto flush = [&] {
    if (!lit.empty()) {
      out.push_back({SegmentKind::Literal, lit});
      lit.clear();
    }
  };
  auto is_ident = [](const std::string& s) {
    if (s.empty()) return false;
    if (!std::isalpha(static_cast<unsigned char>(s[0])) && s[0] != '_') return false;
    return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isalnum(c) || c == '_'; });
  };

  for (std::size_t i = 0; i < raw.size(); ++i) {
    const char c = raw[i];
    if (c == '\\') {
      if (i + 1 >= raw.size()) throw ParseError(pos, "dangling backslash in string");
      const char e = raw[++i];
      switch (e) {
        case 'n': lit += '\n'; break;
        case 't': lit += '\t'; break;
        case 'r': lit += '\r'; break;
        case '\\': lit += '\\'; break;
        case '"': lit += '"'; break;
        case '\'': lit += '\''; break;
        case '0': lit += '\0'; break;
        default: throw ParseError(pos, std::string("unknown escape \\") + e);
      }
      continue;
    }
    if ((c == '[' || c == '{' || c == ']' || c == '}') && i + 1 < raw.size() && raw[i + 1] == c) {
      lit += c;
      ++i;
      continue;
    }
    if (c == '[' || c == '{') {
      const char close = c == '[' ? ']' : '}';
      const std::size_t end = raw.find(close, i + 1);
      if (end == std::string::npos)
        throw ParseError(pos, std::string("unbalanced '") + c + "' in prompt string");
      const std::string name = raw.substr(i + 1, end - i - 1);
      if (!is_ident(name))
        throw ParseError(pos, name.empty() ? "empty variable name in prompt string"
                                           : "invalid variable name \"" + name + "\" in prompt string");
      flush();
      out.push_back({c == '[' ? SegmentKind::Hole : SegmentKind::Placeholder, name});
      i = end;
      continue;
    }
    lit += c;
  }
  flush();
  return out;
}

/// Escapes a string value back to prompt-string source form.
inline std::string escape_prompt_string(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      case '\\': out += "\\\\"; break;
      case '"': out += "\\\""; break;
      case '[': out += "[["; break;
      case ']': out += "]]"; break;
      case '{': out += "{{"; break;
      case '}': out += "}}"; break;
      default: out += c;
    }
  }
  return out;
}

// --- Parser ---------------------------------------------------------------------

namespace detail {

class Parser {
 public:
  explicit Parser(std::vector<Token> toks) : toks_(std::move(toks)) {}

  QueryProgram parse() {
    QueryProgram q;
    skip_blank();
    q.decoder = parse_decoder();
    q.body = parse_body_until_from();  // statements may start on the decoder line
    expect_clause("from");
    const Token model = expect(Tok::Str, "model reference string after 'from'");
    q.model_ref = unescape_plain(model);
    skip_layout();
    if (at_clause("where")) {
      advance();
      q.where = parse_expr_multiline();
    }
    skip_layout();
    if (at_clause("distribute")) {
      advance();
      const Token var = expect(Tok::Name, "variable name after 'distribute'");
      if (!(at_clause("over") || at_name("in")))
        throw ParseError(cur().pos, "expected 'over' after the distribute variable");
      advance();
      q.distribute = DistributeClause{var.text, parse_expr_multiline()};
    }
    skip_layout();
    if (cur().kind != Tok::End) throw ParseError(cur().pos, "unexpected trailing input");
    collect_holes(q);
    return q;
  }

 private:
  // -- token plumbing --
  const Token& cur() const { return toks_[i_]; }
  const Token& peek(std::size_t k = 1) const { return toks_[std::min(i_ + k, toks_.size() - 1)]; }
  void advance() { if (i_ + 1 < toks_.size()) ++i_; }

  Token expect(Tok kind, const std::string& what) {
    if (cur().kind != kind) throw ParseError(cur().pos, "expected " + what);
    Token t = cur();
    advance();
    return t;
  }

  void expect_newline(const std::string& where) {
    if (cur().kind == Tok::Newline || cur().kind == Tok::End) {
      skip_newlines();
      return;
    }
    // single-line programs: a clause keyword also ends the statement
    if (at_clause("from") || at_clause("where") || at_clause("distribute")) return;
    throw ParseError(cur().pos, "expected end of line " + where);
  }

  void skip_newlines() {
    while (cur().kind == Tok::Newline) advance();
  }
  void skip_layout() {
    while (cur().kind == Tok::Newline || cur().kind == Tok::Indent || cur().kind == Tok::Dedent)
      advance();
  }
  void skip_blank() { skip_newlines(); }

  bool at_name(const std::string& name) const { return cur().kind == Tok::Name && cur().text == name; }
  bool at_clause(const std::string& kw) const {
    return cur().kind == Tok::Name && lower(cur().text) == kw;
  }
  void expect_clause(const std::string& kw) {
    if (!at_clause(kw)) throw ParseError(cur().pos, "expected '" + kw + "'");
    advance();
  }

  static std::string unescape_plain(const Token& t) {
    // Plain strings (model refs, expression constants) share prompt escapes
    // but must not contain holes or placeholders.
    auto segs = unpack_segments(t.text, t.pos);
    std::string out;
    for (const auto& s : segs) {
      if (s.kind != SegmentKind::Literal)
        throw ParseError(t.pos, "holes/placeholders are not allowed in this string");
      out += s.text;
    }
    return out;
  }

  // -- clauses --
  DecoderClause parse_decoder() {
    const Token t = expect(Tok::Name, "decoder clause (argmax, sample or beam)");
    const std::string kw = lower(t.text);
    DecoderClause d;
    if (kw == "argmax") d.kind = DecoderKind::Argmax;
    else if (kw == "sample") d.kind = DecoderKind::Sample;
    else if (kw == "beam") d.kind = DecoderKind::Beam;
    else throw ParseError(t.pos, "unknown decoder \"" + t.text + "\"");
    if (cur().kind == Tok::LParen) {
      advance();
      while (cur().kind != Tok::RParen) {
        const Token key = expect(Tok::Name, "decoder parameter name");
        expect(Tok::Assign, "'=' in decoder parameter");
        double value = 0.0;
        bool neg = false;
        if (cur().kind == Tok::Minus) { neg = true; advance(); }
        if (cur().kind == Tok::Int) {
          value = static_cast<double>(cur().ival);
          advance();
          if (cur().kind == Tok::Dot) {  // simple decimal literal
            advance();
            const Token frac = expect(Tok::Int, "fractional digits");
            double f = static_cast<double>(frac.ival);
            for (std::size_t d = 0; d < frac.text.size(); ++d) f /= 10.0;
            value += f;
          }
        } else {
          throw ParseError(cur().pos, "decoder parameters take numeric values");
        }
        if (neg) value = -value;
        const std::string k = lower(key.text);
        if (k == "n") d.n = static_cast<int>(value);
        else d.params[k] = value;
        if (cur().kind == Tok::Comma) advance();
      }
      expect(Tok::RParen, "')' after decoder parameters");
    }
    if (d.n < 1) throw ParseError(t.pos, "decoder n must be >= 1");
    if (d.kind == DecoderKind::Argmax && d.n != 1)
      throw ParseError(t.pos, "argmax always decodes a single trace (n=1)");
    return d;
  }

  StmtList parse_body_until_from() {
    StmtList body;
    skip_newlines();
    bool indented = false;
    if (cur().kind == Tok::Indent) { indented = true; advance(); }
    while (true) {
      skip_newlines();
      if (cur().kind == Tok::Dedent && indented) { advance(); break; }
      if (cur().kind == Tok::End) break;
      if (at_clause("from")) break;
      body.push_back(parse_statement());
    }
    skip_newlines();
    while (cur().kind == Tok::Dedent) advance();
    return body;
  }

  // -- statements --
  StmtPtr parse_statement() {
    const SourcePos p = cur().pos;
    if (cur().kind == Tok::Str) {
      auto s = std::make_shared<Statement>();
      s->kind = StmtKind::Prompt;
      s->pos = p;
      s->raw_text = cur().text;
      s->segments = unpack_segments(cur().text, p);
      advance();
      expect_newline("after prompt string");
      return s;
    }
    if (at_name("for")) return parse_for();
    if (at_name("if")) return parse_if();
    if (at_name("break")) {
      advance();
      expect_newline("after 'break'");
      auto s = std::make_shared<Statement>();
      s->kind = StmtKind::Break;
      s->pos = p;
      return s;
    }
    if (cur().kind == Tok::Name) {
      // assignment, append, or a bare call
      if (peek().kind == Tok::Assign) {
        auto s = std::make_shared<Statement>();
        s->kind = StmtKind::Assign;
        s->pos = p;
        s->target = cur().text;
        advance();
        advance();
        s->expr = parse_expr();
        expect_newline("after assignment");
        return s;
      }
      if (peek().kind == Tok::Dot && peek(2).kind == Tok::Name && peek(2).text == "append" &&
          peek(3).kind == Tok::LParen) {
        auto s = std::make_shared<Statement>();
        s->kind = StmtKind::Append;
        s->pos = p;
        s->target = cur().text;
        advance();  // name
        advance();  // .
        advance();  // append
        advance();  // (
        s->expr = parse_expr();
        expect(Tok::RParen, "')' after append argument");
        expect_newline("after append");
        return s;
      }
      auto s = std::make_shared<Statement>();
      s->kind = StmtKind::ExprStmt;
      s->pos = p;
      s->expr = parse_expr();
      if (s->expr->kind != ExprKind::Call)
        throw ParseError(p, "expression statements must be calls");
      expect_newline("after call statement");
      return s;
    }
    throw ParseError(p, "expected a statement");
  }

  StmtList parse_block(const char* what) {
    expect(Tok::Colon, std::string("':' to open ") + what);
    expect_newline(std::string("after ':' in ") + what);
    if (cur().kind != Tok::Indent) throw ParseError(cur().pos, std::string("expected an indented block in ") + what);
    advance();
    StmtList body;
    while (true) {
      skip_newlines();
      if (cur().kind == Tok::Dedent) { advance(); break; }
      if (cur().kind == Tok::End) break;
      body.push_back(parse_statement());
    }
    if (body.empty()) throw ParseError(cur().pos, std::string("empty block in ") + what);
    return body;
  }

  StmtPtr parse_for() {
    const SourcePos p = cur().pos;
    advance();  // for
    auto s = std::make_shared<Statement>();
    s->kind = StmtKind::For;
    s->pos = p;
    s->target = expect(Tok::Name, "loop variable").text;
    if (!at_name("in")) throw ParseError(cur().pos, "expected 'in' in for statement");
    advance();
    if (!at_name("range")) throw ParseError(cur().pos, "for loops iterate over range(<int>)");
    advance();
    expect(Tok::LParen, "'(' after range");
    s->range = expect(Tok::Int, "integer range bound").ival;
    expect(Tok::RParen, "')' after range bound");
    s->body = parse_block("for body");
    return s;
  }

  StmtPtr parse_if() {
    const SourcePos p = cur().pos;
    auto s = std::make_shared<Statement>();
    s->kind = StmtKind::If;
    s->pos = p;
    advance();  // if
    IfArm first;
    first.cond = parse_expr();
    first.body = parse_block("if body");
    s->arms.push_back(std::move(first));
    while (true) {
      skip_newlines();
      if (at_name("elif")) {
        advance();
        IfArm arm;
        arm.cond = parse_expr();
        arm.body = parse_block("elif body");
        s->arms.push_back(std::move(arm));
        continue;
      }
      if (at_name("else")) {
        advance();
        s->else_body = parse_block("else body");
      }
      break;
    }
    return s;
  }

  // -- expressions --
  ExprPtr parse_expr_multiline() {
    multiline_depth_++;
    ExprPtr e = parse_expr();
    multiline_depth_--;
    return e;
  }

  void skip_layout_if_multiline() {
    if (multiline_depth_ <= 0) return;
    while (cur().kind == Tok::Newline || cur().kind == Tok::Indent || cur().kind == Tok::Dedent) {
      // The where clause ends at 'distribute' or end of file; any other token
      // continues the expression on the next line.
      std::size_t j = i_;
      while (j < toks_.size() && (toks_[j].kind == Tok::Newline || toks_[j].kind == Tok::Indent ||
                                  toks_[j].kind == Tok::Dedent))
        ++j;
      if (toks_[j].kind == Tok::End) return;
      if (toks_[j].kind == Tok::Name && lower(toks_[j].text) == "distribute") return;
      i_ = j;
      return;
    }
  }

  ExprPtr parse_expr() { return parse_or(); }

  ExprPtr parse_or() {
    ExprPtr lhs = parse_and();
    while (true) {
      skip_layout_if_multiline();
      if (!at_name("or")) break;
      const SourcePos p = cur().pos;
      advance();
      skip_layout_if_multiline();
      lhs = Expr::make_bool_op(ExprKind::Or, lhs, parse_and(), p);
    }
    return lhs;
  }

  ExprPtr parse_and() {
    ExprPtr lhs = parse_not();
    while (true) {
      skip_layout_if_multiline();
      if (!at_name("and")) break;
      const SourcePos p = cur().pos;
      advance();
      skip_layout_if_multiline();
      lhs = Expr::make_bool_op(ExprKind::And, lhs, parse_not(), p);
    }
    return lhs;
  }

  ExprPtr parse_not() {
    skip_layout_if_multiline();
    if (at_name("not")) {
      const SourcePos p = cur().pos;
      advance();
      return Expr::make_not(parse_not(), p);
    }
    return parse_comparison();
  }

  ExprPtr parse_comparison() {
    ExprPtr lhs = parse_postfix();
    skip_layout_if_multiline();
    std::optional<CmpOp> op;
    if (cur().kind == Tok::Lt) op = CmpOp::Lt;
    else if (cur().kind == Tok::Gt) op = CmpOp::Gt;
    else if (cur().kind == Tok::Le) op = CmpOp::Le;
    else if (cur().kind == Tok::Ge) op = CmpOp::Ge;
    else if (cur().kind == Tok::Eq) op = CmpOp::Eq;
    else if (cur().kind == Tok::Assign) op = CmpOp::Eq;  // Fig-6 style single '='
    else if (at_name("in")) op = CmpOp::In;
    if (!op) return lhs;
    const SourcePos p = cur().pos;
    advance();
    skip_layout_if_multiline();
    return Expr::make_compare(*op, lhs, parse_postfix(), p);
  }

  ExprPtr parse_postfix() {
    ExprPtr e = parse_atom();
    while (cur().kind == Tok::Dot) {
      const SourcePos p = cur().pos;
      advance();
      const Token name = expect(Tok::Name, "method name after '.'");
      expect(Tok::LParen, "'(' after method name");
      std::vector<ExprPtr> args{e};
      while (cur().kind != Tok::RParen) {
        args.push_back(parse_expr());
        if (cur().kind == Tok::Comma) advance();
        else break;
      }
      expect(Tok::RParen, "')' after method arguments");
      e = Expr::make_call(normalize_fn_name(name.text), std::move(args), p);
    }
    return e;
  }

  ExprPtr parse_atom() {
    skip_layout_if_multiline();
    const SourcePos p = cur().pos;
    switch (cur().kind) {
      case Tok::Int: {
        const std::int64_t v = cur().ival;
        advance();
        return Expr::make_literal(Value(v), p);
      }
      case Tok::Minus: {
        advance();
        const Token t = expect(Tok::Int, "integer after unary minus");
        return Expr::make_literal(Value(-t.ival), p);
      }
      case Tok::Str: {
        const std::string s = unescape_plain(cur());
        advance();
        return Expr::make_literal(Value(s), p);
      }
      case Tok::LBracket: {
        advance();
        std::vector<ExprPtr> items;
        skip_layout_if_multiline();
        while (cur().kind != Tok::RBracket) {
          items.push_back(parse_expr());
          skip_layout_if_multiline();
          if (cur().kind == Tok::Comma) { advance(); skip_layout_if_multiline(); }
          else break;
        }
        expect(Tok::RBracket, "']' after list literal");
        return Expr::make_list(std::move(items), p);
      }
      case Tok::LParen: {
        advance();
        ExprPtr e = parse_expr();
        skip_layout_if_multiline();
        expect(Tok::RParen, "')' after parenthesized expression");
        return e;
      }
      case Tok::Name: {
        std::string name = cur().text;
        if (name == "True" || name == "False") {
          advance();
          return Expr::make_literal(Value(name == "True"), p);
        }
        advance();
        // dotted call names for registered externals (pkg.fn(...))
        while (cur().kind == Tok::Dot && peek().kind == Tok::Name && peek(2).kind == Tok::LParen) {
          advance();
          name += ".";
          name += cur().text;
          advance();
        }
        if (cur().kind == Tok::LParen) {
          advance();
          std::vector<ExprPtr> args;
          skip_layout_if_multiline();
          while (cur().kind != Tok::RParen) {
            args.push_back(parse_expr());
            skip_layout_if_multiline();
            if (cur().kind == Tok::Comma) { advance(); skip_layout_if_multiline(); }
            else break;
          }
          expect(Tok::RParen, "')' after call arguments");
          return Expr::make_call(normalize_fn_name(name), std::move(args), p);
        }
        return Expr::make_var(name, p);
      }
      default:
        throw ParseError(p, "expected an expression");
    }
  }

  static void collect_holes_stmt(const StmtPtr& s, std::vector<std::string>& out) {
    auto add = [&](const std::string& n) {
      if (std::find(out.begin(), out.end(), n) == out.end()) out.push_back(n);
    };
    switch (s->kind) {
      case StmtKind::Prompt:
        for (const auto& seg : s->segments)
          if (seg.kind == SegmentKind::Hole) add(seg.text);
        break;
      case StmtKind::For:
        for (const auto& c : s->body) collect_holes_stmt(c, out);
        break;
      case StmtKind::If:
        for (const auto& arm : s->arms)
          for (const auto& c : arm.body) collect_holes_stmt(c, out);
        for (const auto& c : s->else_body) collect_holes_stmt(c, out);
        break;
      default:
        break;
    }
  }

  static void collect_holes(QueryProgram& q) {
    for (const auto& s : q.body) collect_holes_stmt(s, q.hole_names);
  }

  std::vector<Token> toks_;
  std::size_t i_ = 0;
  int multiline_depth_ = 0;
};

}  // namespace detail

/// Parses a complete query program; throws ParseError with line/column on
/// malformed input.
inline QueryProgram parse_query(const std::string& source) {
  detail::Lexer lexer(source);
  detail::Parser parser(lexer.run());
  return parser.parse();
}

// --- Pretty printer -------------------------------------------------------------
// Canonical source form; parse(pretty_print(q)) reproduces an equal tree.

namespace detail {

inline void print_expr(std::ostream& os, const ExprPtr& e) {
  switch (e->kind) {
    case ExprKind::Literal:
      if (e->literal.is_string()) os << '"' << escape_prompt_string(e->literal.as_string()) << '"';
      else os << e->literal.to_display();
      break;
    case ExprKind::List: {
      os << '[';
      for (std::size_t i = 0; i < e->children.size(); ++i) {
        if (i) os << ", ";
        print_expr(os, e->children[i]);
      }
      os << ']';
      break;
    }
    case ExprKind::VarRef: os << e->name; break;
    case ExprKind::Not:
      os << "not (";
      print_expr(os, e->children[0]);
      os << ')';
      break;
    case ExprKind::And:
    case ExprKind::Or:
      os << '(';
      print_expr(os, e->children[0]);
      os << (e->kind == ExprKind::And ? " and " : " or ");
      print_expr(os, e->children[1]);
      os << ')';
      break;
    case ExprKind::Compare:
      os << '(';
      print_expr(os, e->children[0]);
      os << ' ' << cmp_op_name(e->cmp) << ' ';
      print_expr(os, e->children[1]);
      os << ')';
      break;
    case ExprKind::Call: {
      os << e->name << '(';
      for (std::size_t i = 0; i < e->children.size(); ++i) {
        if (i) os << ", ";
        print_expr(os, e->children[i]);
      }
      os << ')';
      break;
    }
  }
}

inline void print_stmt(std::ostream& os, const StmtPtr& s, int depth) {
  const std::string pad(static_cast<std::size_t>(depth) * 4, ' ');
  switch (s->kind) {
    case StmtKind::Prompt:
      os << pad << '"' << s->raw_text << "\"\n";
      break;
    case StmtKind::Assign:
      os << pad << s->target << " = ";
      print_expr(os, s->expr);
      os << '\n';
      break;
    case StmtKind::Append:
      os << pad << s->target << ".append(";
      print_expr(os, s->expr);
      os << ")\n";
      break;
    case StmtKind::ExprStmt:
      os << pad;
      print_expr(os, s->expr);
      os << '\n';
      break;
    case StmtKind::For:
      os << pad << "for " << s->target << " in range(" << s->range << "):\n";
      for (const auto& c : s->body) print_stmt(os, c, depth + 1);
      break;
    case StmtKind::If:
      for (std::size_t i = 0; i < s->arms.size(); ++i) {
        os << pad << (i == 0 ? "if " : "elif ");
        print_expr(os, s->arms[i].cond);
        os << ":\n";
        for (const auto& c : s->arms[i].body) print_stmt(os, c, depth + 1);
      }
      if (!s->else_body.empty()) {
        os << pad << "else:\n";
        for (const auto& c : s->else_body) print_stmt(os, c, depth + 1);
      }
      break;
    case StmtKind::Break:
      os << pad << "break\n";
      break;
  }
}

}  // namespace detail

inline std::string pretty_print(const QueryProgram& q) {
  std::ostringstream os;
  os << decoder_kind_name(q.decoder.kind);
  if (q.decoder.kind != DecoderKind::Argmax || !q.decoder.params.empty()) {
    os << "(n=" << q.decoder.n;
    for (const auto& [k, v] : q.decoder.params) {
      os << ", " << k << '=';
      if (v == static_cast<std::int64_t>(v)) os << static_cast<std::int64_t>(v);
      else os << v;
    }
    os << ')';
  }
  os << '\n';
  for (const auto& s : q.body) detail::print_stmt(os, s, 1);
  os << "from \"" << escape_prompt_string(q.model_ref) << "\"\n";
  if (q.where) {
    os << "where ";
    detail::print_expr(os, q.where);
    os << '\n';
  }
  if (q.distribute) {
    os << "distribute " << q.distribute->var << " over ";
    detail::print_expr(os, q.distribute->support);
    os << '\n';
  }
  return os.str();
}

}  // namespace pql
