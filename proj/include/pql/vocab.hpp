#pragma once

// Token vocabulary: the finite alphabet over which models score and masks are
// defined. Tokenization is greedy longest-match over user-supplied token
// strings; the single-character closure invariant guarantees every string over
// the vocabulary's character set is tokenizable, so decoding never fails
// mid-run for lexical reasons.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace pql {

using TokenId = std::int32_t;

class VocabError : public std::runtime_error {
 public:
  explicit VocabError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Bit vector over the vocabulary; 1 = viable next token, 0 = discarded.
class TokenMask {
 public:
  TokenMask() = default;
  explicit TokenMask(std::size_t size, bool value = false) : bits_(size, value) {}

  std::size_t size() const { return bits_.size(); }
  bool test(TokenId t) const { return bits_.at(static_cast<std::size_t>(t)); }
  void set(TokenId t, bool v = true) { bits_.at(static_cast<std::size_t>(t)) = v; }

  bool any() const { return std::find(bits_.begin(), bits_.end(), true) != bits_.end(); }
  bool all() const { return std::find(bits_.begin(), bits_.end(), false) == bits_.end(); }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), true)); }

  TokenMask& operator&=(const TokenMask& o) {
    if (o.size() != size()) throw VocabError("mask size mismatch");
    for (std::size_t i = 0; i < bits_.size(); ++i) bits_[i] = bits_[i] && o.bits_[i];
    return *this;
  }
  TokenMask& operator|=(const TokenMask& o) {
    if (o.size() != size()) throw VocabError("mask size mismatch");
    for (std::size_t i = 0; i < bits_.size(); ++i) bits_[i] = bits_[i] || o.bits_[i];
    return *this;
  }

  friend bool operator==(const TokenMask&, const TokenMask&) = default;

  /// True if every set bit of this mask is also set in `other`.
  bool subset_of(const TokenMask& other) const {
    if (other.size() != size()) throw VocabError("mask size mismatch");
    for (std::size_t i = 0; i < bits_.size(); ++i)
      if (bits_[i] && !other.bits_[i]) return false;
    return true;
  }

 private:
  std::vector<bool> bits_;
};

class Vocabulary {
 public:
  /// Builds a vocabulary from token strings plus the EOS token's spelling.
  /// The EOS token is stored with an empty string form at the position where
  /// `eos_spelling` appears in `tokens`.
  Vocabulary(std::vector<std::string> tokens, const std::string& eos_spelling) {
    std::optional<std::size_t> eos_at;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i] == eos_spelling) {
        if (eos_at) throw VocabError("duplicate eos token entry");
        eos_at = i;
        tokens[i].clear();
      }
    }
    if (!eos_at) throw VocabError("eos token \"" + eos_spelling + "\" not listed in tokens");
    init(std::move(tokens), static_cast<TokenId>(*eos_at));
  }

  /// Raw form: entries as stored, EOS entry must already be the empty string.
  Vocabulary(std::vector<std::string> entries, TokenId eos_id) { init(std::move(entries), eos_id); }

  std::size_t size() const { return entries_.size(); }
  TokenId eos_id() const { return eos_id_; }
  const std::string& entry(TokenId t) const { return entries_.at(static_cast<std::size_t>(t)); }
  const std::vector<std::string>& entries() const { return entries_; }

  bool valid(TokenId t) const { return t >= 0 && static_cast<std::size_t>(t) < entries_.size(); }

  std::optional<TokenId> find(std::string_view s) const {
    auto it = by_string_.find(std::string(s));
    if (it == by_string_.end()) return std::nullopt;
    return it->second;
  }

  /// Greedy longest-match left-to-right factorization.
  std::vector<TokenId> tokenize(std::string_view s) const {
    std::vector<TokenId> out;
    out.reserve(s.size());
    std::size_t pos = 0;
    while (pos < s.size()) {
      TokenId best = match_longest(s, pos);
      if (best < 0)
        throw VocabError("character '" + std::string(1, s[pos]) + "' is not representable");
      out.push_back(best);
      pos += entries_[static_cast<std::size_t>(best)].size();
    }
    return out;
  }

  std::string detokenize(const std::vector<TokenId>& ts) const {
    std::string out;
    for (TokenId t : ts) {
      if (!valid(t)) throw VocabError("invalid token id " + std::to_string(t));
      out += entries_[static_cast<std::size_t>(t)];
    }
    return out;
  }

  /// Longest entry matching s at `pos`, or -1. Trie walk, no allocation.
  TokenId match_longest(std::string_view s, std::size_t pos) const {
    TokenId best = -1;
    std::int32_t node = 0;
    for (std::size_t i = pos; i < s.size(); ++i) {
      node = trie_[static_cast<std::size_t>(node)].next[static_cast<unsigned char>(s[i])];
      if (node < 0) break;
      const TokenId here = trie_[static_cast<std::size_t>(node)].token;
      if (here >= 0) best = here;
    }
    return best;
  }

  /// Tokens that can begin some factorization of a string extending `target`:
  /// entry is a non-empty prefix of target, or target is a prefix of entry.
  /// EOS is never admitted.
  TokenMask prefix_feasible_tokens(std::string_view target) const {
    if (target.empty()) throw VocabError("prefix scan needs a non-empty target");
    TokenMask m(entries_.size(), false);
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const std::string& e = entries_[i];
      if (e.empty()) continue;  // EOS
      if (e.size() <= target.size() ? target.substr(0, e.size()) == e
                                    : std::string_view(e).substr(0, target.size()) == target)
        m.set(static_cast<TokenId>(i));
    }
    return m;
  }

  std::size_t max_entry_len() const { return max_entry_len_; }

 private:
  void init(std::vector<std::string> entries, TokenId eos_id) {
    if (entries.empty()) throw VocabError("empty vocabulary");
    if (eos_id < 0 || static_cast<std::size_t>(eos_id) >= entries.size())
      throw VocabError("eos id out of range");
    if (!entries[static_cast<std::size_t>(eos_id)].empty())
      throw VocabError("eos entry must have empty string form");

    entries_ = std::move(entries);
    eos_id_ = eos_id;

    std::set<char> chars;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const std::string& e = entries_[i];
      if (e.empty() && static_cast<TokenId>(i) != eos_id_)
        throw VocabError("empty token entry at id " + std::to_string(i));
      if (!e.empty()) {
        auto [it, fresh] = by_string_.emplace(e, static_cast<TokenId>(i));
        (void)it;
        if (!fresh) throw VocabError("duplicate token entry \"" + e + "\"");
        max_entry_len_ = std::max(max_entry_len_, e.size());
        for (char c : e) chars.insert(c);
      }
    }
    for (char c : chars) {
      if (by_string_.find(std::string(1, c)) == by_string_.end())
        throw VocabError("character '" + std::string(1, c) +
                         "' appears in an entry but has no single-character token");
    }

    trie_.clear();
    trie_.emplace_back();
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const std::string& e = entries_[i];
      if (e.empty()) continue;
      std::int32_t node = 0;
      for (char c : e) {
        auto& slot = trie_[static_cast<std::size_t>(node)].next[static_cast<unsigned char>(c)];
        if (slot < 0) {
          slot = static_cast<std::int32_t>(trie_.size());
          trie_.emplace_back();
        }
        node = slot;
      }
      trie_[static_cast<std::size_t>(node)].token = static_cast<TokenId>(i);
    }
  }

  struct TrieNode {
    TrieNode() { next.fill(-1); }
    std::array<std::int32_t, 256> next;
    TokenId token = -1;
  };

  std::vector<std::string> entries_;
  std::unordered_map<std::string, TokenId> by_string_;
  std::vector<TrieNode> trie_;
  TokenId eos_id_ = 0;
  std::size_t max_entry_len_ = 0;
};

// ---------------------------------------------------------------------------
// Vocabulary file format: JSON {"tokens": ["a", "b", ...], "eos": "<eos>"}.
// JSON escaping covers "\n", "\t" and friends; round trip is exercised in
// tests.

inline Vocabulary load_vocabulary_json(const nlohmann::json& doc) {
  if (!doc.contains("tokens") || !doc["tokens"].is_array())
    throw VocabError("vocabulary document needs a \"tokens\" array");
  if (!doc.contains("eos") || !doc["eos"].is_string())
    throw VocabError("vocabulary document needs an \"eos\" string");
  std::vector<std::string> tokens;
  for (const auto& t : doc["tokens"]) {
    if (!t.is_string()) throw VocabError("token entries must be strings");
    tokens.push_back(t.get<std::string>());
  }
  return Vocabulary(std::move(tokens), doc["eos"].get<std::string>());
}

inline Vocabulary load_vocabulary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw VocabError("cannot open vocabulary file: " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw VocabError("vocabulary file " + path + ": " + e.what());
  }
  return load_vocabulary_json(doc);
}

inline nlohmann::json vocabulary_to_json(const Vocabulary& v, const std::string& eos_spelling) {
  nlohmann::json doc;
  auto& tokens = doc["tokens"] = nlohmann::json::array();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (static_cast<TokenId>(i) == v.eos_id())
      tokens.push_back(eos_spelling);
    else
      tokens.push_back(v.entry(static_cast<TokenId>(i)));
  }
  doc["eos"] = eos_spelling;
  return doc;
}

}  // namespace pql
