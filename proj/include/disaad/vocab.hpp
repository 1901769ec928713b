#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "disaad/common.hpp"

namespace disaad {

using TokenId = std::uint32_t;

inline constexpr TokenId kEos = 0;
inline constexpr std::string_view kEosToken = "<eos>";

enum class SeqRole { prompt, response };

struct TokenSeq {
  std::vector<TokenId> ids;
  SeqRole role = SeqRole::response;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) out.push_back(word);
  return out;
}

// Word-level vocabulary. Index 0 is always the end-of-sequence token.
class Vocabulary {
 public:
  Vocabulary() { add(std::string(kEosToken)); }

  explicit Vocabulary(const std::vector<std::string>& tokens) : Vocabulary() {
    for (const auto& t : tokens) {
      if (t == kEosToken) continue;
      if (index_.contains(t)) throw InputError("Vocabulary: duplicate token '" + t + "'");
      add(t);
    }
  }

  // Adds the token if absent; returns its id either way.
  TokenId intern(const std::string& token) {
    if (auto it = index_.find(token); it != index_.end()) return it->second;
    return add(token);
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& token) const { return index_.contains(token); }

  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) throw InputError("Vocabulary: unknown token '" + token + "'");
    return it->second;
  }

  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) throw InputError("Vocabulary: token id out of range");
    return tokens_[id];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenSeq encode(std::string_view text, SeqRole role = SeqRole::response) const {
    TokenSeq seq{{}, role};
    for (const auto& w : split_whitespace(text)) seq.ids.push_back(id(w));
    return seq;
  }

  std::string decode(const TokenSeq& seq) const { return decode(seq.ids); }

  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += token(ids[i]);
    }
    return out;
  }

  void validate(const TokenSeq& seq) const {
    for (TokenId t : seq.ids)
      if (t >= tokens_.size()) throw InputError("token id " + std::to_string(t) + " outside vocabulary");
  }

  // One token per line, in id order.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write vocabulary file " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot read vocabulary file " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) tokens.push_back(line);
    }
    if (tokens.empty() || tokens.front() != kEosToken)
      throw InputError("vocabulary file " + path + " must start with " + std::string(kEosToken));
    return Vocabulary(tokens);
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  TokenId add(const std::string& token) {
    if (token.empty() || token.find_first_of(" \t\r\n") != std::string::npos)
      throw InputError("Vocabulary: tokens must be non-empty and whitespace-free");
    const auto id = static_cast<TokenId>(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Corpus file: one whitespace-tokenized sequence per line.
inline std::vector<TokenSeq> load_corpus(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read corpus file " + path);
  std::vector<TokenSeq> out;
  std::string line;
  while (std::getline(in, line)) {
    auto seq = vocab.encode(line);
    if (!seq.empty()) out.push_back(std::move(seq));
  }
  return out;
}

inline void save_corpus(const std::string& path, const std::vector<TokenSeq>& corpus,
                        const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write corpus file " + path);
  for (const auto& seq : corpus) out << vocab.decode(seq) << '\n';
}

}  // namespace disaad
