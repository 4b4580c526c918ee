#include "msp/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "msp/error.hpp"

namespace msp {

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

const std::vector<std::string>& default_stopwords() {
  static const std::vector<std::string> words = {
      "a",   "about", "an",  "and",  "are",  "as",   "at",   "be",   "but",  "by",  "for",
      "from", "i",    "in",  "is",   "it",   "just", "me",   "my",   "of",   "on",  "or",
      "so",  "that",  "the", "this", "to",   "very", "was",  "we",   "with", "you", "your"};
  return words;
}

Vocabulary::Vocabulary() {
  for (const char* t : {"[CLS]", "[PAD]", "[BOS]", "[EOS]", "[UNK]"}) add(t);
}

void Vocabulary::add(const std::string& token) {
  index_.emplace(token, static_cast<TokenId>(tokens_.size()));
  tokens_.push_back(token);
}

Vocabulary Vocabulary::build(std::span<const std::string> texts) {
  std::set<std::string> seen;
  for (const auto& t : texts)
    for (auto& w : tokenize(t)) seen.insert(std::move(w));
  Vocabulary v;
  for (const auto& w : seen)
    if (!v.index_.contains(w)) v.add(w);
  return v;
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id(std::string_view token) const { return find(token).value_or(kUnk); }

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& w : tokenize(text)) ids.push_back(id(w));
  return ids;
}

std::vector<TokenId> Vocabulary::ids_of(std::span<const std::string> words) const {
  std::vector<TokenId> ids;
  for (const auto& w : words)
    if (auto i = find(w)) ids.push_back(*i);
  return ids;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId i : ids) {
    if (!out.empty()) out += ' ';
    out += token(i);
  }
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write vocabulary '" + path.string() + "'");
  for (const auto& t : tokens_) os << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read vocabulary '" + path.string() + "'");
  Vocabulary v;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    if (n < v.tokens_.size()) {
      if (line != v.tokens_[n]) {
        throw DataError("vocabulary line " + std::to_string(n + 1) + " must be reserved token " + v.tokens_[n]);
      }
    } else {
      if (line.empty() || v.index_.contains(line)) {
        throw DataError("vocabulary line " + std::to_string(n + 1) + " is empty or duplicated");
      }
      v.add(line);
    }
    ++n;
  }
  if (n < static_cast<std::size_t>(kFirstRegular)) throw DataError("vocabulary '" + path.string() + "' lacks reserved ids");
  return v;
}

}  // namespace msp
