#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace msp {

using TokenId = int;

inline constexpr TokenId kCls = 0;
inline constexpr TokenId kPad = 1;
inline constexpr TokenId kBos = 2;
inline constexpr TokenId kEos = 3;
inline constexpr TokenId kUnk = 4;
inline constexpr TokenId kFirstRegular = 5;

/// Whitespace tokenisation.
std::vector<std::string> tokenize(std::string_view text);

/// A small English stopword list; the synthetic generator draws its filler from it.
const std::vector<std::string>& default_stopwords();

/// Token <-> id table. File form: one token per line, line number = id.
class Vocabulary {
 public:
  Vocabulary();

  /// Reserved ids plus every whitespace token of `texts`, regular tokens in lexicographic order.
  static Vocabulary build(std::span<const std::string> texts);

  std::size_t size() const { return tokens_.size(); }
  std::optional<TokenId> find(std::string_view token) const;
  TokenId id(std::string_view token) const;  // kUnk when absent
  const std::string& token(TokenId id) const;

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  std::vector<TokenId> ids_of(std::span<const std::string> words) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  void add(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace msp
