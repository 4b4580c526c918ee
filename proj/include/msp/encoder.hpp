#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "msp/layers.hpp"
#include "msp/params.hpp"
#include "msp/tensor.hpp"
#include "msp/vocab.hpp"

namespace msp {

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t ff = 128;
  std::size_t max_positions = 128;
};

struct Encoded {
  Tensor states;  // (len x d)
  bool truncated = false;
};

struct EncodedBatch {
  Tensor states;  // all sequences packed row-wise
  std::vector<Segment> segments;
  std::vector<bool> truncated;
};

/// Small trainable transformer encoder (token + learned positional embeddings,
/// pre-LN blocks, final layer norm). Parameters live in a caller-owned store
/// under `prefix`.
class TransformerEncoder {
 public:
  TransformerEncoder(ParameterStore& store, std::string prefix, EncoderConfig config, Rng& rng);

  /// Sequences longer than max_positions are cut and flagged.
  Encoded encode(std::span<const TokenId> ids) const;
  EncodedBatch encode_batch(std::span<const std::vector<TokenId>> sequences) const;

  const EncoderConfig& config() const { return config_; }
  const std::string& prefix() const { return prefix_; }

 private:
  ParameterStore* store_;
  std::string prefix_;
  EncoderConfig config_;
};

enum class SentenceMode { Cls, Mean, BagOfWords };

std::string to_string(SentenceMode mode);
SentenceMode sentence_mode_from_string(const std::string& name);

/// Fixed-length sentence vectors for the user and topic refiners.
class SentenceEmbedder {
 public:
  virtual ~SentenceEmbedder() = default;
  virtual std::size_t dim() const = 0;
  virtual SentenceMode mode() const = 0;
  /// Throws ContractError on empty input.
  virtual std::vector<double> embed(std::span<const TokenId> ids) const = 0;
};

/// Term-frequency vector through a fixed projection, L2-normalised. Reserved
/// ids and the configured stopwords are dropped before counting.
class BagOfWordsEmbedder final : public SentenceEmbedder {
 public:
  /// Gaussian projection (vocab_size x dim), entries N(0, 1/dim), drawn from `seed`.
  BagOfWordsEmbedder(std::size_t vocab_size, std::size_t dim, std::uint64_t seed, std::vector<TokenId> ignored = {});
  /// Identity projection: dim == vocab_size, so disjoint sentences are orthogonal.
  static BagOfWordsEmbedder identity(std::size_t vocab_size, std::vector<TokenId> ignored = {});

  std::size_t dim() const override { return dim_; }
  SentenceMode mode() const override { return SentenceMode::BagOfWords; }
  std::vector<double> embed(std::span<const TokenId> ids) const override;

  /// Projection row of a single token (unnormalised); used by the embedding metrics.
  std::vector<double> token_vector(TokenId id) const;
  bool ignores(TokenId id) const;

 private:
  BagOfWordsEmbedder() = default;

  std::size_t vocab_size_ = 0;
  std::size_t dim_ = 0;
  bool identity_ = false;
  std::vector<double> projection_;
  std::vector<bool> ignored_;
};

/// Sentence vectors from a TransformerEncoder: [CLS]-prepended position 0, or
/// the mean over positions. Evaluated without recording gradients.
class EncoderEmbedder final : public SentenceEmbedder {
 public:
  EncoderEmbedder(const TransformerEncoder& encoder, SentenceMode mode);

  std::size_t dim() const override { return encoder_->config().d; }
  SentenceMode mode() const override { return mode_; }
  std::vector<double> embed(std::span<const TokenId> ids) const override;

 private:
  const TransformerEncoder* encoder_;
  SentenceMode mode_;
};

/// Stopword ids present in `vocab`, plus the reserved ids.
std::vector<TokenId> ignored_ids(const Vocabulary& vocab, std::span<const std::string> stopwords);

}  // namespace msp
