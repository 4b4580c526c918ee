#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "msp/params.hpp"
#include "msp/rng.hpp"
#include "msp/tensor.hpp"
#include "msp/vocab.hpp"

namespace msp {

enum class SegmentTag : int { Sim = 0, Per = 1, Query = 2, Response = 3 };
inline constexpr std::size_t kSegmentTags = 4;

/// Decoder input x = [c_sim ; c_per ; q ; BOS] with a segment tag per token.
struct GenerationInput {
  std::vector<TokenId> tokens;
  std::vector<SegmentTag> tags;

  std::size_t size() const { return tokens.size(); }
  /// "tag:id" pairs separated by spaces, tags as s/p/q/r.
  std::string serialize() const;
  static GenerationInput parse(std::string_view text);
  bool operator==(const GenerationInput&) const = default;
};

/// BOS closes the input and is tagged as the start of the response region.
GenerationInput build_input(std::span<const TokenId> sim, std::span<const TokenId> per, std::span<const TokenId> query);

struct GeneratorConfig {
  std::size_t vocab_size = 0;
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t ff = 128;
  std::size_t max_positions = 256;
  /// Name of an existing (vocab_size x d) table to use as token embedding and
  /// tied output weights; empty registers `prefix.tok`.
  std::string shared_embedding;
};

/// Probability-sorted nucleus: the smallest prefix (ties by ascending id)
/// whose mass reaches p, renormalised.
struct Nucleus {
  std::vector<TokenId> ids;
  std::vector<double> probs;
};

Nucleus nucleus(std::span<const double> probs, double p);
TokenId sample_from(const Nucleus& n, Rng& rng);

/// Decoder-only transformer over the concatenated input and response with a
/// causal mask. Output projection is tied to the token embedding.
class Generator {
 public:
  Generator(ParameterStore& store, std::string prefix, GeneratorConfig config, Rng& rng);

  /// Teacher-forced logits for each example's |y| + 1 prediction positions
  /// (y followed by EOS), packed in order: (sum(|y_i| + 1) x V).
  Tensor teacher_forced_logits(std::span<const GenerationInput> inputs,
                               std::span<const std::vector<TokenId>> targets) const;

  /// Row-wise softmax of teacher_forced_logits for one example.
  Tensor distributions(const GenerationInput& input, std::span<const TokenId> target) const;

  struct SampleOptions {
    double p = 0.9;
    std::size_t max_len = 20;
  };
  /// Nucleus sampling with an incremental key/value cache. Reserved ids other
  /// than EOS are never emitted, and EOS is blocked at the first step.
  /// `nucleus_sizes`, when given, receives the nucleus size of every step.
  std::vector<TokenId> sample(const GenerationInput& input, const SampleOptions& options, Rng& rng,
                              std::vector<std::size_t>* nucleus_sizes = nullptr) const;

  /// Next-token logits after `input` + `prefix`, via the incremental path.
  std::vector<double> next_logits(const GenerationInput& input, std::span<const TokenId> prefix) const;

  const GeneratorConfig& config() const { return config_; }
  const std::string& prefix() const { return prefix_; }
  const std::string& token_table() const { return token_table_; }

 private:
  struct Cache;
  void step(Cache& cache, TokenId token, SegmentTag tag, std::vector<double>* logits) const;
  void check_length(std::size_t total) const;

  ParameterStore* store_;
  std::string prefix_;
  GeneratorConfig config_;
  std::string token_table_;
};

/// Targets of teacher_forced_logits: each y followed by EOS.
std::vector<int> generation_targets(std::span<const std::vector<TokenId>> targets);

/// Mean token negative log-likelihood; delegates to cross_entropy.
Tensor generation_loss(const Tensor& logits, std::span<const int> targets);

}  // namespace msp
