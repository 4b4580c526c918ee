#pragma once

#include <span>
#include <string>
#include <vector>

#include "msp/encoder.hpp"
#include "msp/params.hpp"
#include "msp/tensor.hpp"
#include "msp/vocab.hpp"

namespace msp {

/// Query-to-response attention A = softmax(Q K^T / sqrt(d)) with the values V.
struct AttentionMap {
  Tensor a;  // (|q| x |r|), rows sum to 1
  Tensor v;  // (|r| x d)
};

/// W_Q, W_K, W_V (d x d) over encoder states.
class TokenRefiner {
 public:
  TokenRefiner(ParameterStore& store, std::string prefix, std::size_t d, Rng& rng);

  AttentionMap attend(const Tensor& query_states, const Tensor& response_states) const;
  /// One map per segment of `response_states`, sharing the query projection.
  std::vector<AttentionMap> attend_all(const Tensor& query_states, const Tensor& response_states,
                                       std::span<const Segment> segments) const;
  /// Encodes both sides with `encoder`, then attends.
  AttentionMap cross_attention(std::span<const TokenId> query, std::span<const TokenId> response,
                               const TransformerEncoder& encoder) const;

  std::size_t dim() const { return d_; }
  const std::string& prefix() const { return prefix_; }

 private:
  ParameterStore* store_;
  std::string prefix_;
  std::size_t d_;
};

enum class ProfileSource { Sim, Cur };

std::string to_string(ProfileSource source);

struct ProfileToken {
  TokenId id = 0;
  double score = 0.0;
  std::size_t position = 0;  // index into the concatenated candidate list
};

struct ProfileTokens {
  ProfileSource source = ProfileSource::Cur;
  std::vector<ProfileToken> tokens;  // descending score

  std::vector<TokenId> ids() const;
  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
};

/// Max over query positions for each response position.
std::vector<double> column_max(const Tensor& a);

/// The k_p highest scores, descending; earlier positions win ties.
ProfileTokens select_profile(std::span<const double> scores, std::span<const TokenId> tokens, std::size_t k_p,
                             ProfileSource source);
/// Column maxima of every map, concatenated in order, then TopK.
ProfileTokens select_profile(std::span<const Tensor> maps, std::span<const std::vector<TokenId>> responses,
                             std::size_t k_p, ProfileSource source);

/// Text form, one line per token: "rank, token, score, source".
std::string dump_profile(const ProfileTokens& profile, const Vocabulary& vocab);

struct MatchingHeadConfig {
  std::size_t channels = 8;
  std::size_t kernel = 3;
  std::size_t pool = 2;
  std::size_t lstm_hidden = 64;
  std::size_t mlp_hidden = 32;
};

/// H = A V; S = maxpool(relu(conv(H))); h = LSTM over the pooled rows;
/// logit = MLP(h). Score is sigmoid(logit).
class MatchingHead {
 public:
  MatchingHead(ParameterStore& store, std::string prefix, std::size_t d, MatchingHeadConfig config, Rng& rng);

  /// Pre-sigmoid matching logit, shape (1). H is zero-padded to enough rows
  /// for one pooled output when the query is short.
  Tensor logit(const AttentionMap& map) const;
  double score(const AttentionMap& map) const;

  const MatchingHeadConfig& config() const { return config_; }
  std::size_t min_rows() const { return config_.kernel + config_.pool - 1; }

 private:
  ParameterStore* store_;
  std::string prefix_;
  std::size_t d_;
  MatchingHeadConfig config_;
  std::size_t step_features_;
};

/// Binary matching target and its soft score.
struct PseudoLabel {
  int g = 0;
  double g_soft = 0.0;
  double alpha = 0.1;
};

/// Per position t of y: max over the vocabulary of (onehot(y_t) - p'_t) masked
/// to the tokens of r; masked-out entries are 0, so the max is clamped at 0.
/// g_soft is the mean over positions; g = [g_soft >= alpha].
/// `y_hat_prime` is (|y| x V) probabilities.
PseudoLabel pseudo_label(std::span<const TokenId> y, const Tensor& y_hat_prime, std::span<const TokenId> r,
                         double alpha);

/// Binary cross entropy of sigmoid(logits) against the labels.
Tensor matching_loss(const Tensor& logits, std::span<const double> g);

}  // namespace msp
