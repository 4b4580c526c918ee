#pragma once

#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msp/config.hpp"
#include "msp/corpus.hpp"
#include "msp/encoder.hpp"
#include "msp/generator.hpp"
#include "msp/token_refiner.hpp"
#include "msp/topic_refiner.hpp"
#include "msp/user_refiner.hpp"

namespace msp {

/// Switches for the ablation variants. Everything on is the full model.
struct Ablations {
  bool user_refiner = true;    // off: k_u users drawn at random
  bool topic_refiner = true;   // off: no topic filtering
  bool token_refiner = true;   // off: the k_p most recent tokens
  bool sim_profile = true;
  bool per_profile = true;
  bool joint_training = true;  // off: the refiner is never updated
  bool profile = true;         // off: both profiles empty, no refiner steps
  bool bm25 = false;           // BM25 response retrieval instead of the refiners

  /// Accepts the names user-refiner, topic-refiner, token-refiner,
  /// sim-profile, per-profile, joint-training, profile, bm25-baseline.
  void disable(const std::string& name);
  static Ablations parse(std::span<const std::string> names);
  /// Comma-separated list of what is switched off; "none" for the full model.
  std::string describe() const;
  bool trains_refiner() const { return joint_training && profile && !bm25; }
};

/// Every trainable component over one parameter store.
class MspModel {
 public:
  MspModel(const RunConfig& config, std::size_t vocab_size, std::uint64_t seed);

  ParameterStore& store() { return *store_; }
  const ParameterStore& store() const { return *store_; }

  const TransformerEncoder& encoder() const { return *encoder_; }
  const TokenRefiner& refiner() const { return *refiner_; }
  const MatchingHead& head() const { return *head_; }
  const Generator& generator() const { return *generator_; }
  /// Generator for empty-profile inputs: a separate model when configured, else the main one.
  const Generator& plain_generator() const { return generator0_ ? *generator0_ : *generator_; }
  bool has_plain_generator() const { return generator0_ != nullptr; }

  static const std::vector<std::string>& refiner_prefixes();
  /// Generator parameters, plus the encoder token table when it is shared.
  const std::vector<std::string>& generator_prefixes() const { return generator_group_; }
  static const std::vector<std::string>& plain_generator_prefixes();
  /// Encoder parameters no optimizer touches.
  const std::vector<std::string>& frozen_encoder_prefixes() const { return frozen_encoder_; }
  bool shares_embeddings() const { return generator_group_.size() > 1; }

 private:
  std::unique_ptr<ParameterStore> store_;
  std::unique_ptr<TransformerEncoder> encoder_;
  std::unique_ptr<TokenRefiner> refiner_;
  std::unique_ptr<MatchingHead> head_;
  std::unique_ptr<Generator> generator_;
  std::unique_ptr<Generator> generator0_;
  std::vector<std::string> generator_group_;
  std::vector<std::string> frozen_encoder_;
};

/// Okapi BM25 over tokenised documents.
class Bm25 {
 public:
  Bm25(std::span<const std::vector<TokenId>> documents, double k1, double b);

  double score(std::span<const TokenId> query, std::size_t doc) const;
  /// The `top` best of `candidates`; ties keep the candidates' order.
  std::vector<std::size_t> rank(std::span<const TokenId> query, std::span<const std::size_t> candidates,
                                std::size_t top) const;

 private:
  double k1_;
  double b_;
  double avg_len_ = 0.0;
  std::vector<std::size_t> lengths_;
  std::vector<std::map<TokenId, std::size_t>> tf_;
  std::map<TokenId, std::size_t> df_;
};

/// Profiles and generator input for one query.
struct Extraction {
  std::vector<std::size_t> per_pairs;  // candidate pairs after the user and topic stages
  std::vector<std::size_t> sim_pairs;
  ProfileTokens per;
  ProfileTokens sim;
  GenerationInput input;
  /// Tokens of the unselected concatenation: every candidate response of the
  /// current and similar users' histories, the query, and BOS.
  std::size_t full_history_tokens = 0;
};

/// A query to personalise: who answers it, what it says, and the time cut.
struct ProfileRequest {
  std::optional<std::size_t> user;  // index into Corpus::users; none for an unknown user
  std::vector<TokenId> query;
  std::int64_t before_ts = 0;        // only pairs strictly earlier are visible
  std::optional<std::size_t> pair;   // set when the query is a corpus pair (reuses caches)
};

/// User -> topic -> token refinement over a corpus, with the frozen parts
/// (sentence embeddings, user index, topic assignments, encoder states)
/// computed once.
class ProfilePipeline {
 public:
  /// Trains the topic classifier on the training-split queries unless `classifier`
  /// is given or refiner.topic_model names a saved one.
  ProfilePipeline(const RunConfig& config, const Corpus& corpus, const Split& split, const MspModel& model,
                  Ablations ablations, std::optional<TopicClassifier> classifier = std::nullopt);

  Extraction extract(const ProfileRequest& request, std::size_t k_p) const;
  Extraction extract(const TrainingTriplet& triplet, std::size_t k_p) const;
  ProfileRequest request_for(const TrainingTriplet& triplet) const;

  /// The user's visible history after topic filtering (with recency fallback), ascending time.
  std::vector<std::size_t> per_candidates(const ProfileRequest& request, int query_topic) const;
  std::vector<std::size_t> sim_candidates(const ProfileRequest& request, int query_topic) const;

  int query_topic(const ProfileRequest& request) const;
  /// Encoder states of corpus pairs, computed on first use and kept until invalidate_states().
  const Tensor& query_states(std::size_t pair) const;
  const Tensor& response_states(std::size_t pair) const;
  void ensure_states(std::span<const std::size_t> query_pairs, std::span<const std::size_t> response_pairs) const;
  /// Drop cached encoder states; required after the encoder changes.
  void invalidate_states() const;
  Tensor encode(std::span<const TokenId> ids) const;

  const std::vector<std::string>& similar_users(std::size_t user) const { return similar_.at(user); }
  const UserSnapshot& snapshot() const { return snapshot_; }
  const TopicClassifier& classifier() const { return *classifier_; }
  const std::vector<int>& pair_topics() const { return pair_topic_; }
  const SentenceEmbedder& embedder() const { return *embedder_; }
  const PairEmbeddings& embeddings() const { return embeddings_; }
  const Ablations& ablations() const { return ablations_; }
  double topic_train_accuracy() const { return topic_train_accuracy_; }
  const std::string& topic_label_source() const { return topic_label_source_; }

 private:
  std::vector<std::size_t> visible(std::size_t user, std::int64_t before_ts) const;
  ProfileTokens select(const Tensor& query_states, std::span<const std::size_t> pairs, std::size_t k_p,
                       ProfileSource source) const;
  ProfileTokens select_bm25(std::span<const TokenId> query, std::span<const std::size_t> pairs, std::size_t k_p,
                            ProfileSource source) const;

  const RunConfig* config_;
  const Corpus* corpus_;
  const MspModel* model_;
  Ablations ablations_;
  std::unique_ptr<SentenceEmbedder> embedder_;
  PairEmbeddings embeddings_;
  UserSnapshot snapshot_;
  std::vector<std::vector<std::string>> similar_;  // per corpus user
  std::optional<TopicClassifier> classifier_;
  std::vector<int> pair_topic_;
  double topic_train_accuracy_ = 0.0;
  std::string topic_label_source_;
  mutable std::vector<Tensor> query_states_;
  mutable std::vector<Tensor> response_states_;
  std::unique_ptr<Bm25> bm25_;
};

/// Sentence embedding that tolerates sentences made only of ignored tokens (zero vector).
std::vector<double> embed_or_zero(const SentenceEmbedder& embedder, std::span<const TokenId> ids);

/// The embedder named by model.sentence_embedder; bow_dim 0 selects the identity projection.
std::unique_ptr<SentenceEmbedder> make_sentence_embedder(const RunConfig& config, const Vocabulary& vocab,
                                                         const TransformerEncoder& encoder);

/// Topic labels for the training queries: corpus topics when every pair has
/// one (and topic_labels is auto or corpus), k-means otherwise. `source`
/// receives "corpus" or "kmeans".
std::vector<int> topic_labels_for(const RunConfig& config, const Corpus& corpus, std::span<const std::size_t> pairs,
                                  const PairEmbeddings& embeddings, std::string* source);

/// Trains a classifier on the training-split queries.
TopicClassifier train_topics(const RunConfig& config, const Corpus& corpus, const Split& split,
                             const PairEmbeddings& embeddings, double* train_accuracy = nullptr,
                             std::string* label_source = nullptr, std::vector<double>* epoch_loss = nullptr);

}  // namespace msp
