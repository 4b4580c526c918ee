#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "msp/encoder.hpp"
#include "msp/params.hpp"
#include "msp/rng.hpp"

namespace msp {

struct TopicDistribution {
  std::vector<double> logits;
  int argmax = 0;
};

/// Index of the largest value; the lowest index wins ties.
int argmax_lowest(std::span<const double> values);

/// One-hidden-layer MLP from a sentence embedding to topic logits.
class TopicClassifier {
 public:
  TopicClassifier(std::size_t input_dim, std::size_t topics, std::size_t hidden, Rng& rng);

  std::size_t input_dim() const { return input_dim_; }
  std::size_t topics() const { return topics_; }
  std::size_t hidden() const { return hidden_; }

  /// Logits for a batch of embeddings, (n x input_dim) -> (n x topics).
  Tensor forward(const Tensor& x) const;

  TopicDistribution classify(std::span<const double> embedding) const;
  TopicDistribution classify(std::span<const TokenId> query, const SentenceEmbedder& embedder) const;

  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  void save(const std::filesystem::path& path) const;
  static TopicClassifier load(const std::filesystem::path& path);

 private:
  std::size_t input_dim_;
  std::size_t topics_;
  std::size_t hidden_;
  ParameterStore params_;
};

struct TopicTrainingConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  double lr = 1e-2;
  std::uint64_t seed = 1;
};

struct TopicTrainingReport {
  std::vector<double> epoch_loss;  // mean cross entropy per epoch
  double train_accuracy = 0.0;
};

/// Cross-entropy training with Adam on minibatches. Labels must cover every
/// one of the classifier's topics.
TopicTrainingReport train_topic_classifier(TopicClassifier& classifier, std::span<const std::vector<double>> inputs,
                                           std::span<const int> labels, const TopicTrainingConfig& config);

double topic_accuracy(const TopicClassifier& classifier, std::span<const std::vector<double>> inputs,
                      std::span<const int> labels);

/// Pseudo-topic labels for unlabeled queries: k-means (k-means++ seeding,
/// Lloyd iterations) over their embeddings.
std::vector<int> kmeans_labels(std::span<const std::vector<double>> points, std::size_t k, Rng& rng,
                               std::size_t iterations = 50);

/// Entries of `history` whose topic equals `query_topic`, order kept.
/// `pair_topic` maps a pair index to its argmax topic.
std::vector<std::size_t> filter_history(std::span<const std::size_t> history, std::span<const int> pair_topic,
                                        int query_topic);

/// filter_history, falling back to the `fallback` most recent entries when nothing survives.
std::vector<std::size_t> filter_history_or_recent(std::span<const std::size_t> history,
                                                  std::span<const int> pair_topic, int query_topic,
                                                  std::size_t fallback);

}  // namespace msp
