#include "msp/topic_refiner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "msp/error.hpp"
#include "msp/layers.hpp"
#include "msp/optimizer.hpp"

namespace msp {

int argmax_lowest(std::span<const double> values) {
  if (values.empty()) throw ContractError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return static_cast<int>(best);
}

TopicClassifier::TopicClassifier(std::size_t input_dim, std::size_t topics, std::size_t hidden, Rng& rng)
    : input_dim_(input_dim), topics_(topics), hidden_(hidden) {
  if (topics < 2) throw ContractError("topic classifier needs at least 2 topics");
  if (input_dim == 0 || hidden == 0) throw ContractError("topic classifier needs positive input and hidden widths");
  init_linear(params_, "topic.hidden", input_dim, hidden, rng);
  init_linear(params_, "topic.out", hidden, topics, rng);
}

Tensor TopicClassifier::forward(const Tensor& x) const {
  return linear(params_, "topic.out", tanh(linear(params_, "topic.hidden", x)));
}

TopicDistribution TopicClassifier::classify(std::span<const double> embedding) const {
  if (embedding.size() != input_dim_) {
    throw DimensionError("topic classifier expects " + std::to_string(input_dim_) + " inputs, got " +
                         std::to_string(embedding.size()));
  }
  NoGradGuard no_grad;
  auto logits = forward(Tensor::matrix(1, input_dim_, {embedding.begin(), embedding.end()}));
  TopicDistribution out;
  out.logits = logits.to_vector();
  out.argmax = argmax_lowest(out.logits);
  return out;
}

TopicDistribution TopicClassifier::classify(std::span<const TokenId> query, const SentenceEmbedder& embedder) const {
  if (query.empty()) throw ContractError("classify: empty query");
  return classify(embedder.embed(query));
}

void TopicClassifier::save(const std::filesystem::path& path) const {
  ParamContainer c;
  c.header["input_dim"] = std::to_string(input_dim_);
  c.header["topics"] = std::to_string(topics_);
  c.header["hidden"] = std::to_string(hidden_);
  c.put_all(params_);
  c.write(path);
}

TopicClassifier TopicClassifier::load(const std::filesystem::path& path) {
  const auto c = ParamContainer::read(path);
  const auto field = [&](const char* key) -> std::size_t {
    auto it = c.header.find(key);
    if (it == c.header.end()) throw DataError("topic classifier '" + path.string() + "' lacks header " + key);
    return std::stoull(it->second);
  };
  Rng rng(0);
  TopicClassifier clf(field("input_dim"), field("topics"), field("hidden"), rng);
  c.load_into(clf.params_);
  return clf;
}

TopicTrainingReport train_topic_classifier(TopicClassifier& classifier, std::span<const std::vector<double>> inputs,
                                           std::span<const int> labels, const TopicTrainingConfig& config) {
  if (inputs.size() != labels.size()) throw ContractError("topic training: inputs and labels differ in length");
  if (inputs.empty()) throw ContractError("topic training: no labeled queries");
  std::set<int> distinct(labels.begin(), labels.end());
  for (int l : distinct)
    if (l < 0 || static_cast<std::size_t>(l) >= classifier.topics()) {
      throw IndexError("topic label " + std::to_string(l) + " outside [0, " + std::to_string(classifier.topics()) + ")");
    }
  if (distinct.size() < classifier.topics()) {
    throw ContractError("topic training: " + std::to_string(distinct.size()) + " distinct labels for " +
                        std::to_string(classifier.topics()) + " topics");
  }
  if (config.batch_size == 0) throw ContractError("topic training: batch size must be positive");
  const std::size_t dim = classifier.input_dim();
  for (const auto& x : inputs)
    if (x.size() != dim) throw DimensionError("topic training input has wrong dimension");

  Rng rng(config.seed);
  Optimizer opt({.kind = OptimizerKind::Adam, .lr = config.lr}, classifier.params().select());
  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), 0);
  TopicTrainingReport report;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<double> xs;
      std::vector<int> ys;
      xs.reserve((end - start) * dim);
      for (std::size_t i = start; i < end; ++i) {
        xs.insert(xs.end(), inputs[order[i]].begin(), inputs[order[i]].end());
        ys.push_back(labels[order[i]]);
      }
      classifier.params().zero_grad();
      auto loss = cross_entropy(classifier.forward(Tensor::matrix(end - start, dim, std::move(xs))), ys);
      loss.backward();
      opt.step();
      total += loss.item() * static_cast<double>(end - start);
    }
    report.epoch_loss.push_back(total / static_cast<double>(order.size()));
  }
  report.train_accuracy = topic_accuracy(classifier, inputs, labels);
  return report;
}

double topic_accuracy(const TopicClassifier& classifier, std::span<const std::vector<double>> inputs,
                      std::span<const int> labels) {
  if (inputs.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    if (classifier.classify(inputs[i]).argmax == labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(inputs.size());
}

std::vector<int> kmeans_labels(std::span<const std::vector<double>> points, std::size_t k, Rng& rng,
                               std::size_t iterations) {
  if (k == 0 || points.size() < k) throw ContractError("k-means needs at least k points");
  const std::size_t dim = points[0].size();
  const auto dist2 = [dim](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t j = 0; j < dim; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
    return s;
  };
  std::vector<std::vector<double>> centers{points[rng.below(points.size())]};
  std::vector<double> nearest(points.size(), std::numeric_limits<double>::infinity());
  while (centers.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      nearest[i] = std::min(nearest[i], dist2(points[i], centers.back()));
      total += nearest[i];
    }
    std::size_t pick = points.size() - 1;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      for (std::size_t i = 0; i < points.size(); ++i) {
        target -= nearest[i];
        if (target < 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.below(points.size());
    }
    centers.push_back(points[pick]);
  }
  std::vector<int> labels(points.size(), -1);
  for (std::size_t it = 0; it < iterations; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < points.size(); ++i) {
      int best = 0;
      double best_d = dist2(points[i], centers[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double d = dist2(points[i], centers[c]);
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(c);
        }
      }
      if (labels[i] != best) {
        labels[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
      const auto c = static_cast<std::size_t>(labels[i]);
      ++counts[c];
      for (std::size_t j = 0; j < dim; ++j) sums[c][j] += points[i][j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;  // keep an orphaned center where it is
      for (std::size_t j = 0; j < dim; ++j) centers[c][j] = sums[c][j] / static_cast<double>(counts[c]);
    }
  }
  return labels;
}

std::vector<std::size_t> filter_history(std::span<const std::size_t> history, std::span<const int> pair_topic,
                                        int query_topic) {
  std::vector<std::size_t> kept;
  for (std::size_t p : history) {
    if (p >= pair_topic.size()) throw IndexError("pair " + std::to_string(p) + " has no topic assignment");
    if (pair_topic[p] == query_topic) kept.push_back(p);
  }
  return kept;
}

std::vector<std::size_t> filter_history_or_recent(std::span<const std::size_t> history,
                                                  std::span<const int> pair_topic, int query_topic,
                                                  std::size_t fallback) {
  auto kept = filter_history(history, pair_topic, query_topic);
  if (kept.empty()) {
    const std::size_t n = std::min(fallback, history.size());
    kept.assign(history.end() - static_cast<std::ptrdiff_t>(n), history.end());
  }
  return kept;
}

}  // namespace msp
