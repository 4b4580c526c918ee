#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "msp/error.hpp"
#include "msp/topic_refiner.hpp"

namespace msp {
namespace {

// Three well-separated Gaussian blobs in 4 dimensions.
void blobs(std::size_t n, std::uint64_t seed, std::vector<std::vector<double>>& x, std::vector<int>& y) {
  Rng rng(seed);
  const std::vector<std::vector<double>> centre{{3, 0, 0, 0}, {0, 3, 0, 0}, {0, 0, 3, 0}};
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 3);
    std::vector<double> v(4);
    for (std::size_t j = 0; j < 4; ++j) v[j] = centre[label][j] + 0.3 * rng.normal();
    x.push_back(v);
    y.push_back(label);
  }
}

TEST(TopicClassifier, ZeroWeightsGiveArgmaxZero) {
  Rng rng(1);
  TopicClassifier cls(4, 3, 8, rng);
  for (const auto& [name, t] : cls.params().all()) {
    auto& p = cls.params().get(name);
    std::fill(p.mutable_data().begin(), p.mutable_data().end(), 0.0);
  }
  for (const auto& v : {std::vector<double>{1, 2, 3, 4}, std::vector<double>{-5, 0, 0, 9}}) {
    EXPECT_EQ(cls.classify(v).argmax, 0);
  }
}

TEST(TopicClassifier, Deterministic) {
  Rng rng(2);
  const TopicClassifier cls(4, 3, 8, rng);
  const std::vector<double> v{0.5, -1, 2, 0};
  EXPECT_EQ(cls.classify(v).logits, cls.classify(v).logits);
}

TEST(TopicClassifier, EmptyQueryIsContractError) {
  Rng rng(2);
  const TopicClassifier cls(30, 3, 8, rng);
  const auto emb = BagOfWordsEmbedder::identity(30);
  EXPECT_THROW(cls.classify(std::vector<TokenId>{}, emb), ContractError);
}

TEST(TopicClassifier, ArgmaxLowestTieBreak) {
  EXPECT_EQ(argmax_lowest(std::vector<double>{1, 3, 3}), 1);
  EXPECT_EQ(argmax_lowest(std::vector<double>{0, 0, 0}), 0);
}

TEST(TopicTraining, SeparableThreeTopicsReachLowLoss) {
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  blobs(200, 5, x, y);
  Rng rng(9);
  TopicClassifier cls(4, 3, 16, rng);
  const auto report = train_topic_classifier(cls, x, y, {.epochs = 200, .batch_size = 32, .lr = 1e-2, .seed = 3});
  ASSERT_EQ(report.epoch_loss.size(), 200u);
  EXPECT_LT(report.epoch_loss.back(), 0.1);
  std::vector<std::vector<double>> hx;
  std::vector<int> hy;
  blobs(90, 77, hx, hy);
  EXPECT_GE(topic_accuracy(cls, hx, hy), 0.95);
}

TEST(TopicTraining, LabelPermutationKeepsAccuracy) {
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  blobs(120, 5, x, y);
  std::vector<int> permuted(y.size());
  const int perm[3] = {2, 0, 1};
  std::transform(y.begin(), y.end(), permuted.begin(), [&](int l) { return perm[l]; });
  const TopicTrainingConfig cfg{.epochs = 60, .batch_size = 16, .lr = 1e-2, .seed = 3};
  Rng r1(9);
  TopicClassifier a(4, 3, 16, r1);
  Rng r2(9);
  TopicClassifier b(4, 3, 16, r2);
  train_topic_classifier(a, x, y, cfg);
  train_topic_classifier(b, x, permuted, cfg);
  EXPECT_EQ(topic_accuracy(a, x, y), topic_accuracy(b, x, permuted));
}

TEST(TopicTraining, DegenerateLabelsAreContractError) {
  std::vector<std::vector<double>> x{{1, 0, 0, 0}, {0, 1, 0, 0}};
  std::vector<int> y{1, 1};
  Rng rng(1);
  TopicClassifier cls(4, 3, 8, rng);
  EXPECT_THROW(train_topic_classifier(cls, x, y, {}), ContractError);
}

TEST(TopicClassifier, SaveLoadKeepsLogits) {
  Rng rng(4);
  const TopicClassifier cls(4, 3, 8, rng);
  const auto path = std::filesystem::temp_directory_path() / "msp_topic_test.bin";
  cls.save(path);
  const auto back = TopicClassifier::load(path);
  std::filesystem::remove(path);
  const std::vector<double> v{0.1, 0.2, -0.3, 1};
  EXPECT_EQ(cls.classify(v).logits, back.classify(v).logits);
}

TEST(KMeans, RecoversBlobs) {
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  blobs(60, 8, x, y);
  Rng rng(2);
  const auto labels = kmeans_labels(x, 3, rng);
  // same partition up to relabeling
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j) EXPECT_EQ(labels[i] == labels[j], y[i] == y[j]);
}

TEST(FilterHistory, AllOnTopicKeepsEverything) {
  const std::vector<int> topic{1, 1, 1};
  const std::vector<std::size_t> h{0, 1, 2};
  EXPECT_EQ(filter_history(h, topic, 1), h);
}

TEST(FilterHistory, NoneOnTopicIsEmpty) {
  const std::vector<int> topic{0, 0, 0};
  const std::vector<std::size_t> h{0, 1, 2};
  EXPECT_TRUE(filter_history(h, topic, 1).empty());
  EXPECT_EQ(filter_history_or_recent(h, topic, 1, 2), (std::vector<std::size_t>{1, 2}));
}

TEST(FilterHistory, MixedFivePairsKeepExactlyMatching) {
  enum { kMusic = 0, kSport = 1 };
  const std::vector<int> topic{kMusic, kSport, kSport, kMusic, kMusic};
  const std::vector<std::size_t> h{4, 0, 2, 3, 1};
  EXPECT_EQ(filter_history(h, topic, kMusic), (std::vector<std::size_t>{4, 0, 3}));
}

TEST(FilterHistory, IdempotentOrderPreservingAndExact) {
  Rng rng(12);
  for (int inst = 0; inst < 50; ++inst) {
    std::vector<int> topic(20);
    for (int& t : topic) t = static_cast<int>(rng.below(4));
    std::vector<std::size_t> h(20);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = i;
    rng.shuffle(h);
    h.resize(rng.below(20));
    const int q = static_cast<int>(rng.below(4));
    const auto once = filter_history(h, topic, q);
    EXPECT_EQ(filter_history(once, topic, q), once);
    std::vector<std::size_t> want;
    for (std::size_t p : h)
      if (topic[p] == q) want.push_back(p);
    EXPECT_EQ(once, want);
  }
}

}  // namespace
}  // namespace msp
