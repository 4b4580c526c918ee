#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "msp/error.hpp"
#include "msp/token_refiner.hpp"

namespace msp {
namespace {

Tensor random_states(std::size_t rows, std::size_t d, Rng& rng) {
  std::vector<double> v(rows * d);
  for (double& x : v) x = rng.normal();
  return Tensor::matrix(rows, d, v);
}

TEST(CrossAttention, ShapeAndRowStochastic) {
  ParameterStore store;
  Rng rng(1);
  const TokenRefiner tr(store, "tr", 6, rng);
  const auto map = tr.attend(random_states(4, 6, rng), random_states(7, 6, rng));
  EXPECT_EQ(map.a.shape(), (Shape{4, 7}));
  EXPECT_EQ(map.v.shape(), (Shape{7, 6}));
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) s += map.a.at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(CrossAttention, ZeroProjectionsGiveUniform) {
  ParameterStore store;
  Rng rng(1);
  const TokenRefiner tr(store, "tr", 5, rng);
  for (const char* n : {"tr.wq", "tr.wk"}) {
    auto d = store.get(n).mutable_data();
    std::fill(d.begin(), d.end(), 0.0);
  }
  const auto map = tr.attend(random_states(3, 5, rng), random_states(7, 5, rng));
  for (double x : map.a.data()) EXPECT_DOUBLE_EQ(x, 1.0 / 7.0);
}

TEST(CrossAttention, OneDimensionalHandCase) {
  ParameterStore store;
  Rng rng(1);
  const TokenRefiner tr(store, "tr", 1, rng);
  for (const char* n : {"tr.wq", "tr.wk", "tr.wv"}) store.get(n).mutable_data()[0] = 1.0;
  const auto map = tr.attend(Tensor::matrix(2, 1, {1, 2}), Tensor::matrix(2, 1, {1, -1}));
  // row i: softmax(q_i * [1, -1])
  const auto soft = [](double z) { return 1.0 / (1.0 + std::exp(-2.0 * z)); };
  EXPECT_NEAR(map.a.at(0, 0), soft(1.0), 1e-9);
  EXPECT_NEAR(map.a.at(0, 1), 1.0 - soft(1.0), 1e-9);
  EXPECT_NEAR(map.a.at(1, 0), soft(2.0), 1e-9);
  EXPECT_NEAR(map.a.at(1, 1), 1.0 - soft(2.0), 1e-9);
}

TEST(CrossAttention, EmptySideIsContractError) {
  ParameterStore store;
  Rng rng(1);
  const TokenRefiner tr(store, "tr", 4, rng);
  EXPECT_THROW(tr.attend(Tensor::zeros({0, 4}), random_states(2, 4, rng)), ContractError);
  EXPECT_THROW(tr.attend(random_states(2, 4, rng), Tensor::zeros({0, 4})), ContractError);
}

TEST(CrossAttention, SegmentsMatchSeparateCalls) {
  ParameterStore store;
  Rng rng(2);
  const TokenRefiner tr(store, "tr", 4, rng);
  const Tensor q = random_states(3, 4, rng);
  const Tensor r = random_states(5, 4, rng);
  const std::vector<Segment> segs{{0, 2}, {2, 3}};
  const auto maps = tr.attend_all(q, r, segs);
  const auto second = tr.attend(q, slice_rows(r, 2, 5));
  ASSERT_EQ(maps.size(), 2u);
  for (std::size_t i = 0; i < second.a.numel(); ++i) EXPECT_NEAR(maps[1].a.data()[i], second.a.data()[i], 1e-12);
}

TEST(SelectProfile, HandArgsort) {
  const std::vector<double> scores{0.9, 0.1, 0.5};
  const std::vector<TokenId> ids{10, 11, 12};
  const auto p = select_profile(scores, ids, 2, ProfileSource::Cur);
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p.tokens[0].position, 0u);
  EXPECT_EQ(p.tokens[1].position, 2u);
  EXPECT_EQ(p.ids(), (std::vector<TokenId>{10, 12}));
}

TEST(SelectProfile, SaturationReturnsAllSorted) {
  const std::vector<double> scores{0.2, 0.7, 0.2, 0.4};
  const std::vector<TokenId> ids{5, 6, 7, 8};
  const auto p = select_profile(scores, ids, 10, ProfileSource::Sim);
  EXPECT_EQ(p.ids(), (std::vector<TokenId>{6, 8, 5, 7}));
  EXPECT_EQ(p.source, ProfileSource::Sim);
  EXPECT_THROW(select_profile(scores, ids, 0, ProfileSource::Sim), ContractError);
}

TEST(SelectProfile, MatchesBruteForceOn100Instances) {
  Rng rng(31);
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<double> scores(n);
    for (double& s : scores) s = static_cast<double>(rng.below(10)) / 10.0;
    std::vector<TokenId> ids(n);
    for (auto& t : ids) t = static_cast<TokenId>(rng.below(100));
    const std::size_t k = 1 + rng.below(n + 3);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    order.resize(std::min(k, n));
    const auto got = select_profile(scores, ids, k, ProfileSource::Cur);
    ASSERT_EQ(got.size(), order.size());
    for (std::size_t i = 0; i < order.size(); ++i) EXPECT_EQ(got.tokens[i].position, order[i]);
  }
}

TEST(SelectProfile, ConcatenatesColumnMaximaAcrossResponses) {
  const Tensor a1 = Tensor::matrix(2, 2, {0.1, 0.9, 0.6, 0.4});
  const Tensor a2 = Tensor::matrix(2, 3, {0.7, 0.2, 0.1, 0.2, 0.3, 0.5});
  EXPECT_EQ(column_max(a1), (std::vector<double>{0.6, 0.9}));
  const std::vector<Tensor> maps{a1, a2};
  const std::vector<std::vector<TokenId>> rs{{20, 21}, {30, 31, 32}};
  const auto p = select_profile(maps, rs, 3, ProfileSource::Cur);
  EXPECT_EQ(p.ids(), (std::vector<TokenId>{21, 30, 20}));
  EXPECT_EQ(p.tokens[1].position, 2u);
}

TEST(DumpProfile, OneLinePerToken) {
  const std::vector<std::string> texts{"jazz"};
  const Vocabulary vocab = Vocabulary::build(texts);
  const TokenId jazz = vocab.id("jazz");
  ProfileTokens p;
  p.source = ProfileSource::Sim;
  p.tokens.push_back({jazz, 0.5, 3});
  EXPECT_EQ(dump_profile(p, vocab), "1, jazz, 0.500000, sim\n");
}

AttentionMap random_map(std::size_t q, std::size_t r, std::size_t d, Rng& rng) {
  std::vector<double> a(q * r);
  for (std::size_t i = 0; i < q; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < r; ++j) s += (a[i * r + j] = rng.uniform(0.1, 1.0));
    for (std::size_t j = 0; j < r; ++j) a[i * r + j] /= s;
  }
  return {Tensor::matrix(q, r, a), random_states(r, d, rng)};
}

TEST(MatchingHead, ScoreInOpenUnitIntervalAndDeterministic) {
  ParameterStore store;
  Rng rng(5);
  const MatchingHead head(store, "mh", 6, {}, rng);
  for (std::size_t q : {1u, 2u, 5u, 9u}) {
    const auto map = random_map(q, 4, 6, rng);
    const double s = head.score(map);
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 1.0);
    EXPECT_EQ(s, head.score(map));
  }
}

TEST(PseudoLabel, WorkedThreeWordExample) {
  // vocab {a, b, c} as ids {0, 1, 2}
  const std::vector<TokenId> y{0, 1};
  const Tensor uniform = Tensor::full({2, 3}, 1.0 / 3.0);
  const std::vector<TokenId> r{0};
  const auto g = pseudo_label(y, uniform, r, 0.1);
  EXPECT_NEAR(g.g_soft, 1.0 / 3.0, 1e-15);  // (1 - fl(1/3)) / 2 is one ulp off fl(1/3)
  EXPECT_EQ(g.g, 1);
}

TEST(PseudoLabel, ExactPredictionGivesZero) {
  const std::vector<TokenId> y{0, 2};
  const Tensor onehot = Tensor::matrix(2, 3, {1, 0, 0, 0, 0, 1});
  const std::vector<TokenId> r{0, 1, 2};
  const auto g = pseudo_label(y, onehot, r, 1e-6);
  EXPECT_EQ(g.g_soft, 0.0);
  EXPECT_EQ(g.g, 0);
}

TEST(PseudoLabel, NoOverlapGivesZero) {
  const std::vector<TokenId> y{0, 1};
  const Tensor uniform = Tensor::full({2, 3}, 1.0 / 3.0);
  const std::vector<TokenId> r{2};
  const auto g = pseudo_label(y, uniform, r, 1e-6);
  EXPECT_EQ(g.g_soft, 0.0);
  EXPECT_EQ(g.g, 0);
}

TEST(PseudoLabel, LengthMismatchIsContractError) {
  const std::vector<TokenId> y{0, 1, 2};
  EXPECT_THROW(pseudo_label(y, Tensor::full({2, 3}, 1.0 / 3.0), std::vector<TokenId>{0}, 0.1), ContractError);
  EXPECT_THROW(pseudo_label(std::vector<TokenId>{}, Tensor::full({0, 3}, 0.0), std::vector<TokenId>{0}, 0.1),
               ContractError);
}

TEST(PseudoLabel, AddingUnderweightedMatchNeverLowersScore) {
  Rng rng(8);
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t v = 6;
    const std::size_t len = 1 + rng.below(5);
    std::vector<TokenId> y(len);
    for (auto& t : y) t = static_cast<TokenId>(rng.below(v));
    std::vector<double> probs(len * v);
    for (std::size_t i = 0; i < len; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < v; ++j) s += (probs[i * v + j] = rng.uniform());
      for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= s;
    }
    const Tensor p = Tensor::matrix(len, v, probs);
    std::vector<TokenId> r{static_cast<TokenId>(rng.below(v))};
    const double before = pseudo_label(y, p, r, 0.1).g_soft;
    r.push_back(y[rng.below(len)]);
    EXPECT_GE(pseudo_label(y, p, r, 0.1).g_soft, before);
  }
}

TEST(MatchingLoss, MidpointIsLn2) {
  const std::vector<double> g{0.0};
  EXPECT_NEAR(matching_loss(Tensor::from({1}, {0.0}), g).item(), std::log(2.0), 1e-15);
}

TEST(MatchingLoss, ConfidentCorrectIsNearZero) {
  const std::vector<double> g{1.0};
  const double eps = 1e-6;
  const double logit = std::log((1.0 - eps) / eps);
  EXPECT_NEAR(matching_loss(Tensor::from({1}, {logit}), g).item(), eps, 1e-9);
}

TEST(MatchingLoss, GradientIsScoreMinusLabel) {
  for (double label : {0.0, 1.0}) {
    for (double z : {-2.0, 0.3, 1.7}) {
      Tensor logit = Tensor::from({1}, {z}, true);
      const std::vector<double> g{label};
      matching_loss(logit, g).backward();
      const double ghat = 1.0 / (1.0 + std::exp(-z));
      EXPECT_NEAR(logit.grad()[0], ghat - label, 1e-12);
      const double h = 1e-6;
      const double fd = (matching_loss(Tensor::from({1}, {z + h}), g).item() -
                         matching_loss(Tensor::from({1}, {z - h}), g).item()) / (2 * h);
      EXPECT_NEAR(fd, ghat - label, 1e-8);
    }
  }
}

}  // namespace
}  // namespace msp
