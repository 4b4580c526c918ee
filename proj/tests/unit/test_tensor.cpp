#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "msp/error.hpp"
#include "msp/optimizer.hpp"
#include "msp/tensor.hpp"
#include "support/gradcheck.hpp"

namespace msp {
namespace {

using testing::grad_check;
using testing::random_tensor;

constexpr double kGradTol = 1e-4;
constexpr int kSeeds = 20;

TEST(Matmul, IdentityAndHandProduct) {
  auto id = Tensor::matrix(2, 2, {1, 0, 0, 1});
  auto b = Tensor::matrix(2, 2, {3, 4, 5, 6});
  EXPECT_EQ(matmul(id, b).to_vector(), (std::vector<double>{3, 4, 5, 6}));
  auto r = matmul(Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(2, 1, {3, 4}));
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(r.item(), 11.0);
}

TEST(Matmul, GradientOfSumWrtA) {
  auto a = Tensor::matrix(1, 2, {1, 2}, true);
  auto b = Tensor::matrix(2, 1, {3, 4});
  sum(matmul(a, b)).backward();
  EXPECT_EQ(std::vector<double>(a.grad().begin(), a.grad().end()), (std::vector<double>{3, 4}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2, 3)"), std::string::npos) << msg;
  }
}

TEST(Softmax, Examples) {
  auto u = softmax(Tensor::row({0, 0, 0}));
  for (double p : u.data()) EXPECT_DOUBLE_EQ(p, 1.0 / 3.0);
  auto big = softmax(Tensor::row({1000, 1000}));
  EXPECT_DOUBLE_EQ(big.at(0), 0.5);
  EXPECT_DOUBLE_EQ(big.at(1), 0.5);
  auto s = softmax(Tensor::row({1, 2}));
  EXPECT_NEAR(s.at(0), 0.2689, 1e-4);
  EXPECT_NEAR(s.at(1), 0.7311, 1e-4);
}

TEST(Softmax, RowsSumToOneOnRandomInputs) {
  Rng rng(3);
  for (int seed = 0; seed < 50; ++seed) {
    auto x = random_tensor({4, 7}, rng, 10.0);
    auto p = softmax(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GE(p.at(r, c), 0.0);
        EXPECT_LE(p.at(r, c), 1.0);
        total += p.at(r, c);
      }
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(Softmax, AxisZeroNormalisesColumns) {
  auto p = softmax(Tensor::matrix(2, 2, {0, 5, 0, 1}), 0);
  EXPECT_NEAR(p.at(0, 0) + p.at(1, 0), 1.0, 1e-12);
  EXPECT_NEAR(p.at(0, 1) + p.at(1, 1), 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(p.at(0, 0), 0.5);
}

TEST(CrossEntropy, Examples) {
  std::vector<int> t1{1};
  EXPECT_NEAR(cross_entropy(Tensor::matrix(1, 2, {0.0, std::log(3.0)}), t1).item(), std::log(4.0 / 3.0), 1e-9);
  std::vector<int> t0{0, 2};
  EXPECT_NEAR(cross_entropy(Tensor::zeros({2, 5}), t0).item(), std::log(5.0), 1e-12);
  EXPECT_NEAR(cross_entropy(Tensor::matrix(1, 3, {0, 800, 0}), t1).item(), 0.0, 1e-12);
}

TEST(CrossEntropy, TargetOutOfRangeIsIndexError) {
  std::vector<int> t{5};
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 5}), t), IndexError);
}

TEST(CrossEntropy, IgnoredPositionsExcluded) {
  std::vector<int> t{0, 1};
  auto logits = Tensor::matrix(2, 2, {0, 0, 0, 50});
  EXPECT_NEAR(cross_entropy(logits, t, 1).item(), std::log(2.0), 1e-12);
}

TEST(Backward, Examples) {
  auto w = Tensor::row({0.3, -1, 4}, true);
  sum(w).backward();
  EXPECT_EQ(std::vector<double>(w.grad().begin(), w.grad().end()), (std::vector<double>{1, 1, 1}));

  auto v = Tensor::row({1, 2}, true);
  sum(mul(v, v)).backward();
  EXPECT_EQ(std::vector<double>(v.grad().begin(), v.grad().end()), (std::vector<double>{2, 4}));
}

TEST(Backward, RepeatedCallsAccumulate) {
  auto w = Tensor::row({1, 2}, true);
  auto loss = sum(w);
  loss.backward();
  loss.backward();
  EXPECT_EQ(std::vector<double>(w.grad().begin(), w.grad().end()), (std::vector<double>{2, 2}));
}

TEST(Backward, NonScalarIsContractError) {
  auto w = Tensor::row({1, 2}, true);
  EXPECT_THROW(scale(w, 2.0).backward(), ContractError);
}

TEST(Backward, SharedSubexpressionMatchesUnshared) {
  Rng rng(11);
  auto a = random_tensor({3, 3}, rng);
  auto b = random_tensor({3, 3}, rng);
  auto shared_a = a.detach();
  shared_a.set_requires_grad(true);
  auto h = tanh(matmul(shared_a, b));
  sum(mul(h, h)).backward();

  auto unshared_a = a.detach();
  unshared_a.set_requires_grad(true);
  auto h1 = tanh(matmul(unshared_a, b));
  auto h2 = tanh(matmul(unshared_a, b));
  sum(mul(h1, h2)).backward();
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(shared_a.grad()[i], unshared_a.grad()[i], 1e-14);
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(5);
    auto x = random_tensor({4, 6}, rng);
    auto w = random_tensor({6, 6}, rng);
    w.set_requires_grad(true);
    auto y = layernorm(gelu(matmul(x, w)), Tensor::full({6}, 1.0), Tensor::zeros({6}));
    std::vector<int> t{0, 1, 2, 3};
    auto loss = cross_entropy(y, t);
    loss.backward();
    auto g = std::vector<double>(w.grad().begin(), w.grad().end());
    g.push_back(loss.item());
    return g;
  };
  EXPECT_EQ(run(), run());
}

TEST(NoGrad, GuardSuppressesRecording) {
  auto w = Tensor::row({1, 2}, true);
  NoGradGuard ng;
  auto y = sum(w);
  EXPECT_FALSE(y.requires_grad());
}

// ---------------------------------------------------------------------------
// Finite-difference checks, 20 seeds per op.
// ---------------------------------------------------------------------------

class GradCheck : public ::testing::TestWithParam<int> {};

TEST_P(GradCheck, Matmul) {
  Rng rng(GetParam());
  auto r = grad_check([](const auto& in) { return sum(tanh(matmul(in[0], in[1]))); },
                      {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST_P(GradCheck, MatmulNtAndTranspose) {
  Rng rng(GetParam());
  auto r = grad_check(
      [](const auto& in) { return sum(mul(matmul_nt(in[0], in[1]), transpose(matmul_nt(in[1], in[0])))); },
      {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST_P(GradCheck, Softmax) {
  Rng rng(GetParam());
  auto w = random_tensor({3, 5}, rng);
  auto r = grad_check([&](const auto& in) { return sum(mul(softmax(in[0]), w)); }, {random_tensor({3, 5}, rng, 2.0)});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
  auto r0 = grad_check([&](const auto& in) { return sum(mul(softmax(in[0], 0), w)); }, {random_tensor({3, 5}, rng)});
  EXPECT_LT(r0.max_rel_error, kGradTol) << r0.worst;
}

TEST_P(GradCheck, Layernorm) {
  Rng rng(GetParam());
  auto w = random_tensor({3, 6}, rng);
  auto r = grad_check([&](const auto& in) { return sum(mul(layernorm(in[0], in[1], in[2]), w)); },
                      {random_tensor({3, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST_P(GradCheck, CrossEntropy) {
  Rng rng(GetParam());
  std::vector<int> targets{0, 3, 2, 4};
  auto r = grad_check([&](const auto& in) { return cross_entropy(in[0], targets); }, {random_tensor({4, 5}, rng, 2.0)});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST_P(GradCheck, ElementwiseAndActivations) {
  Rng rng(GetParam());
  auto r = grad_check(
      [](const auto& in) {
        auto a = add_bias(sub(mul(in[0], in[1]), scale(in[1], 0.5)), in[2]);
        return mean(add(add(gelu(a), sigmoid(a)), add(tanh(a), relu(a))));
      },
      {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng), random_tensor({4}, rng)});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST_P(GradCheck, EmbeddingConcatSlice) {
  Rng rng(GetParam());
  std::vector<int> ids{2, 0, 2, 1};
  auto r = grad_check(
      [&](const auto& in) {
        auto e = embedding(in[0], ids);
        std::vector<Tensor> parts{slice_rows(e, 1, 3), in[1]};
        auto top = concat_rows(parts);
        auto side = reshape(slice_cols(e, 1, 3), {2, 4});
        return add(sum(tanh(matmul(top, transpose(e)))), sum(mul(side, side)));
      },
      {random_tensor({3, 3}, rng), random_tensor({1, 3}, rng)});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST_P(GradCheck, BceWithLogits) {
  Rng rng(GetParam());
  std::vector<double> targets{1.0, 0.0, 1.0};
  auto r = grad_check([&](const auto& in) { return bce_with_logits(in[0], targets); }, {random_tensor({3}, rng, 3.0)});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST_P(GradCheck, Conv2dAndMaxpool) {
  Rng rng(GetParam());
  auto r = grad_check(
      [](const auto& in) { return sum(tanh(maxpool2d(relu(conv2d(in[0], in[1], in[2])), 2))); },
      {random_tensor({2, 6, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
  EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
}

TEST_P(GradCheck, MultiHeadAttention) {
  Rng rng(GetParam());
  std::vector<Segment> segs{{0, 3}, {3, 4}};
  auto w = random_tensor({7, 4}, rng);
  for (bool causal : {false, true}) {
    auto r = grad_check(
        [&](const auto& in) { return sum(mul(multi_head_attention(in[0], in[1], in[2], 2, segs, causal), w)); },
        {random_tensor({7, 4}, rng), random_tensor({7, 4}, rng), random_tensor({7, 4}, rng)});
    EXPECT_LT(r.max_rel_error, kGradTol) << r.worst;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, GradCheck, ::testing::Range(0, kSeeds));

TEST(Attention, CausalMaskIgnoresFuture) {
  Rng rng(1);
  auto q = random_tensor({4, 4}, rng);
  auto k = random_tensor({4, 4}, rng);
  auto v = random_tensor({4, 4}, rng);
  std::vector<Segment> seg{{0, 4}};
  auto out1 = multi_head_attention(q, k, v, 2, seg, true);
  auto v2 = v.detach();
  for (std::size_t c = 0; c < 4; ++c) v2.mutable_data()[12 + c] += 5.0;
  auto out2 = multi_head_attention(q, k, v2, 2, seg, true);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(out1.data()[i], out2.data()[i]);
}

TEST(Attention, SegmentsAreIsolated) {
  Rng rng(2);
  auto x = random_tensor({5, 4}, rng);
  std::vector<Segment> both{{0, 2}, {2, 3}};
  std::vector<Segment> first{{0, 2}};
  auto packed = multi_head_attention(x, x, x, 1, both, false);
  auto head = slice_rows(x, 0, 2);
  auto alone = multi_head_attention(head, head, head, 1, first, false);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(packed.data()[i], alone.data()[i]);
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

TEST(Optimizer, AdamFirstStepHandDerivation) {
  auto w = Tensor::scalar(0.0, true);
  w.mutable_grad()[0] = 1.0;
  Optimizer opt({.kind = OptimizerKind::Adam, .lr = 0.1}, {{"w", w}});
  opt.step();
  // m_hat = 1, v_hat = 1 -> delta = -0.1 * 1 / (1 + 1e-8)
  EXPECT_NEAR(w.item(), -0.0999999, 1e-7);
  EXPECT_DOUBLE_EQ(w.item(), -0.1 / (1.0 + 1e-8));
  EXPECT_EQ(opt.step_count(), 1u);
  EXPECT_DOUBLE_EQ(w.grad()[0], 1.0);
}

TEST(Optimizer, ZeroGradLeavesParameter) {
  auto w = Tensor::row({0.5, -2.0}, true);
  w.zero_grad();
  Optimizer opt({.kind = OptimizerKind::Adam, .lr = 0.1}, {{"w", w}});
  opt.step();
  EXPECT_EQ(w.to_vector(), (std::vector<double>{0.5, -2.0}));
}

TEST(Optimizer, WarmupScalesLearningRate) {
  Optimizer opt({.kind = OptimizerKind::AdamWWarmup, .lr = 0.01, .warmup_steps = 100}, {});
  EXPECT_DOUBLE_EQ(opt.lr_at(1), 0.0001);
  EXPECT_DOUBLE_EQ(opt.lr_at(100), 0.01);
  EXPECT_DOUBLE_EQ(opt.lr_at(500), 0.01);
}

TEST(Optimizer, MissingGradNamesParameter) {
  auto w = Tensor::row({1.0}, true);
  Optimizer opt({}, {{"layer.weight", w}});
  try {
    opt.step();
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.weight"), std::string::npos);
  }
}

TEST(Optimizer, StateRoundTrip) {
  auto w = Tensor::row({1.0, 2.0}, true);
  w.mutable_grad()[0] = 0.5;
  w.mutable_grad()[1] = -1.0;
  Optimizer a({}, {{"w", w}});
  a.step();
  ParamContainer c;
  a.save_state(c, "opt.");
  Optimizer b({}, {{"w", w}});
  b.load_state(c, "opt.");
  EXPECT_EQ(b.step_count(), 1u);
  auto w_copy = w.to_vector();
  a.step();
  auto after_a = w.to_vector();
  w.mutable_data()[0] = w_copy[0];
  w.mutable_data()[1] = w_copy[1];
  b.step();
  EXPECT_EQ(w.to_vector(), after_a);
}

}  // namespace
}  // namespace msp
