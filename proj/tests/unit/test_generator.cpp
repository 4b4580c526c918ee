#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "msp/error.hpp"
#include "msp/generator.hpp"
#include "support/reference_model.hpp"

namespace msp {
namespace {

GeneratorConfig small(std::size_t layers = 2, std::size_t heads = 2) {
  return {.vocab_size = 12, .d = 8, .heads = heads, .layers = layers, .ff = 16, .max_positions = 16,
          .shared_embedding = ""};
}

struct Fixture {
  ParameterStore store;
  Rng rng{3};
  Generator gen;
  explicit Fixture(GeneratorConfig cfg = small()) : gen(store, "gen", cfg, rng) {}
};

TEST(BuildInput, LengthAndLayout) {
  const std::vector<TokenId> sim{5, 6, 7};
  const std::vector<TokenId> per{8, 9, 10};
  const std::vector<TokenId> q{11, 5, 6, 7};
  const auto x = build_input(sim, per, q);
  EXPECT_EQ(x.size(), 11u);
  EXPECT_EQ(x.tokens.back(), kBos);
  EXPECT_EQ(x.tags.front(), SegmentTag::Sim);
  EXPECT_EQ(x.tags[3], SegmentTag::Per);
  EXPECT_EQ(x.tags[6], SegmentTag::Query);
}

TEST(BuildInput, EmptyProfilesGiveQueryAndBos) {
  const std::vector<TokenId> q{7, 8};
  const auto x = build_input({}, {}, q);
  EXPECT_EQ(x.tokens, (std::vector<TokenId>{7, 8, kBos}));
  EXPECT_THROW(build_input({}, {}, std::vector<TokenId>{}), ContractError);
}

TEST(BuildInput, SerializeRoundTrip) {
  const std::vector<TokenId> sim{5};
  const std::vector<TokenId> per{6, 9};
  const std::vector<TokenId> q{11};
  const auto x = build_input(sim, per, q);
  EXPECT_EQ(GenerationInput::parse(x.serialize()), x);
  EXPECT_THROW(GenerationInput::parse("s:1 z:2"), DataError);
}

TEST(Generator, DistributionsSumToOne) {
  Fixture f;
  const auto x = build_input(std::vector<TokenId>{5}, std::vector<TokenId>{6}, std::vector<TokenId>{7, 8});
  const std::vector<TokenId> y{9, 10, 11};
  const auto p = f.gen.distributions(x, y);
  ASSERT_EQ(p.shape(), (Shape{4, 12}));
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 12; ++j) s += p.at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Generator, CausalMask) {
  Fixture f;
  const auto x = build_input({}, {}, std::vector<TokenId>{7, 8});
  const auto a = f.gen.distributions(x, std::vector<TokenId>{9, 10, 11});
  const auto b = f.gen.distributions(x, std::vector<TokenId>{9, 5, 6});
  for (std::size_t j = 0; j < 12; ++j) {
    EXPECT_EQ(a.at(0, j), b.at(0, j));
    EXPECT_EQ(a.at(1, j), b.at(1, j));
  }
  EXPECT_NE(a.at(2, 0), b.at(2, 0));
}

TEST(Generator, MatchesHandComputedDecoder) {
  for (std::size_t heads : {1u, 2u}) {
    Fixture f(small(1, heads));
    const auto x = build_input({}, std::vector<TokenId>{6}, std::vector<TokenId>{7});
    const std::vector<TokenId> y{9, 10};
    const auto got = f.gen.teacher_forced_logits(std::span<const GenerationInput>(&x, 1),
                                                 std::span<const std::vector<TokenId>>(&y, 1));
    std::vector<int> ids(x.tokens.begin(), x.tokens.end());
    std::vector<int> tags;
    for (auto t : x.tags) tags.push_back(static_cast<int>(t));
    for (auto t : y) {
      ids.push_back(t);
      tags.push_back(static_cast<int>(SegmentTag::Response));
    }
    const auto want = testing::ref_decoder_logits(f.store, "gen", "gen.tok", ids, tags, 1, heads);
    ASSERT_EQ(got.rows(), y.size() + 1);
    for (std::size_t i = 0; i < got.rows(); ++i)
      for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(got.at(i, j), want[x.size() - 1 + i][j], 1e-9);
  }
}

TEST(Generator, OverlongInputIsContractError) {
  Fixture f;
  const std::vector<TokenId> q(15, 7);
  const auto x = build_input({}, {}, q);
  try {
    f.gen.distributions(x, std::vector<TokenId>{9});
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("16"), std::string::npos);
  }
}

TEST(Generator, IncrementalLogitsMatchFullPass) {
  Fixture f;
  const auto x = build_input(std::vector<TokenId>{5, 6}, std::vector<TokenId>{7}, std::vector<TokenId>{8, 9});
  const std::vector<TokenId> y{10, 11, 6};
  const auto full = f.gen.teacher_forced_logits(std::span<const GenerationInput>(&x, 1),
                                                std::span<const std::vector<TokenId>>(&y, 1));
  for (std::size_t t = 0; t <= y.size(); ++t) {
    const auto step = f.gen.next_logits(x, std::span<const TokenId>(y.data(), t));
    for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(step[j], full.at(t, j), 1e-10);
  }
}

TEST(Generator, BatchEqualsSingleExamples) {
  Fixture f;
  const std::vector<GenerationInput> xs{build_input({}, {}, std::vector<TokenId>{8, 9}),
                                        build_input(std::vector<TokenId>{5}, {}, std::vector<TokenId>{7})};
  const std::vector<std::vector<TokenId>> ys{{10}, {11, 6}};
  const auto batch = f.gen.teacher_forced_logits(xs, ys);
  const auto second = f.gen.teacher_forced_logits(std::span<const GenerationInput>(&xs[1], 1),
                                                  std::span<const std::vector<TokenId>>(&ys[1], 1));
  for (std::size_t i = 0; i < second.rows(); ++i)
    for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(batch.at(2 + i, j), second.at(i, j), 1e-12);
}

TEST(Generator, SharedEmbeddingMustExist) {
  ParameterStore store;
  Rng rng(1);
  auto cfg = small();
  cfg.shared_embedding = "enc.tok";
  EXPECT_THROW(Generator(store, "gen", cfg, rng), ContractError);
  store.add_normal("enc.tok", {12, 8}, 0.1, rng);
  const Generator gen(store, "gen", cfg, rng);
  EXPECT_EQ(gen.token_table(), "enc.tok");
  EXPECT_FALSE(store.contains("gen.tok"));
}

TEST(Nucleus, BoundaryCase) {
  const std::vector<double> p{0.6, 0.3, 0.1};
  const auto n = nucleus(p, 0.7);
  EXPECT_EQ(n.ids, (std::vector<TokenId>{0, 1}));
  EXPECT_NEAR(n.probs[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(n.probs[1], 1.0 / 3.0, 1e-15);
  Rng rng(1);
  for (int i = 0; i < 500; ++i) EXPECT_NE(sample_from(n, rng), 2);
}

TEST(Nucleus, FullMassKeepsEverything) {
  const std::vector<double> p{0.2, 0.5, 0.3};
  const auto n = nucleus(p, 1.0);
  EXPECT_EQ(n.ids, (std::vector<TokenId>{1, 2, 0}));
  EXPECT_NEAR(n.probs[0], 0.5, 1e-15);
}

TEST(Nucleus, TinyMassIsGreedy) {
  const std::vector<double> p{0.2, 0.5, 0.3};
  EXPECT_EQ(nucleus(p, 1e-9).ids, (std::vector<TokenId>{1}));
  EXPECT_THROW(nucleus(p, 0.0), ContractError);
}

TEST(Nucleus, EmpiricalFrequencies) {
  const std::vector<double> p{0.6, 0.3, 0.1};
  const auto n = nucleus(p, 0.7);
  Rng rng(9);
  int zeros = 0;
  const int trials = 20000;
  for (int i = 0; i < trials; ++i) zeros += sample_from(n, rng) == 0;
  EXPECT_NEAR(static_cast<double>(zeros) / trials, 2.0 / 3.0, 0.02);
}

TEST(Generator, SamplingIsSeedDeterministic) {
  Fixture f;
  const auto x = build_input({}, {}, std::vector<TokenId>{8, 9});
  Rng a(4);
  Rng b(4);
  std::vector<std::size_t> sizes;
  const auto ya = f.gen.sample(x, {.p = 0.9, .max_len = 6}, a, &sizes);
  const auto yb = f.gen.sample(x, {.p = 0.9, .max_len = 6}, b);
  EXPECT_EQ(ya, yb);
  // one step per emitted token, plus the step that drew EOS when it came before max_len
  EXPECT_TRUE(sizes.size() == ya.size() || sizes.size() == ya.size() + 1);
  EXPECT_LE(ya.size(), 6u);
  ASSERT_FALSE(ya.empty());
  for (TokenId t : ya) EXPECT_GE(t, kFirstRegular);
}

TEST(GenerationLoss, UniformLogitsGiveLogV) {
  const Tensor logits = Tensor::zeros({3, 12});
  const std::vector<int> t{5, 6, kEos};
  EXPECT_NEAR(generation_loss(logits, t).item(), std::log(12.0), 1e-12);
}

TEST(GenerationLoss, ConfidentCorrectIsNearZero) {
  std::vector<double> v(2 * 12, 0.0);
  v[5] = 50.0;
  v[12 + kEos] = 50.0;
  const std::vector<int> t{5, kEos};
  EXPECT_LT(generation_loss(Tensor::matrix(2, 12, v), t).item(), 1e-15);
}

TEST(GenerationLoss, BitExactWithCrossEntropy) {
  Fixture f;
  const auto x = build_input({}, {}, std::vector<TokenId>{8, 9});
  const std::vector<std::vector<TokenId>> ys{{10, 11}};
  const auto logits = f.gen.teacher_forced_logits(std::span<const GenerationInput>(&x, 1), ys);
  const auto targets = generation_targets(ys);
  EXPECT_EQ(targets, (std::vector<int>{10, 11, kEos}));
  EXPECT_EQ(generation_loss(logits, targets).item(), cross_entropy(logits, targets).item());
}

}  // namespace
}  // namespace msp
