#include <gtest/gtest.h>

#include <cmath>

#include "msp/encoder.hpp"
#include "msp/error.hpp"
#include "support/reference_model.hpp"

namespace msp {
namespace {

constexpr double kHandTol = 1e-9;

struct Fixture {
  ParameterStore store;
  Rng rng{11};
  TransformerEncoder enc;
  explicit Fixture(EncoderConfig cfg) : enc(store, "enc", cfg, rng) {}
};

EncoderConfig small(std::size_t layers = 2, std::size_t heads = 2) {
  return {.vocab_size = 20, .d = 8, .heads = heads, .layers = layers, .ff = 16, .max_positions = 6};
}

TEST(Encoder, OutputShapeIsLenByD) {
  Fixture f(small());
  const std::vector<TokenId> ids{5, 6, 7};
  const auto out = f.enc.encode(ids);
  EXPECT_EQ(out.states.shape(), (Shape{3, 8}));
  EXPECT_FALSE(out.truncated);
}

TEST(Encoder, PositionSensitive) {
  Fixture f(small());
  const auto ab = f.enc.encode(std::vector<TokenId>{5, 6}).states.to_vector();
  const auto ba = f.enc.encode(std::vector<TokenId>{6, 5}).states.to_vector();
  EXPECT_NE(ab, ba);
}

TEST(Encoder, EmptyInputIsContractError) {
  Fixture f(small());
  EXPECT_THROW(f.enc.encode(std::vector<TokenId>{}), ContractError);
}

TEST(Encoder, OverlongInputIsTruncatedAndFlagged) {
  Fixture f(small());
  const std::vector<TokenId> ids{5, 6, 7, 8, 9, 10, 11, 12};
  const auto out = f.enc.encode(ids);
  EXPECT_TRUE(out.truncated);
  EXPECT_EQ(out.states.rows(), 6u);
}

TEST(Encoder, HeadsMustDivideD) {
  ParameterStore s;
  Rng rng(1);
  EXPECT_THROW(TransformerEncoder(s, "e", {.vocab_size = 10, .d = 6, .heads = 4, .layers = 1, .ff = 4, .max_positions = 4}, rng),
               ContractError);
}

// One layer, one head, two tokens, against a plain-loop forward pass.
TEST(Encoder, SingleLayerSingleHeadMatchesHandComputation) {
  Fixture f(small(1, 1));
  Rng rng(5);
  for (const auto& [name, t] : f.store.all()) {
    auto& p = f.store.get(name);
    for (double& v : p.mutable_data()) v = rng.uniform(-0.5, 0.5);
  }
  const std::vector<int> ids{7, 3};
  const auto got = f.enc.encode(ids).states;
  const auto want = testing::ref_encoder(f.store, "enc", ids, 1, 1);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(got.at(i, j), want[i][j], kHandTol);
}

TEST(Encoder, MultiLayerMultiHeadMatchesReference) {
  Fixture f(small(2, 2));
  const std::vector<int> ids{7, 3, 9, 12};
  const auto got = f.enc.encode(ids).states;
  const auto want = testing::ref_encoder(f.store, "enc", ids, 2, 2);
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(got.at(i, j), want[i][j], kHandTol);
}

TEST(Encoder, BatchEqualsSingleSequences) {
  Fixture f(small());
  const std::vector<std::vector<TokenId>> seqs{{5, 6, 7}, {8}, {9, 10}};
  const auto batch = f.enc.encode_batch(seqs);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto one = f.enc.encode(seqs[s]).states;
    const auto seg = batch.segments[s];
    for (std::size_t i = 0; i < seg.length; ++i)
      for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(batch.states.at(seg.begin + i, j), one.at(i, j), 1e-12);
  }
}

TEST(SentenceEmbedding, MeanOfOneTokenIsItsContextualVector) {
  Fixture f(small());
  const EncoderEmbedder mean(f.enc, SentenceMode::Mean);
  const std::vector<TokenId> one{9};
  const auto v = mean.embed(one);
  const auto states = f.enc.encode(one).states;
  for (std::size_t j = 0; j < 8; ++j) EXPECT_DOUBLE_EQ(v[j], states.at(0, j));
}

TEST(SentenceEmbedding, ClsIsPositionZeroWithClsPrepended) {
  Fixture f(small());
  const EncoderEmbedder cls(f.enc, SentenceMode::Cls);
  const auto v = cls.embed(std::vector<TokenId>{9, 10});
  const auto states = f.enc.encode(std::vector<TokenId>{kCls, 9, 10}).states;
  for (std::size_t j = 0; j < 8; ++j) EXPECT_DOUBLE_EQ(v[j], states.at(0, j));
  EXPECT_THROW(cls.embed(std::vector<TokenId>{}), ContractError);
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

TEST(BagOfWords, IdenticalSentencesHaveCosineOne) {
  const BagOfWordsEmbedder e(30, 16, 3);
  const std::vector<TokenId> s{6, 7, 7, 9};
  EXPECT_NEAR(cosine(e.embed(s), e.embed(s)), 1.0, 1e-12);
}

TEST(BagOfWords, DisjointSentencesUnderIdentityAreOrthogonal) {
  const auto e = BagOfWordsEmbedder::identity(30);
  EXPECT_EQ(cosine(e.embed(std::vector<TokenId>{6, 7}), e.embed(std::vector<TokenId>{8, 9})), 0.0);
}

TEST(BagOfWords, UnitNormAndOrderInvariant) {
  const BagOfWordsEmbedder e(30, 16, 3);
  const auto a = e.embed(std::vector<TokenId>{6, 7, 8});
  const auto b = e.embed(std::vector<TokenId>{8, 6, 7});
  double n = 0.0;
  for (double x : a) n += x * x;
  EXPECT_NEAR(n, 1.0, 1e-12);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST(BagOfWords, OnlyIgnoredTokensIsContractError) {
  const BagOfWordsEmbedder e(30, 16, 3, {6});
  EXPECT_THROW(e.embed(std::vector<TokenId>{6, kBos}), ContractError);
  EXPECT_THROW(e.embed(std::vector<TokenId>{}), ContractError);
  EXPECT_NO_THROW(e.embed(std::vector<TokenId>{6, 7}));
}

TEST(BagOfWords, SeedDeterminesProjection) {
  const BagOfWordsEmbedder a(30, 16, 3);
  const BagOfWordsEmbedder b(30, 16, 3);
  const BagOfWordsEmbedder c(30, 16, 4);
  const std::vector<TokenId> s{6, 9};
  EXPECT_EQ(a.embed(s), b.embed(s));
  EXPECT_NE(a.embed(s), c.embed(s));
}

TEST(SentenceMode, NamesRoundTrip) {
  for (auto m : {SentenceMode::Cls, SentenceMode::Mean, SentenceMode::BagOfWords})
    EXPECT_EQ(sentence_mode_from_string(to_string(m)), m);
  EXPECT_THROW(sentence_mode_from_string("max"), ContractError);
}

}  // namespace
}  // namespace msp
