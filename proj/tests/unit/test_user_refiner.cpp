#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "msp/error.hpp"
#include "msp/rng.hpp"
#include "msp/user_refiner.hpp"

namespace msp {
namespace {

UserVector uv(std::string id, std::vector<double> v) { return {std::move(id), std::move(v)}; }

TEST(TopK, OnlySelfIndexedGivesEmpty) {
  DenseIndex index(2);
  index.add(uv("u", {1, 0}));
  EXPECT_TRUE(index.top_k(uv("u", {1, 0}), 3).empty());
}

TEST(TopK, HandDotProducts) {
  DenseIndex index(2);
  index.add(uv("u", {1, 0}));
  index.add(uv("a", {2, 0}));
  index.add(uv("b", {0, 5}));
  const auto r = index.top_k(uv("u", {1, 0}), 1);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].user_id, "a");
  EXPECT_EQ(r[0].score, 2.0);
}

TEST(TopK, SaturationReturnsAllOthersOrdered) {
  DenseIndex index(2);
  index.add(uv("u", {1, 1}));
  index.add(uv("a", {2, 0}));
  index.add(uv("b", {0, 5}));
  index.add(uv("c", {1, 0}));
  const auto r = index.top_k(uv("u", {1, 1}), 10);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0].user_id, "b");
  EXPECT_EQ(r[1].user_id, "a");
  EXPECT_EQ(r[2].user_id, "c");
}

TEST(TopK, TiesBreakByAscendingId) {
  DenseIndex index(1);
  index.add(uv("z", {1}));
  index.add(uv("m", {1}));
  index.add(uv("b", {1}));
  const auto r = index.top_k(uv("q", {1}), 2);
  EXPECT_EQ(r[0].user_id, "b");
  EXPECT_EQ(r[1].user_id, "m");
}

TEST(TopK, ColdUserPermittedAndErrors) {
  DenseIndex empty(2);
  EXPECT_THROW(empty.top_k(uv("u", {1, 0}), 1), ContractError);
  DenseIndex index(2);
  index.add(uv("a", {1, 0}));
  EXPECT_EQ(index.top_k(uv("cold", {1, 0}), 1).size(), 1u);
  EXPECT_THROW(index.top_k(uv("cold", {1, 0}), 0), ContractError);
  EXPECT_THROW(index.add(uv("a", {0, 1})), ContractError);
  EXPECT_THROW(index.add(uv("d", {0, 1, 2})), ContractError);
}

// Full argsort of dot products, truncated.
std::vector<std::string> brute_force(const std::vector<UserVector>& users, const UserVector& cur, std::size_t k) {
  std::vector<std::pair<double, std::string>> scored;
  for (const auto& u : users) {
    if (u.user_id == cur.user_id) continue;
    double s = 0.0;
    for (std::size_t i = 0; i < u.vector.size(); ++i) s += u.vector[i] * cur.vector[i];
    scored.emplace_back(s, u.user_id);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::min(k, scored.size()); ++i) out.push_back(scored[i].second);
  return out;
}

TEST(TopK, MatchesBruteForceOn100Instances) {
  Rng rng(21);
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 2 + rng.below(30);
    const std::size_t dim = 1 + rng.below(6);
    std::vector<UserVector> users;
    DenseIndex index(dim);
    for (std::size_t u = 0; u < n; ++u) {
      std::vector<double> v(dim);
      // small integers make ties common
      for (double& x : v) x = static_cast<double>(static_cast<int>(rng.below(7)) - 3);
      users.push_back(uv("user" + std::to_string(rng.below(1000)) + "_" + std::to_string(u), v));
      index.add(users.back());
    }
    const auto& cur = users[rng.below(n)];
    const std::size_t k = 1 + rng.below(n + 2);
    std::vector<std::string> got;
    for (const auto& s : index.top_k(cur, k)) got.push_back(s.user_id);
    EXPECT_EQ(got, brute_force(users, cur, k)) << "instance " << inst;
    EXPECT_EQ(std::count(got.begin(), got.end(), cur.user_id), 0);
  }
}

TEST(TopK, ScaleCovariance) {
  Rng rng(3);
  DenseIndex a(3);
  DenseIndex b(3);
  std::vector<UserVector> users;
  for (int u = 0; u < 20; ++u) {
    std::vector<double> v{rng.normal(), rng.normal(), rng.normal()};
    std::vector<double> w = v;
    for (double& x : w) x *= 4.0;
    a.add(uv("u" + std::to_string(u), v));
    b.add(uv("u" + std::to_string(u), w));
    users.push_back(uv("u" + std::to_string(u), v));
  }
  for (const auto& cur : users) {
    const auto ra = a.top_k(cur, 5);
    const auto rb = b.top_k(cur, 5);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(ra[i].user_id, rb[i].user_id);
  }
}

TEST(DenseIndex, SaveLoadRoundTrip) {
  DenseIndex index(2);
  index.add(uv("ann", {1.5, -2.25}));
  index.add(uv("bob", {0.1, 3.0}));
  const auto path = std::filesystem::temp_directory_path() / "msp_index_test.bin";
  index.save(path);
  EXPECT_EQ(std::filesystem::file_size(path), 16u + 2 * (4 + 3 + 16));
  const DenseIndex back = DenseIndex::load(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.size(), 2u);
  EXPECT_EQ(std::vector<double>(back.vector_of("bob").begin(), back.vector_of("bob").end()),
            (std::vector<double>{0.1, 3.0}));
  const auto r = back.top_k(uv("x", {1, 0}), 2);
  EXPECT_EQ(r[0].user_id, "ann");
}

Corpus toy_corpus() {
  return ingest_string(R"({"user_id":"a","ts":1,"query":"music tonight","response":"jazz club"}
{"user_id":"a","ts":2,"query":"weekend","response":"hiking trip"}
{"user_id":"a","ts":3,"query":"food","response":"noodles and jazz"}
{"user_id":"b","ts":1,"query":"music tonight","response":"jazz club"}
{"user_id":"b","ts":4,"query":"music tonight","response":"jazz club"}
)");
}

TEST(UserVector, SinglePairIsConcatenatedEmbeddings) {
  const Corpus c = toy_corpus();
  const auto emb = BagOfWordsEmbedder::identity(c.vocab.size());
  const auto& a = c.users[*c.find_user("a")];
  const std::vector<std::size_t> first{a.pairs[0]};
  const auto v = build_user_vector(c, "a", first, emb);
  const auto q = emb.embed(c.pairs[a.pairs[0]].query);
  const auto r = emb.embed(c.pairs[a.pairs[0]].response);
  ASSERT_EQ(v.vector.size(), q.size() + r.size());
  for (std::size_t i = 0; i < q.size(); ++i) EXPECT_EQ(v.vector[i], q[i]);
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(v.vector[q.size() + i], r[i]);
}

TEST(UserVector, TwoIdenticalPairsDoubleTheVector) {
  const Corpus c = toy_corpus();
  const auto emb = BagOfWordsEmbedder::identity(c.vocab.size());
  const auto& b = c.users[*c.find_user("b")];
  const std::vector<std::size_t> one{b.pairs[0]};
  const auto single = build_user_vector(c, "b", one, emb);
  const auto both = build_user_vector(c, "b", b.pairs, emb);
  for (std::size_t i = 0; i < single.vector.size(); ++i) EXPECT_EQ(both.vector[i], 2.0 * single.vector[i]);
}

TEST(UserVector, ThreePairsMatchRecomputation) {
  const Corpus c = toy_corpus();
  const BagOfWordsEmbedder emb(c.vocab.size(), 8, 5);
  const auto& a = c.users[*c.find_user("a")];
  const auto v = build_user_vector(c, "a", a.pairs, emb);
  std::vector<double> want(16, 0.0);
  for (std::size_t p : a.pairs) {
    const auto q = emb.embed(c.pairs[p].query);
    const auto r = emb.embed(c.pairs[p].response);
    for (std::size_t i = 0; i < 8; ++i) {
      want[i] += q[i];
      want[8 + i] += r[i];
    }
  }
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(v.vector[i], want[i], 1e-12);
  const auto mean = build_user_vector(c, "a", a.pairs, emb, Aggregation::Mean);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(mean.vector[i], want[i] / 3.0, 1e-12);
}

TEST(UserVector, EmptyHistoryIsContractError) {
  const Corpus c = toy_corpus();
  const auto emb = BagOfWordsEmbedder::identity(c.vocab.size());
  EXPECT_THROW(build_user_vector(c, "a", std::vector<std::size_t>{}, emb), ContractError);
}

TEST(Snapshot, RespectsTimeCut) {
  const Corpus c = toy_corpus();
  const auto emb = BagOfWordsEmbedder::identity(c.vocab.size());
  const auto pe = embed_pairs(c, emb);
  const auto snap = build_snapshot(c, pe, 1);
  EXPECT_EQ(snap.index.size(), 2u);
  const auto& b = c.users[*c.find_user("b")];
  const std::vector<std::size_t> first{b.pairs[0]};
  const auto want = build_user_vector(c, "b", first, emb);
  const auto got = snap.index.vector_of("b");
  for (std::size_t i = 0; i < want.vector.size(); ++i) EXPECT_EQ(got[i], want.vector[i]);
  const auto sim = similar_users(snap, 5);
  EXPECT_EQ(sim.at("a"), std::vector<std::string>{"b"});
}

}  // namespace
}  // namespace msp
