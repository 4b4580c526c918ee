#include "msp/user_refiner.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "msp/error.hpp"

namespace msp {

PairEmbeddings embed_pairs(const Corpus& corpus, const SentenceEmbedder& embedder) {
  PairEmbeddings out;
  out.dim = embedder.dim();
  out.query.reserve(corpus.pairs.size());
  out.response.reserve(corpus.pairs.size());
  for (const auto& p : corpus.pairs) {
    out.query.push_back(embedder.embed(p.query));
    out.response.push_back(embedder.embed(p.response));
  }
  return out;
}

UserVector build_user_vector(const std::string& user_id, std::span<const std::size_t> pairs,
                             const PairEmbeddings& embeddings, Aggregation aggregation) {
  if (pairs.empty()) throw ContractError("user '" + user_id + "' has an empty history");
  const std::size_t d = embeddings.dim;
  UserVector u{user_id, std::vector<double>(2 * d, 0.0)};
  for (std::size_t p : pairs) {
    const auto& q = embeddings.query.at(p);
    const auto& r = embeddings.response.at(p);
    for (std::size_t j = 0; j < d; ++j) {
      u.vector[j] += q[j];
      u.vector[d + j] += r[j];
    }
  }
  if (aggregation == Aggregation::Mean)
    for (double& x : u.vector) x /= static_cast<double>(pairs.size());
  return u;
}

UserVector build_user_vector(const Corpus& corpus, const std::string& user_id, std::span<const std::size_t> pairs,
                             const SentenceEmbedder& embedder, Aggregation aggregation) {
  if (pairs.empty()) throw ContractError("user '" + user_id + "' has an empty history");
  PairEmbeddings e;
  e.dim = embedder.dim();
  e.query.resize(corpus.pairs.size());
  e.response.resize(corpus.pairs.size());
  for (std::size_t p : pairs) {
    e.query[p] = embedder.embed(corpus.pairs.at(p).query);
    e.response[p] = embedder.embed(corpus.pairs.at(p).response);
  }
  return build_user_vector(user_id, pairs, e, aggregation);
}

void DenseIndex::add(const UserVector& v) {
  if (v.vector.size() != dim_) {
    throw DimensionError("user vector of length " + std::to_string(v.vector.size()) + " added to index of dim " +
                         std::to_string(dim_));
  }
  if (rows_.contains(v.user_id)) throw ContractError("duplicate user id '" + v.user_id + "' in index");
  rows_.emplace(v.user_id, ids_.size());
  ids_.push_back(v.user_id);
  matrix_.insert(matrix_.end(), v.vector.begin(), v.vector.end());
}

std::span<const double> DenseIndex::vector_of(const std::string& user_id) const {
  auto it = rows_.find(user_id);
  if (it == rows_.end()) throw ContractError("user '" + user_id + "' is not indexed");
  return std::span<const double>(matrix_).subspan(it->second * dim_, dim_);
}

namespace {
double norm_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}
}  // namespace

std::vector<ScoredUser> DenseIndex::top_k(const UserVector& current, std::size_t k, bool normalize) const {
  if (ids_.empty()) throw ContractError("top_k on an empty index");
  if (k == 0) throw ContractError("top_k needs k >= 1");
  if (current.vector.size() != dim_) {
    throw DimensionError("query vector of length " + std::to_string(current.vector.size()) + " against index of dim " +
                         std::to_string(dim_));
  }
  const double qn = normalize ? norm_of(current.vector) : 1.0;
  std::vector<ScoredUser> scored;
  scored.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (ids_[i] == current.user_id) continue;
    const double* row = matrix_.data() + i * dim_;
    double s = 0.0;
    for (std::size_t j = 0; j < dim_; ++j) s += row[j] * current.vector[j];
    if (normalize) {
      const double rn = norm_of({row, dim_});
      s = (rn > 0.0 && qn > 0.0) ? s / (rn * qn) : 0.0;
    }
    scored.push_back({ids_[i], s});
  }
  const auto better = [](const ScoredUser& a, const ScoredUser& b) {
    return a.score != b.score ? a.score > b.score : a.user_id < b.user_id;
  };
  const std::size_t keep = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(), better);
  scored.resize(keep);
  return scored;
}

void DenseIndex::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write index '" + path.string() + "'");
  const auto put_u64 = [&](std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); };
  put_u64(ids_.size());
  put_u64(dim_);
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    const auto len = static_cast<std::uint32_t>(ids_[i].size());
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os.write(ids_[i].data(), len);
    os.write(reinterpret_cast<const char*>(matrix_.data() + i * dim_), static_cast<std::streamsize>(dim_ * sizeof(double)));
  }
  if (!os) throw DataError("failed writing index '" + path.string() + "'");
}

DenseIndex DenseIndex::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read index '" + path.string() + "'");
  const auto get = [&](void* dst, std::size_t n) {
    if (!is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n))) {
      throw DataError("truncated index file '" + path.string() + "'");
    }
  };
  std::uint64_t count = 0;
  std::uint64_t dim = 0;
  get(&count, sizeof count);
  get(&dim, sizeof dim);
  DenseIndex index(dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t len = 0;
    get(&len, sizeof len);
    UserVector v;
    v.user_id.resize(len);
    get(v.user_id.data(), len);
    v.vector.resize(dim);
    get(v.vector.data(), dim * sizeof(double));
    index.add(v);
  }
  return index;
}

UserSnapshot build_snapshot(const Corpus& corpus, const PairEmbeddings& embeddings, std::int64_t max_ts,
                            Aggregation aggregation) {
  UserSnapshot snap{DenseIndex(2 * embeddings.dim), {}};
  for (const auto& user : corpus.users) {
    std::vector<std::size_t> kept;
    for (std::size_t p : user.pairs)
      if (corpus.pairs[p].ts <= max_ts) kept.push_back(p);
    if (kept.empty()) continue;
    auto v = build_user_vector(user.user_id, kept, embeddings, aggregation);
    snap.index.add(v);
    snap.vectors.emplace(user.user_id, std::move(v));
  }
  if (snap.index.size() == 0) throw DataError("no user has history up to timestamp " + std::to_string(max_ts));
  return snap;
}

std::map<std::string, std::vector<std::string>> similar_users(const UserSnapshot& snapshot, std::size_t k_u,
                                                              bool normalize) {
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& [id, vec] : snapshot.vectors) {
    auto& dst = out[id];
    for (auto& s : snapshot.index.top_k(vec, k_u, normalize)) dst.push_back(std::move(s.user_id));
  }
  return out;
}

}  // namespace msp
