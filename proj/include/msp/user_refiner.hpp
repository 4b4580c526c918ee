#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "msp/corpus.hpp"
#include "msp/encoder.hpp"

namespace msp {

/// [sum of query embeddings ; sum of response embeddings] over one user's history.
struct UserVector {
  std::string user_id;
  std::vector<double> vector;
};

enum class Aggregation { Sum, Mean };

/// Sentence embeddings of every pair in a corpus, computed once for a frozen embedder.
struct PairEmbeddings {
  std::size_t dim = 0;
  std::vector<std::vector<double>> query;
  std::vector<std::vector<double>> response;
};

PairEmbeddings embed_pairs(const Corpus& corpus, const SentenceEmbedder& embedder);

UserVector build_user_vector(const std::string& user_id, std::span<const std::size_t> pairs,
                             const PairEmbeddings& embeddings, Aggregation aggregation = Aggregation::Sum);
UserVector build_user_vector(const Corpus& corpus, const std::string& user_id, std::span<const std::size_t> pairs,
                             const SentenceEmbedder& embedder, Aggregation aggregation = Aggregation::Sum);

struct ScoredUser {
  std::string user_id;
  double score = 0.0;
};

/// Exact dot-product search over user vectors.
class DenseIndex {
 public:
  explicit DenseIndex(std::size_t dim) : dim_(dim) {}

  void add(const UserVector& v);
  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  bool contains(const std::string& user_id) const { return rows_.contains(user_id); }
  std::span<const double> vector_of(const std::string& user_id) const;

  /// The k highest-scoring users other than current.user_id, by descending
  /// score then ascending id. With `normalize`, scores are cosines.
  std::vector<ScoredUser> top_k(const UserVector& current, std::size_t k, bool normalize = false) const;

  /// u64 count | u64 dim | { u32 id bytes | id | f64 vector[dim] }*, little-endian.
  void save(const std::filesystem::path& path) const;
  static DenseIndex load(const std::filesystem::path& path);

 private:
  std::size_t dim_;
  std::vector<std::string> ids_;
  std::vector<double> matrix_;
  std::map<std::string, std::size_t> rows_;
};

struct UserSnapshot {
  DenseIndex index{0};
  std::map<std::string, UserVector> vectors;
};

/// Index over every user's pairs with ts <= max_ts; users with no such pair are left out.
UserSnapshot build_snapshot(const Corpus& corpus, const PairEmbeddings& embeddings, std::int64_t max_ts,
                            Aggregation aggregation = Aggregation::Sum);

/// k_u nearest users of every indexed user.
std::map<std::string, std::vector<std::string>> similar_users(const UserSnapshot& snapshot, std::size_t k_u,
                                                              bool normalize = false);

}  // namespace msp
