#pragma once

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace msp {

using Sentence = std::vector<std::string>;

/// Corpus-level BLEU-n: uniform geometric mean of clipped 1..n-gram
/// precisions times the brevity penalty. A zero higher-order precision is
/// replaced by 1e-9; no unigram match at all scores 0.
double bleu(std::span<const Sentence> candidates, std::span<const Sentence> references, int n);
double bleu(const Sentence& candidate, const Sentence& reference, int n);

/// ROUGE-n F1 with clipped n-gram overlap.
double rouge_n(const Sentence& candidate, const Sentence& reference, int n);

std::size_t lcs_length(const Sentence& a, const Sentence& b);
/// LCS-based F-measure, F = (1 + b^2) P R / (R + b^2 P).
double rouge_l(const Sentence& candidate, const Sentence& reference, double beta = 1.2);

/// Distinct n-grams over all candidates divided by total n-grams.
double distinct(std::span<const Sentence> candidates, int n);

struct EmbeddingScores {
  double average = 0.0;
  double extrema = 0.0;
  double greedy = 0.0;
};

/// Word vector lookup; nullopt for words without a vector (skipped).
using WordVectors = std::function<std::optional<std::vector<double>>(const std::string&)>;

double cosine(std::span<const double> a, std::span<const double> b);
EmbeddingScores embedding_metrics(const Sentence& candidate, const Sentence& reference, const WordVectors& vectors);

/// Unigram-type F1 between a response and the history, stopwords removed.
double persona_f1(const Sentence& candidate, std::span<const Sentence> history, const std::set<std::string>& stopwords);

/// idf(t) = ln((N + 1) / (df(t) + 1)) + 1 over N documents; unseen tokens get df = 0.
class IdfTable {
 public:
  IdfTable() = default;
  static IdfTable build(std::span<const Sentence> documents);
  static IdfTable from_values(std::map<std::string, double> values, double unseen);

  double idf(const std::string& token) const;
  std::size_t documents() const { return documents_; }

 private:
  std::size_t documents_ = 0;
  double unseen_ = 1.0;
  std::map<std::string, double, std::less<>> values_;
};

/// Max over history sentences of idf mass of the shared word types divided by
/// the sentence's idf mass.
double persona_coverage(const Sentence& candidate, std::span<const Sentence> history, const IdfTable& idf);

struct EvalSample {
  Sentence candidate;
  Sentence reference;
  std::vector<Sentence> history;
};

struct MetricOptions {
  std::set<std::string> stopwords;
  bool coverage_against_reference = false;
};

/// Fourteen scores in [0, 1], in report order.
struct MetricReport {
  std::vector<std::pair<std::string, double>> values;

  std::optional<double> get(const std::string& name) const;
  /// "metric,value" lines with values scaled by 100.
  std::string to_csv() const;
  /// Aligned two-column text table, values scaled by 100.
  std::string to_table() const;
};

/// Names of the report columns in order.
const std::vector<std::string>& metric_names();

MetricReport evaluate(std::span<const EvalSample> samples, const IdfTable& idf, const WordVectors& vectors,
                      const MetricOptions& options);

}  // namespace msp
