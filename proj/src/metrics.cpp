#include "msp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "msp/error.hpp"

namespace msp {

namespace {

constexpr double kZeroPrecision = 1e-9;

std::map<Sentence, std::size_t> ngram_counts(const Sentence& s, std::size_t n) {
  std::map<Sentence, std::size_t> out;
  if (s.size() < n) return out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[Sentence(s.begin() + static_cast<std::ptrdiff_t>(i),
                                                                 s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

std::size_t clipped_overlap(const std::map<Sentence, std::size_t>& cand, const std::map<Sentence, std::size_t>& ref) {
  std::size_t total = 0;
  for (const auto& [g, c] : cand) {
    auto it = ref.find(g);
    if (it != ref.end()) total += std::min(c, it->second);
  }
  return total;
}

void check_order(int n, int max_n, const char* what) {
  if (n < 1 || n > max_n) throw ContractError(std::string(what) + ": n must lie in [1, " + std::to_string(max_n) + "]");
}

}  // namespace

double bleu(std::span<const Sentence> candidates, std::span<const Sentence> references, int n) {
  check_order(n, 4, "bleu");
  if (candidates.size() != references.size()) throw ContractError("bleu: candidate and reference counts differ");
  std::size_t cand_len = 0;
  std::size_t ref_len = 0;
  std::vector<std::size_t> matched(static_cast<std::size_t>(n), 0);
  std::vector<std::size_t> total(static_cast<std::size_t>(n), 0);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_len += candidates[i].size();
    ref_len += references[i].size();
    for (int k = 1; k <= n; ++k) {
      const auto c = ngram_counts(candidates[i], static_cast<std::size_t>(k));
      const auto r = ngram_counts(references[i], static_cast<std::size_t>(k));
      matched[static_cast<std::size_t>(k - 1)] += clipped_overlap(c, r);
      if (candidates[i].size() >= static_cast<std::size_t>(k)) {
        total[static_cast<std::size_t>(k - 1)] += candidates[i].size() - static_cast<std::size_t>(k) + 1;
      }
    }
  }
  if (cand_len == 0 || matched[0] == 0) return 0.0;
  double log_sum = 0.0;
  for (int k = 0; k < n; ++k) {
    const auto kk = static_cast<std::size_t>(k);
    const double p = (matched[kk] == 0 || total[kk] == 0)
                         ? kZeroPrecision
                         : static_cast<double>(matched[kk]) / static_cast<double>(total[kk]);
    log_sum += std::log(p);
  }
  const double bp = cand_len > ref_len ? 1.0
                                       : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
  return bp * std::exp(log_sum / static_cast<double>(n));
}

double bleu(const Sentence& candidate, const Sentence& reference, int n) {
  return bleu(std::span<const Sentence>(&candidate, 1), std::span<const Sentence>(&reference, 1), n);
}

double rouge_n(const Sentence& candidate, const Sentence& reference, int n) {
  check_order(n, 4, "rouge_n");
  const auto c = ngram_counts(candidate, static_cast<std::size_t>(n));
  const auto r = ngram_counts(reference, static_cast<std::size_t>(n));
  if (c.empty() || r.empty()) return 0.0;
  const double overlap = static_cast<double>(clipped_overlap(c, r));
  if (overlap == 0.0) return 0.0;
  const double p = overlap / static_cast<double>(candidate.size() - static_cast<std::size_t>(n) + 1);
  const double rec = overlap / static_cast<double>(reference.size() - static_cast<std::size_t>(n) + 1);
  return 2.0 * p * rec / (p + rec);
}

std::size_t lcs_length(const Sentence& a, const Sentence& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0);
  std::vector<std::size_t> cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Sentence& candidate, const Sentence& reference, double beta) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  const double b2 = beta * beta;
  return (1.0 + b2) * p * r / (r + b2 * p);
}

double distinct(std::span<const Sentence> candidates, int n) {
  check_order(n, 2, "distinct");
  std::set<Sentence> seen;
  std::size_t total = 0;
  for (const auto& c : candidates) {
    for (const auto& [g, count] : ngram_counts(c, static_cast<std::size_t>(n))) {
      seen.insert(g);
      total += count;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(seen.size()) / static_cast<double>(total);
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: vectors differ in length");
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace {

std::vector<std::vector<double>> lookup_all(const Sentence& s, const WordVectors& vectors) {
  std::vector<std::vector<double>> out;
  for (const auto& w : s)
    if (auto v = vectors(w)) out.push_back(std::move(*v));
  return out;
}

std::vector<double> mean_vector(const std::vector<std::vector<double>>& vs) {
  std::vector<double> m(vs[0].size(), 0.0);
  for (const auto& v : vs)
    for (std::size_t j = 0; j < m.size(); ++j) m[j] += v[j];
  for (double& x : m) x /= static_cast<double>(vs.size());
  return m;
}

std::vector<double> extrema_vector(const std::vector<std::vector<double>>& vs) {
  std::vector<double> m(vs[0].size(), 0.0);
  for (const auto& v : vs)
    for (std::size_t j = 0; j < m.size(); ++j)
      if (std::abs(v[j]) > std::abs(m[j])) m[j] = v[j];
  return m;
}

double greedy_direction(const std::vector<std::vector<double>>& from, const std::vector<std::vector<double>>& to) {
  double total = 0.0;
  for (const auto& a : from) {
    double best = -1.0;
    for (const auto& b : to) best = std::max(best, cosine(a, b));
    total += best;
  }
  return total / static_cast<double>(from.size());
}

}  // namespace

EmbeddingScores embedding_metrics(const Sentence& candidate, const Sentence& reference, const WordVectors& vectors) {
  const auto c = lookup_all(candidate, vectors);
  const auto r = lookup_all(reference, vectors);
  if (c.empty() || r.empty()) return {};
  EmbeddingScores s;
  s.average = cosine(mean_vector(c), mean_vector(r));
  s.extrema = cosine(extrema_vector(c), extrema_vector(r));
  s.greedy = 0.5 * (greedy_direction(c, r) + greedy_direction(r, c));
  return s;
}

double persona_f1(const Sentence& candidate, std::span<const Sentence> history, const std::set<std::string>& stopwords) {
  std::set<std::string> c;
  std::set<std::string> h;
  for (const auto& w : candidate)
    if (!stopwords.contains(w)) c.insert(w);
  for (const auto& s : history)
    for (const auto& w : s)
      if (!stopwords.contains(w)) h.insert(w);
  if (c.empty() || h.empty()) return 0.0;
  std::size_t overlap = 0;
  for (const auto& w : c) overlap += h.contains(w) ? 1 : 0;
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(c.size());
  const double r = static_cast<double>(overlap) / static_cast<double>(h.size());
  return 2.0 * p * r / (p + r);
}

IdfTable IdfTable::build(std::span<const Sentence> documents) {
  std::map<std::string, std::size_t> df;
  for (const auto& d : documents) {
    std::set<std::string> types(d.begin(), d.end());
    for (const auto& t : types) ++df[t];
  }
  IdfTable table;
  table.documents_ = documents.size();
  const double n1 = static_cast<double>(documents.size() + 1);
  for (const auto& [t, count] : df) table.values_[t] = std::log(n1 / static_cast<double>(count + 1)) + 1.0;
  table.unseen_ = std::log(n1) + 1.0;
  return table;
}

IdfTable IdfTable::from_values(std::map<std::string, double> values, double unseen) {
  IdfTable table;
  for (auto& [k, v] : values) table.values_.emplace(k, v);
  table.unseen_ = unseen;
  return table;
}

double IdfTable::idf(const std::string& token) const {
  auto it = values_.find(token);
  return it == values_.end() ? unseen_ : it->second;
}

double persona_coverage(const Sentence& candidate, std::span<const Sentence> history, const IdfTable& idf) {
  const std::set<std::string> c(candidate.begin(), candidate.end());
  double best = 0.0;
  for (const auto& s : history) {
    const std::set<std::string> types(s.begin(), s.end());
    double shared = 0.0;
    double mass = 0.0;
    for (const auto& w : types) {
      const double v = idf.idf(w);
      mass += v;
      if (c.contains(w)) shared += v;
    }
    if (mass > 0.0) best = std::max(best, shared / mass);
  }
  return best;
}

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names = {"BLEU-1",  "BLEU-2",  "BLEU-3",  "BLEU-4", "ROUGE-1",
                                                 "ROUGE-2", "ROUGE-L", "Dist-1",  "Dist-2", "Average",
                                                 "Extrema", "Greedy",  "P-F1",    "P-Cover"};
  return names;
}

std::optional<double> MetricReport::get(const std::string& name) const {
  for (const auto& [k, v] : values)
    if (k == name) return v;
  return std::nullopt;
}

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os << "metric,value\n" << std::fixed << std::setprecision(4);
  for (const auto& [k, v] : values) os << k << ',' << v * 100.0 << '\n';
  return os.str();
}

std::string MetricReport::to_table() const {
  std::ostringstream os;
  os << std::left << std::setw(10) << "metric" << std::right << std::setw(10) << "value" << '\n';
  os << std::fixed << std::setprecision(3);
  for (const auto& [k, v] : values) os << std::left << std::setw(10) << k << std::right << std::setw(10) << v * 100.0 << '\n';
  return os.str();
}

MetricReport evaluate(std::span<const EvalSample> samples, const IdfTable& idf, const WordVectors& vectors,
                      const MetricOptions& options) {
  std::vector<Sentence> cands;
  std::vector<Sentence> refs;
  for (const auto& s : samples) {
    cands.push_back(s.candidate);
    refs.push_back(s.reference);
  }
  double r1 = 0.0, r2 = 0.0, rl = 0.0, avg = 0.0, ext = 0.0, gre = 0.0, pf1 = 0.0, pcov = 0.0;
  for (const auto& s : samples) {
    r1 += rouge_n(s.candidate, s.reference, 1);
    r2 += rouge_n(s.candidate, s.reference, 2);
    rl += rouge_l(s.candidate, s.reference);
    const auto e = embedding_metrics(s.candidate, s.reference, vectors);
    avg += e.average;
    ext += e.extrema;
    gre += e.greedy;
    pf1 += persona_f1(s.candidate, s.history, options.stopwords);
    if (options.coverage_against_reference) {
      pcov += persona_coverage(s.candidate, std::span<const Sentence>(&s.reference, 1), idf);
    } else {
      pcov += persona_coverage(s.candidate, s.history, idf);
    }
  }
  const double n = samples.empty() ? 1.0 : static_cast<double>(samples.size());
  MetricReport report;
  const bool any = !samples.empty();
  report.values = {{"BLEU-1", any ? bleu(cands, refs, 1) : 0.0},
                   {"BLEU-2", any ? bleu(cands, refs, 2) : 0.0},
                   {"BLEU-3", any ? bleu(cands, refs, 3) : 0.0},
                   {"BLEU-4", any ? bleu(cands, refs, 4) : 0.0},
                   {"ROUGE-1", r1 / n},
                   {"ROUGE-2", r2 / n},
                   {"ROUGE-L", rl / n},
                   {"Dist-1", distinct(cands, 1)},
                   {"Dist-2", distinct(cands, 2)},
                   {"Average", avg / n},
                   {"Extrema", ext / n},
                   {"Greedy", gre / n},
                   {"P-F1", pf1 / n},
                   {"P-Cover", pcov / n}};
  return report;
}

}  // namespace msp
