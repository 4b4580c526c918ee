#include "msp/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "msp/error.hpp"
#include "msp/rng.hpp"

namespace msp {

using nlohmann::json;
using nlohmann::ordered_json;

std::optional<std::size_t> Corpus::find_user(std::string_view user_id) const {
  auto it = user_index_.find(user_id);
  if (it == user_index_.end()) return std::nullopt;
  return it->second;
}

std::span<const std::size_t> Corpus::history(const TrainingTriplet& t) const {
  return std::span<const std::size_t>(users[t.user].pairs).first(t.history_len);
}

void Corpus::reindex() {
  user_index_.clear();
  for (std::size_t i = 0; i < users.size(); ++i) user_index_.emplace(users[i].user_id, i);
}

Corpus build_corpus(std::vector<DialoguePair> pairs, const Vocabulary* vocab) {
  if (pairs.empty()) throw DataError("corpus has no dialogue pairs");
  Corpus c;
  if (vocab) {
    c.vocab = *vocab;
  } else {
    std::vector<std::string> texts;
    texts.reserve(pairs.size() * 2);
    for (const auto& p : pairs) {
      texts.push_back(p.query_text);
      texts.push_back(p.response_text);
    }
    c.vocab = Vocabulary::build(texts);
  }
  for (auto& p : pairs) {
    p.query = c.vocab.encode(p.query_text);
    p.response = c.vocab.encode(p.response_text);
  }
  c.pairs = std::move(pairs);

  std::map<std::string, std::vector<std::size_t>> by_user;
  for (std::size_t i = 0; i < c.pairs.size(); ++i) by_user[c.pairs[i].user_id].push_back(i);
  for (auto& [uid, idx] : by_user) {
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return c.pairs[a].ts < c.pairs[b].ts; });
    for (std::size_t k = 1; k < idx.size(); ++k) {
      if (c.pairs[idx[k]].ts == c.pairs[idx[k - 1]].ts) {
        throw DataError("duplicate (user, timestamp) = (" + uid + ", " + std::to_string(c.pairs[idx[k]].ts) + ")");
      }
    }
    c.users.push_back({uid, std::move(idx)});
  }
  c.reindex();

  // One triplet per pair, in source order, with its strictly-earlier history.
  std::vector<std::pair<std::size_t, std::size_t>> position(c.pairs.size());
  for (std::size_t u = 0; u < c.users.size(); ++u)
    for (std::size_t k = 0; k < c.users[u].pairs.size(); ++k) position[c.users[u].pairs[k]] = {u, k};
  c.triplets.reserve(c.pairs.size());
  for (std::size_t i = 0; i < c.pairs.size(); ++i) c.triplets.push_back({i, position[i].first, position[i].second});
  return c;
}

std::vector<DialoguePair> parse_jsonl(std::string_view text, const std::string& source) {
  std::vector<DialoguePair> pairs;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!obj.is_object()) throw DataError(where + ": expected a JSON object");
    DialoguePair p;
    try {
      if (!obj.contains("user_id") || !obj["user_id"].is_string()) throw DataError("missing string field user_id");
      if (!obj.contains("ts") || !obj["ts"].is_number_integer()) throw DataError("missing integer field ts");
      if (!obj.contains("query") || !obj["query"].is_string()) throw DataError("missing string field query");
      if (!obj.contains("response") || !obj["response"].is_string()) throw DataError("missing string field response");
      p.user_id = obj["user_id"].get<std::string>();
      p.ts = obj["ts"].get<std::int64_t>();
      p.query_text = obj["query"].get<std::string>();
      p.response_text = obj["response"].get<std::string>();
      if (obj.contains("topic") && !obj["topic"].is_null()) {
        if (!obj["topic"].is_number_integer()) throw DataError("field topic must be an integer");
        p.topic = obj["topic"].get<int>();
      }
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    if (p.ts < 0) throw DataError(where + ": negative timestamp");
    if (tokenize(p.query_text).empty() || tokenize(p.response_text).empty()) {
      throw DataError(where + ": query and response must be nonempty");
    }
    pairs.push_back(std::move(p));
  }
  if (pairs.empty()) throw DataError(source + ": no dialogue pairs");
  return pairs;
}

Corpus ingest_string(std::string_view text, const Vocabulary* vocab) {
  return build_corpus(parse_jsonl(text), vocab);
}

Corpus ingest(const std::filesystem::path& path, const Vocabulary* vocab) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open corpus '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return build_corpus(parse_jsonl(ss.str(), path.string()), vocab);
}

std::string to_jsonl(std::span<const DialoguePair> pairs) {
  std::string out;
  for (const auto& p : pairs) {
    ordered_json obj;
    obj["user_id"] = p.user_id;
    obj["ts"] = p.ts;
    obj["query"] = p.query_text;
    obj["response"] = p.response_text;
    if (p.topic) obj["topic"] = *p.topic;
    out += obj.dump();
    out += '\n';
  }
  return out;
}

std::string export_jsonl(const Corpus& corpus) { return to_jsonl(corpus.pairs); }

Split chronological_split(const Corpus& corpus, std::span<const TrainingTriplet> triplets, std::array<double, 3> ratios) {
  for (double r : ratios)
    if (r < 0.0) throw ContractError("split ratios must be nonnegative");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ContractError("split ratios must sum to 1");

  std::vector<TrainingTriplet> sorted(triplets.begin(), triplets.end());
  std::sort(sorted.begin(), sorted.end(), [&](const TrainingTriplet& a, const TrainingTriplet& b) {
    const auto& pa = corpus.pair_of(a);
    const auto& pb = corpus.pair_of(b);
    return std::tie(pa.ts, pa.user_id) < std::tie(pb.ts, pb.user_id);
  });
  const std::size_t n = sorted.size();
  const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios[0]));
  const auto n_valid = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios[1]));
  if (n_train == 0 || n_valid == 0 || n_train + n_valid >= n) {
    throw DataError("chronological split of " + std::to_string(n) + " triplets leaves an empty partition");
  }
  Split s;
  s.train.assign(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.valid.assign(sorted.begin() + static_cast<std::ptrdiff_t>(n_train),
                 sorted.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  s.test.assign(sorted.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), sorted.end());
  s.train_last_ts = corpus.ts_of(s.train.back());
  s.valid_last_ts = corpus.ts_of(s.valid.back());
  return s;
}

void write_split_manifest(const std::filesystem::path& path, const Split& split) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write split manifest '" + path.string() + "'");
  os << "train_size=" << split.train.size() << '\n'
     << "valid_size=" << split.valid.size() << '\n'
     << "test_size=" << split.test.size() << '\n'
     << "train_last_ts=" << split.train_last_ts << '\n'
     << "valid_last_ts=" << split.valid_last_ts << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

namespace synthetic_words {
namespace {
std::string pad(std::size_t v, int width) {
  std::string s = std::to_string(v);
  return std::string(s.size() < static_cast<std::size_t>(width) ? width - s.size() : 0, '0') + s;
}
}  // namespace
std::string topic_word(std::size_t topic, std::size_t k) { return "tp" + std::to_string(topic) + "w" + pad(k, 2); }
std::string cluster_word(std::size_t cluster, std::size_t topic, std::size_t k) {
  return "c" + std::to_string(cluster) + "t" + std::to_string(topic) + "w" + pad(k, 2);
}
std::string signature_word(std::size_t user, std::size_t k) { return "u" + pad(user, 3) + "s" + std::to_string(k); }
std::string generic_word(std::size_t k) { return "g" + pad(k, 3); }
std::string noise_word(std::size_t k) { return "n" + pad(k, 4); }
}  // namespace synthetic_words

namespace {

// k distinct indices from [0, n).
std::vector<std::size_t> pick(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  return idx;
}

std::string join(std::vector<std::string> words) {
  std::string s;
  for (const auto& w : words) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  return s;
}

}  // namespace

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  namespace sw = synthetic_words;
  if (spec.users < 2 || spec.clusters < 1 || spec.topics < 2 || spec.pairs_per_user < 1) {
    throw ContractError("synthetic spec needs >= 2 users, >= 1 cluster, >= 2 topics and >= 1 pair per user");
  }
  if (spec.clusters > spec.users) throw ContractError("synthetic spec has more clusters than users");
  if (spec.topic_words < 3 || spec.cluster_words < 3 || spec.signature_words < 2 || spec.generic_words < 4) {
    throw ContractError("synthetic spec vocabularies are too small to draw responses from");
  }
  const auto& stop = default_stopwords();
  const std::size_t required = stop.size() + spec.topics * spec.topic_words +
                               spec.clusters * spec.topics * spec.cluster_words +
                               spec.users * spec.signature_words + spec.generic_words;
  const std::size_t available = spec.vocab_size > static_cast<std::size_t>(kFirstRegular)
                                    ? spec.vocab_size - static_cast<std::size_t>(kFirstRegular)
                                    : 0;
  if (required > available) {
    throw ContractError("vocab_size " + std::to_string(spec.vocab_size) + " too small for disjoint planted vocabularies (" +
                        std::to_string(required) + " words + " + std::to_string(kFirstRegular) + " reserved)");
  }
  const std::size_t noise_words = available - required;

  Rng rng(spec.seed);
  SyntheticCorpus out;
  out.required_vocab = required;

  std::vector<std::size_t> order(spec.users);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<std::size_t> cluster_of(spec.users);
  for (std::size_t r = 0; r < spec.users; ++r) cluster_of[order[r]] = r % spec.clusters;
  for (std::size_t u = 0; u < spec.users; ++u) {
    out.user_ids.push_back("u" + std::to_string(1000 + u).substr(1));
    out.user_cluster[out.user_ids.back()] = static_cast<int>(cluster_of[u]);
  }

  auto stopwords = [&](std::size_t lo, std::size_t hi, std::vector<std::string>& words) {
    const std::size_t k = lo + rng.below(hi - lo + 1);
    for (std::size_t i = 0; i < k; ++i) words.push_back(stop[rng.below(stop.size())]);
  };

  std::vector<std::size_t> slot(spec.users);
  std::iota(slot.begin(), slot.end(), 0);
  for (std::size_t round = 0; round < spec.pairs_per_user; ++round) {
    rng.shuffle(slot);
    for (std::size_t s = 0; s < spec.users; ++s) {
      const std::size_t u = slot[s];
      const std::size_t c = cluster_of[u];
      const std::size_t t = rng.below(spec.topics);

      std::vector<std::string> q;
      for (auto k : pick(rng, spec.topic_words, 2 + rng.below(2))) q.push_back(sw::topic_word(t, k));
      stopwords(0, 2, q);
      if (noise_words > 0 && rng.uniform() < 0.5) q.push_back(sw::noise_word(rng.below(noise_words)));
      rng.shuffle(q);

      std::vector<std::string> r;
      if (rng.uniform() < spec.persona_rate) {
        for (auto k : pick(rng, spec.cluster_words, 2 + rng.below(2))) r.push_back(sw::cluster_word(c, t, k));
        for (auto k : pick(rng, spec.signature_words, 1 + rng.below(2))) r.push_back(sw::signature_word(u, k));
        stopwords(1, 2, r);
      } else {
        for (auto k : pick(rng, spec.generic_words, 2 + rng.below(3))) r.push_back(sw::generic_word(k));
        stopwords(1, 2, r);
      }
      rng.shuffle(r);

      DialoguePair p;
      p.user_id = out.user_ids[u];
      p.ts = static_cast<std::int64_t>(round * spec.users + s);
      p.query_text = join(std::move(q));
      p.response_text = join(std::move(r));
      p.topic = static_cast<int>(t);
      out.pairs.push_back(std::move(p));
    }
  }
  return out;
}

}  // namespace msp
