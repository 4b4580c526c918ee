#include "msp/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "msp/error.hpp"

namespace msp {

void Ablations::disable(const std::string& name) {
  if (name == "user-refiner") user_refiner = false;
  else if (name == "topic-refiner") topic_refiner = false;
  else if (name == "token-refiner") token_refiner = false;
  else if (name == "sim-profile") sim_profile = false;
  else if (name == "per-profile") per_profile = false;
  else if (name == "joint-training") joint_training = false;
  else if (name == "profile") profile = false;
  else if (name == "bm25-baseline") bm25 = true;
  else throw ContractError("unknown ablation '" + name + "'");
}

Ablations Ablations::parse(std::span<const std::string> names) {
  Ablations a;
  for (const auto& n : names) a.disable(n);
  return a;
}

std::string Ablations::describe() const {
  std::vector<std::string> off;
  if (!user_refiner) off.emplace_back("user-refiner");
  if (!topic_refiner) off.emplace_back("topic-refiner");
  if (!token_refiner) off.emplace_back("token-refiner");
  if (!sim_profile) off.emplace_back("sim-profile");
  if (!per_profile) off.emplace_back("per-profile");
  if (!joint_training) off.emplace_back("joint-training");
  if (!profile) off.emplace_back("profile");
  if (bm25) off.emplace_back("bm25-baseline");
  if (off.empty()) return "none";
  std::string s;
  for (const auto& o : off) s += (s.empty() ? "" : ",") + o;
  return s;
}

MspModel::MspModel(const RunConfig& config, std::size_t vocab_size, std::uint64_t seed)
    : store_(std::make_unique<ParameterStore>()) {
  Rng rng(seed);
  encoder_ = std::make_unique<TransformerEncoder>(
      *store_, "enc",
      EncoderConfig{vocab_size, config.d, config.heads, config.encoder_layers, config.ff, config.encoder_max_positions},
      rng);
  refiner_ = std::make_unique<TokenRefiner>(*store_, "tr", config.d, rng);
  head_ = std::make_unique<MatchingHead>(*store_, "mh", config.d, config.head, rng);
  const GeneratorConfig gen{vocab_size, config.d, config.heads, config.decoder_layers, config.ff,
                            config.decoder_max_positions, ""};
  GeneratorConfig main = gen;
  if (config.share_embeddings) main.shared_embedding = "enc.tok";
  generator_ = std::make_unique<Generator>(*store_, "gen", main, rng);
  if (config.separate_nonpersonalized) generator0_ = std::make_unique<Generator>(*store_, "gen0", gen, rng);
  generator_group_ = {"gen."};
  frozen_encoder_ = {"enc.layer", "enc.ln_f", "enc.pos"};
  if (config.share_embeddings) {
    generator_group_.push_back("enc.tok");
  } else {
    frozen_encoder_.push_back("enc.tok");
  }
}

const std::vector<std::string>& MspModel::refiner_prefixes() {
  static const std::vector<std::string> p{"tr.", "mh."};
  return p;
}

const std::vector<std::string>& MspModel::plain_generator_prefixes() {
  static const std::vector<std::string> p{"gen0."};
  return p;
}

Bm25::Bm25(std::span<const std::vector<TokenId>> documents, double k1, double b) : k1_(k1), b_(b) {
  if (documents.empty()) throw ContractError("BM25 needs at least one document");
  tf_.resize(documents.size());
  double total = 0.0;
  for (std::size_t i = 0; i < documents.size(); ++i) {
    for (TokenId t : documents[i]) ++tf_[i][t];
    for (const auto& [t, n] : tf_[i]) ++df_[t];
    lengths_.push_back(documents[i].size());
    total += static_cast<double>(documents[i].size());
  }
  avg_len_ = total / static_cast<double>(documents.size());
}

double Bm25::score(std::span<const TokenId> query, std::size_t doc) const {
  const double n = static_cast<double>(tf_.size());
  const auto& tf = tf_.at(doc);
  const double len_norm = 1.0 - b_ + b_ * static_cast<double>(lengths_[doc]) / avg_len_;
  double s = 0.0;
  std::set<TokenId> seen;
  for (TokenId t : query) {
    if (!seen.insert(t).second) continue;
    auto it = tf.find(t);
    if (it == tf.end()) continue;
    const double df = static_cast<double>(df_.at(t));
    const double idf = std::log((n - df + 0.5) / (df + 0.5) + 1.0);
    const double f = static_cast<double>(it->second);
    s += idf * f * (k1_ + 1.0) / (f + k1_ * len_norm);
  }
  return s;
}

std::vector<std::size_t> Bm25::rank(std::span<const TokenId> query, std::span<const std::size_t> candidates,
                                    std::size_t top) const {
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) scored.emplace_back(score(query, candidates[i]), i);
  const std::size_t k = std::min(top, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(candidates[scored[i].second]);
  return out;
}

std::vector<double> embed_or_zero(const SentenceEmbedder& embedder, std::span<const TokenId> ids) {
  try {
    return embedder.embed(ids);
  } catch (const ContractError&) {
    return std::vector<double>(embedder.dim(), 0.0);
  }
}

std::unique_ptr<SentenceEmbedder> make_sentence_embedder(const RunConfig& config, const Vocabulary& vocab,
                                                         const TransformerEncoder& encoder) {
  const SentenceMode mode = sentence_mode_from_string(config.sentence_embedder);
  if (mode != SentenceMode::BagOfWords) return std::make_unique<EncoderEmbedder>(encoder, mode);
  auto ignored = ignored_ids(vocab, default_stopwords());
  if (config.bow_dim == 0) {
    return std::make_unique<BagOfWordsEmbedder>(BagOfWordsEmbedder::identity(vocab.size(), std::move(ignored)));
  }
  return std::make_unique<BagOfWordsEmbedder>(vocab.size(), config.bow_dim, config.bow_seed, std::move(ignored));
}

std::vector<int> topic_labels_for(const RunConfig& config, const Corpus& corpus, std::span<const std::size_t> pairs,
                                  const PairEmbeddings& embeddings, std::string* source) {
  const bool all_labelled =
      std::all_of(pairs.begin(), pairs.end(), [&](std::size_t p) { return corpus.pairs[p].topic.has_value(); });
  if (config.topic_labels == "corpus" && !all_labelled) {
    throw DataError("refiner.topic_labels = corpus, but some training pairs carry no topic");
  }
  std::vector<int> labels;
  if (all_labelled && config.topic_labels != "kmeans") {
    for (std::size_t p : pairs) {
      const int t = *corpus.pairs[p].topic;
      if (t < 0 || static_cast<std::size_t>(t) >= config.topics) {
        throw DataError("pair topic " + std::to_string(t) + " outside refiner.topics = " + std::to_string(config.topics));
      }
      labels.push_back(t);
    }
    if (source) *source = "corpus";
    return labels;
  }
  std::vector<std::vector<double>> points;
  for (std::size_t p : pairs) points.push_back(embeddings.query[p]);
  Rng rng(config.seed + 0x5eed);
  if (source) *source = "kmeans";
  return kmeans_labels(points, config.topics, rng);
}

TopicClassifier train_topics(const RunConfig& config, const Corpus& corpus, const Split& split,
                             const PairEmbeddings& embeddings, double* train_accuracy, std::string* label_source,
                             std::vector<double>* epoch_loss) {
  std::vector<std::size_t> pairs;
  for (const auto& t : split.train) pairs.push_back(t.pair);
  const auto labels = topic_labels_for(config, corpus, pairs, embeddings, label_source);
  std::vector<std::vector<double>> inputs;
  for (std::size_t p : pairs) inputs.push_back(embeddings.query[p]);
  Rng rng(config.seed + 0x70b1c);
  TopicClassifier clf(embeddings.dim, config.topics, config.topic_hidden, rng);
  const auto report = train_topic_classifier(
      clf, inputs, labels, TopicTrainingConfig{config.topic_epochs, 32, config.topic_lr, config.seed});
  if (train_accuracy) *train_accuracy = report.train_accuracy;
  if (epoch_loss) *epoch_loss = report.epoch_loss;
  return clf;
}

ProfilePipeline::ProfilePipeline(const RunConfig& config, const Corpus& corpus, const Split& split,
                                 const MspModel& model, Ablations ablations, std::optional<TopicClassifier> classifier)
    : config_(&config), corpus_(&corpus), model_(&model), ablations_(ablations) {
  embedder_ = make_sentence_embedder(config, corpus.vocab, model.encoder());
  embeddings_.dim = embedder_->dim();
  for (const auto& p : corpus.pairs) {
    embeddings_.query.push_back(embed_or_zero(*embedder_, p.query));
    embeddings_.response.push_back(embed_or_zero(*embedder_, p.response));
  }

  snapshot_ = build_snapshot(corpus, embeddings_, split.train_last_ts,
                             config.aggregation == "mean" ? Aggregation::Mean : Aggregation::Sum);
  similar_.resize(corpus.users.size());
  if (ablations_.user_refiner) {
    const auto sim = msp::similar_users(snapshot_, config.k_u, config.normalize_user_vectors);
    for (std::size_t u = 0; u < corpus.users.size(); ++u) {
      auto it = sim.find(corpus.users[u].user_id);
      if (it != sim.end()) similar_[u] = it->second;
    }
  } else {
    std::vector<std::string> indexed;
    for (const auto& [id, v] : snapshot_.vectors) indexed.push_back(id);
    for (std::size_t u = 0; u < corpus.users.size(); ++u) {
      std::vector<std::string> others;
      for (const auto& id : indexed)
        if (id != corpus.users[u].user_id) others.push_back(id);
      Rng rng(config.seed * 0x9E3779B97F4A7C15ULL + u);
      rng.shuffle(others);
      others.resize(std::min(others.size(), config.k_u));
      std::sort(others.begin(), others.end());
      similar_[u] = std::move(others);
    }
  }

  if (!classifier && !config.topic_model.empty()) classifier = TopicClassifier::load(config.topic_model);
  if (classifier) {
    if (classifier->input_dim() != embeddings_.dim || classifier->topics() != config.topics) {
      throw DataError("topic classifier shape does not match the configured embedder and topic count");
    }
    classifier_ = std::move(classifier);
    topic_label_source_ = "loaded";
  } else {
    classifier_ = train_topics(config, corpus, split, embeddings_, &topic_train_accuracy_, &topic_label_source_);
  }
  pair_topic_.reserve(corpus.pairs.size());
  for (std::size_t p = 0; p < corpus.pairs.size(); ++p) pair_topic_.push_back(classifier_->classify(embeddings_.query[p]).argmax);

  query_states_.resize(corpus.pairs.size());
  response_states_.resize(corpus.pairs.size());

  if (ablations_.bm25) {
    std::vector<std::vector<TokenId>> docs;
    for (const auto& p : corpus.pairs) docs.push_back(p.response);
    bm25_ = std::make_unique<Bm25>(docs, config.bm25_k1, config.bm25_b);
  }
}

void ProfilePipeline::ensure_states(std::span<const std::size_t> query_pairs,
                                    std::span<const std::size_t> response_pairs) const {
  NoGradGuard no_grad;
  std::vector<std::vector<TokenId>> seqs;
  std::vector<Tensor*> slots;
  for (std::size_t p : query_pairs) {
    if (query_states_.at(p).defined()) continue;
    seqs.push_back(corpus_->pairs[p].query);
    slots.push_back(&query_states_[p]);
    query_states_[p] = Tensor::zeros({1, 1});  // placeholder so duplicates are encoded once
  }
  for (std::size_t p : response_pairs) {
    if (response_states_.at(p).defined()) continue;
    seqs.push_back(corpus_->pairs[p].response);
    slots.push_back(&response_states_[p]);
    response_states_[p] = Tensor::zeros({1, 1});
  }
  if (seqs.empty()) return;
  const auto batch = model_->encoder().encode_batch(seqs);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& seg = batch.segments[i];
    *slots[i] = slice_rows(batch.states, seg.begin, seg.begin + seg.length);
  }
}

const Tensor& ProfilePipeline::query_states(std::size_t pair) const {
  ensure_states(std::span<const std::size_t>(&pair, 1), {});
  return query_states_[pair];
}

const Tensor& ProfilePipeline::response_states(std::size_t pair) const {
  ensure_states({}, std::span<const std::size_t>(&pair, 1));
  return response_states_[pair];
}

void ProfilePipeline::invalidate_states() const {
  for (auto& t : query_states_) t = Tensor();
  for (auto& t : response_states_) t = Tensor();
}

Tensor ProfilePipeline::encode(std::span<const TokenId> ids) const {
  NoGradGuard no_grad;
  return model_->encoder().encode(ids).states;
}

ProfileRequest ProfilePipeline::request_for(const TrainingTriplet& triplet) const {
  const auto& pair = corpus_->pair_of(triplet);
  return {triplet.user, pair.query, pair.ts, triplet.pair};
}

int ProfilePipeline::query_topic(const ProfileRequest& request) const {
  if (request.pair) return pair_topic_[*request.pair];
  return classifier_->classify(embed_or_zero(*embedder_, request.query)).argmax;
}

std::vector<std::size_t> ProfilePipeline::visible(std::size_t user, std::int64_t before_ts) const {
  const auto& pairs = corpus_->users.at(user).pairs;
  std::vector<std::size_t> out;
  for (std::size_t p : pairs) {
    if (corpus_->pairs[p].ts >= before_ts) break;
    out.push_back(p);
  }
  return out;
}

std::vector<std::size_t> ProfilePipeline::per_candidates(const ProfileRequest& request, int query_topic) const {
  if (!request.user) return {};
  const auto history = visible(*request.user, request.before_ts);
  if (!ablations_.topic_refiner) return history;
  return filter_history_or_recent(history, pair_topic_, query_topic, config_->fallback_recent);
}

std::vector<std::size_t> ProfilePipeline::sim_candidates(const ProfileRequest& request, int query_topic) const {
  if (!request.user) return {};
  std::vector<std::size_t> pool;
  for (const auto& id : similar_[*request.user]) {
    const auto u = corpus_->find_user(id);
    if (!u) continue;
    if (config_->restrict_to_past) {
      const auto v = visible(*u, request.before_ts);
      pool.insert(pool.end(), v.begin(), v.end());
    } else {
      const auto& all = corpus_->users[*u].pairs;
      pool.insert(pool.end(), all.begin(), all.end());
    }
  }
  std::sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) {
    return std::tie(corpus_->pairs[a].ts, a) < std::tie(corpus_->pairs[b].ts, b);
  });
  if (ablations_.topic_refiner) pool = filter_history_or_recent(pool, pair_topic_, query_topic, config_->fallback_recent);
  if (pool.size() > config_->max_sim_pairs) {
    pool.erase(pool.begin(), pool.end() - static_cast<std::ptrdiff_t>(config_->max_sim_pairs));
  }
  return pool;
}

ProfileTokens ProfilePipeline::select(const Tensor& query_states, std::span<const std::size_t> pairs, std::size_t k_p,
                                      ProfileSource source) const {
  if (pairs.empty()) return ProfileTokens{source, {}};
  ensure_states({}, pairs);
  std::vector<std::vector<TokenId>> responses;
  for (std::size_t p : pairs) {
    const auto& r = corpus_->pairs[p].response;
    const std::size_t rows = response_states_[p].rows();
    responses.emplace_back(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(std::min(rows, r.size())));
  }
  if (!ablations_.token_refiner) {
    std::vector<TokenId> all;
    for (const auto& r : responses) all.insert(all.end(), r.begin(), r.end());
    const std::size_t start = all.size() > k_p ? all.size() - k_p : 0;
    ProfileTokens out{source, {}};
    for (std::size_t i = start; i < all.size(); ++i) out.tokens.push_back({all[i], 0.0, i});
    return out;
  }
  std::vector<Tensor> parts;
  std::vector<Segment> segments;
  std::size_t offset = 0;
  for (std::size_t p : pairs) {
    parts.push_back(response_states_[p]);
    segments.push_back({offset, response_states_[p].rows()});
    offset += response_states_[p].rows();
  }
  const auto maps = model_->refiner().attend_all(query_states, concat_rows(parts), segments);
  std::vector<Tensor> a;
  for (const auto& m : maps) a.push_back(m.a);
  return select_profile(a, responses, k_p, source);
}

ProfileTokens ProfilePipeline::select_bm25(std::span<const TokenId> query, std::span<const std::size_t> pairs,
                                           std::size_t k_p, ProfileSource source) const {
  // Most recent first, so score ties go to newer responses.
  std::vector<std::size_t> candidates(pairs.rbegin(), pairs.rend());
  const auto ranked = bm25_->rank(query, candidates, config_->bm25_top);
  ProfileTokens out{source, {}};
  std::size_t position = 0;
  for (std::size_t rank = 0; rank < ranked.size() && out.size() < k_p; ++rank) {
    const double s = bm25_->score(query, ranked[rank]);
    for (TokenId t : corpus_->pairs[ranked[rank]].response) {
      if (out.size() == k_p) break;
      out.tokens.push_back({t, s, position++});
    }
  }
  return out;
}

Extraction ProfilePipeline::extract(const TrainingTriplet& triplet, std::size_t k_p) const {
  return extract(request_for(triplet), k_p);
}

Extraction ProfilePipeline::extract(const ProfileRequest& request, std::size_t k_p) const {
  if (request.query.empty()) throw ContractError("extract: empty query");
  NoGradGuard no_grad;
  Extraction ex;
  ex.full_history_tokens = request.query.size() + 1;
  if (request.user) {
    for (std::size_t p : visible(*request.user, request.before_ts)) ex.full_history_tokens += corpus_->pairs[p].response.size();
    for (const auto& id : similar_[*request.user]) {
      if (const auto u = corpus_->find_user(id)) {
        for (std::size_t p : visible(*u, request.before_ts)) ex.full_history_tokens += corpus_->pairs[p].response.size();
      }
    }
  }
  ex.per.source = ProfileSource::Cur;
  ex.sim.source = ProfileSource::Sim;

  if (ablations_.profile && request.user) {
    if (ablations_.bm25) {
      if (ablations_.per_profile) {
        ex.per_pairs = visible(*request.user, request.before_ts);
        ex.per = select_bm25(request.query, ex.per_pairs, k_p, ProfileSource::Cur);
      }
      if (ablations_.sim_profile) {
        for (std::size_t p = 0; p < corpus_->pairs.size(); ++p) {
          const auto& pair = corpus_->pairs[p];
          if (pair.ts < request.before_ts && pair.user_id != corpus_->users[*request.user].user_id) ex.sim_pairs.push_back(p);
        }
        std::sort(ex.sim_pairs.begin(), ex.sim_pairs.end(), [&](std::size_t a, std::size_t b) {
          return std::tie(corpus_->pairs[a].ts, a) < std::tie(corpus_->pairs[b].ts, b);
        });
        ex.sim = select_bm25(request.query, ex.sim_pairs, k_p, ProfileSource::Sim);
      }
    } else {
      const int topic = query_topic(request);
      const Tensor q_states = request.pair ? query_states(*request.pair) : encode(request.query);
      if (ablations_.per_profile) {
        ex.per_pairs = per_candidates(request, topic);
        ex.per = select(q_states, ex.per_pairs, k_p, ProfileSource::Cur);
      }
      if (ablations_.sim_profile) {
        ex.sim_pairs = sim_candidates(request, topic);
        ex.sim = select(q_states, ex.sim_pairs, k_p, ProfileSource::Sim);
      }
    }
  }
  ex.input = build_input(ex.sim.ids(), ex.per.ids(), request.query);
  return ex;
}

}  // namespace msp
