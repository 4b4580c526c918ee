#include "msp/evaluation.hpp"

#include <set>

#include "msp/error.hpp"

namespace msp {

Response respond(const MspModel& model, const ProfilePipeline& pipeline, const ProfileRequest& request,
                 std::size_t k_p, bool no_profile, const Generator::SampleOptions& options, std::uint64_t seed) {
  Response out;
  Rng rng(seed);
  if (no_profile) {
    out.extraction.input = build_input({}, {}, request.query);
    out.ids = model.plain_generator().sample(out.extraction.input, options, rng, &out.nucleus_sizes);
  } else {
    out.extraction = pipeline.extract(request, k_p);
    out.ids = model.generator().sample(out.extraction.input, options, rng, &out.nucleus_sizes);
  }
  if (!out.ids.empty() && out.ids.back() == kEos) out.ids.pop_back();
  return out;
}

Sentence words_of(const Vocabulary& vocab, std::span<const TokenId> ids) {
  Sentence s;
  for (TokenId id : ids) s.push_back(vocab.token(id));
  return s;
}

std::vector<Sentence> history_sentences(const Corpus& corpus, const ProfileRequest& request) {
  std::vector<Sentence> out;
  if (!request.user) return out;
  for (std::size_t p : corpus.users[*request.user].pairs) {
    if (corpus.pairs[p].ts >= request.before_ts) break;
    out.push_back(tokenize(corpus.pairs[p].response_text));
  }
  return out;
}

WordVectors bow_word_vectors(const Vocabulary& vocab, const RunConfig& config) {
  auto ignored = ignored_ids(vocab, default_stopwords());
  auto embedder = std::make_shared<BagOfWordsEmbedder>(
      config.bow_dim == 0 ? BagOfWordsEmbedder::identity(vocab.size(), ignored)
                          : BagOfWordsEmbedder(vocab.size(), config.bow_dim, config.bow_seed, ignored));
  return [embedder, &vocab](const std::string& word) -> std::optional<std::vector<double>> {
    const auto id = vocab.find(word);
    if (!id || embedder->ignores(*id)) return std::nullopt;
    return embedder->token_vector(*id);
  };
}

IdfTable idf_over_histories(std::span<const EvalSample> samples) {
  std::set<Sentence> distinct;
  for (const auto& s : samples) distinct.insert(s.history.begin(), s.history.end());
  std::vector<Sentence> docs(distinct.begin(), distinct.end());
  return IdfTable::build(docs);
}

MetricReport score_samples(std::span<const EvalSample> samples, const Vocabulary& vocab, const RunConfig& config) {
  MetricOptions options;
  options.stopwords = std::set<std::string>(default_stopwords().begin(), default_stopwords().end());
  options.coverage_against_reference = config.coverage_against_reference;
  return evaluate(samples, idf_over_histories(samples), bow_word_vectors(vocab, config), options);
}

HeldOutRun evaluate_triplets(const RunConfig& config, const Corpus& corpus, const MspModel& model,
                             const ProfilePipeline& pipeline, std::span<const TrainingTriplet> triplets,
                             std::size_t limit, std::size_t k_p, bool no_profile, std::uint64_t seed) {
  HeldOutRun run;
  const std::size_t n = std::min(limit, triplets.size());
  const Generator::SampleOptions options{config.top_p, config.max_len};
  for (std::size_t i = 0; i < n; ++i) {
    const auto req = pipeline.request_for(triplets[i]);
    auto r = respond(model, pipeline, req, k_p, no_profile, options, seed + i);
    run.samples.push_back({words_of(corpus.vocab, r.ids), tokenize(corpus.pair_of(triplets[i]).response_text),
                           history_sentences(corpus, req)});
    run.responses.push_back(std::move(r));
  }
  run.report = score_samples(run.samples, corpus.vocab, config);
  return run;
}

}  // namespace msp
