#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "msp/config.hpp"
#include "msp/metrics.hpp"
#include "msp/pipeline.hpp"

namespace msp {

struct Response {
  std::vector<TokenId> ids;  // without EOS
  std::vector<std::size_t> nucleus_sizes;
  Extraction extraction;
};

/// Profile extraction then nucleus sampling. With `no_profile` the plain
/// generator answers from the query alone.
Response respond(const MspModel& model, const ProfilePipeline& pipeline, const ProfileRequest& request,
                 std::size_t k_p, bool no_profile, const Generator::SampleOptions& options, std::uint64_t seed);

/// The responder's visible past responses as word lists.
std::vector<Sentence> history_sentences(const Corpus& corpus, const ProfileRequest& request);

Sentence words_of(const Vocabulary& vocab, std::span<const TokenId> ids);

/// Token rows of the configured bag-of-words projection; stopwords and unknown words have no vector.
WordVectors bow_word_vectors(const Vocabulary& vocab, const RunConfig& config);

/// IDF over the distinct history sentences of the samples.
IdfTable idf_over_histories(std::span<const EvalSample> samples);

MetricReport score_samples(std::span<const EvalSample> samples, const Vocabulary& vocab, const RunConfig& config);

struct HeldOutRun {
  std::vector<EvalSample> samples;
  std::vector<Response> responses;
  MetricReport report;
};

/// Generates for the first `limit` triplets (sample i uses seed + i) and scores them.
HeldOutRun evaluate_triplets(const RunConfig& config, const Corpus& corpus, const MspModel& model,
                             const ProfilePipeline& pipeline, std::span<const TrainingTriplet> triplets,
                             std::size_t limit, std::size_t k_p, bool no_profile, std::uint64_t seed);

}  // namespace msp
