#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "msp/vocab.hpp"

namespace msp {

/// One (query, response) exchange; the response was written by `user_id`.
struct DialoguePair {
  std::string user_id;
  std::int64_t ts = 0;
  std::string query_text;
  std::string response_text;
  std::optional<int> topic;

  std::vector<TokenId> query;
  std::vector<TokenId> response;
};

/// All pairs answered by one user, as indices into Corpus::pairs, ascending by timestamp.
struct UserHistory {
  std::string user_id;
  std::vector<std::size_t> pairs;
};

/// A pair seen as a training example: the responder's history is the first
/// `history_len` entries of their UserHistory, all strictly earlier in time.
struct TrainingTriplet {
  std::size_t pair = 0;
  std::size_t user = 0;
  std::size_t history_len = 0;
};

class Corpus {
 public:
  std::vector<DialoguePair> pairs;  // in source order
  std::vector<UserHistory> users;   // sorted by user id
  std::vector<TrainingTriplet> triplets;
  Vocabulary vocab;

  std::optional<std::size_t> find_user(std::string_view user_id) const;
  std::span<const std::size_t> history(const TrainingTriplet& t) const;
  const DialoguePair& pair_of(const TrainingTriplet& t) const { return pairs[t.pair]; }
  std::int64_t ts_of(const TrainingTriplet& t) const { return pairs[t.pair].ts; }

  /// Rebuild the user-id lookup after `users` changes.
  void reindex();

 private:
  std::map<std::string, std::size_t, std::less<>> user_index_;
};

/// Groups pairs into user histories and triplets. Tokenises with `vocab` when
/// given, otherwise with a vocabulary built from the pairs themselves.
Corpus build_corpus(std::vector<DialoguePair> pairs, const Vocabulary* vocab = nullptr);

/// Parse the JSONL wire format: one object per line with user_id (string),
/// ts (integer), query (string), response (string), optional topic (integer).
std::vector<DialoguePair> parse_jsonl(std::string_view text, const std::string& source = "<memory>");
Corpus ingest(const std::filesystem::path& path, const Vocabulary* vocab = nullptr);
Corpus ingest_string(std::string_view text, const Vocabulary* vocab = nullptr);

std::string to_jsonl(std::span<const DialoguePair> pairs);
std::string export_jsonl(const Corpus& corpus);

struct Split {
  std::vector<TrainingTriplet> train;
  std::vector<TrainingTriplet> valid;
  std::vector<TrainingTriplet> test;
  std::int64_t train_last_ts = 0;
  std::int64_t valid_last_ts = 0;
};

/// Global (timestamp, user id) order, contiguous cuts by `ratios`.
Split chronological_split(const Corpus& corpus, std::span<const TrainingTriplet> triplets,
                          std::array<double, 3> ratios);
void write_split_manifest(const std::filesystem::path& path, const Split& split);

// ---------------------------------------------------------------------------
// Synthetic corpus with planted structure
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::size_t users = 200;
  std::size_t clusters = 5;
  std::size_t topics = 5;
  std::size_t pairs_per_user = 40;
  std::size_t vocab_size = 2000;
  std::uint64_t seed = 7;

  // Composition of the planted vocabularies.
  std::size_t topic_words = 12;       // query words per topic, shared by all clusters
  std::size_t cluster_words = 6;      // response words per (cluster, topic), disjoint
  std::size_t signature_words = 4;    // per user
  std::size_t generic_words = 80;     // chatter shared by everyone
  double persona_rate = 0.6;          // share of responses carrying persona content
};

struct SyntheticCorpus {
  std::vector<DialoguePair> pairs;  // ascending timestamp
  std::map<std::string, int> user_cluster;
  std::vector<std::string> user_ids;
  /// Distinct words the construction needs; must fit in vocab_size minus reserved ids.
  std::size_t required_vocab = 0;
};

/// Raises ContractError when the planted vocabularies cannot be disjoint within vocab_size.
SyntheticCorpus generate_synthetic(const SyntheticSpec& spec);

/// Token naming used by the generator, exposed so tests can read the planted structure back.
namespace synthetic_words {
std::string topic_word(std::size_t topic, std::size_t k);
std::string cluster_word(std::size_t cluster, std::size_t topic, std::size_t k);
std::string signature_word(std::size_t user, std::size_t k);
std::string generic_word(std::size_t k);
std::string noise_word(std::size_t k);
}  // namespace synthetic_words

}  // namespace msp
