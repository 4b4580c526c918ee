#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "msp/optimizer.hpp"
#include "msp/token_refiner.hpp"

namespace msp {

/// Everything a run needs, grouped by INI section. Field defaults are the
/// desk-scale defaults; configs/default.ini lists reference-scale values.
struct RunConfig {
  // [corpus]
  std::string corpus_path;
  std::array<double, 3> split{0.8, 0.1, 0.1};

  // [model]
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t ff = 128;
  std::size_t encoder_max_positions = 128;
  std::size_t decoder_max_positions = 256;
  MatchingHeadConfig head;
  bool share_embeddings = true;  // generator reuses (and trains) the encoder token table
  std::string sentence_embedder = "bow";  // bow | cls | mean
  std::size_t bow_dim = 256;
  std::uint64_t bow_seed = 11;

  // [refiner]
  std::size_t k_u = 10;
  std::size_t k_p = 30;
  std::size_t topics = 5;
  std::size_t topic_hidden = 32;
  std::size_t topic_epochs = 60;
  double topic_lr = 1e-2;
  std::string topic_labels = "auto";  // auto | corpus | kmeans
  std::string topic_model;            // pretrained classifier file; empty trains one per run
  std::size_t fallback_recent = 3;
  std::size_t max_sim_pairs = 40;
  bool restrict_to_past = true;
  bool normalize_user_vectors = false;
  std::string aggregation = "sum";  // sum | mean

  // [train]
  std::size_t n_s = 16;
  std::size_t n_d = 16;
  std::size_t n_f = 200;
  double alpha = 0.1;
  std::size_t max_steps = 1000;
  std::size_t eval_interval = 100;
  std::size_t patience = 5;
  std::size_t valid_samples = 64;
  std::size_t sentences_cur = 4;
  std::size_t sentences_sim = 4;
  OptimizerSettings refiner_optimizer{.kind = OptimizerKind::Adam, .lr = 1e-3};
  OptimizerSettings generator_optimizer{
      .kind = OptimizerKind::AdamWWarmup, .lr = 2e-3, .warmup_steps = 100, .weight_decay = 0.01};
  bool separate_nonpersonalized = false;
  std::uint64_t seed = 1;
  bool test_mode = false;

  // [generate]
  double top_p = 0.9;
  std::size_t max_len = 20;
  std::uint64_t sample_seed = 7;

  // [eval]
  std::size_t eval_samples = 200;
  bool coverage_against_reference = false;
  std::vector<std::size_t> sweep_k_p{1, 5, 10, 20, 30, 50, 100};
  std::size_t bm25_top = 15;
  double bm25_k1 = 1.2;
  double bm25_b = 0.75;

  /// Throws DataError on an unknown key or a malformed value.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  /// Range and consistency checks.
  void validate() const;

  /// INI text with every key, grouped by section.
  std::string to_ini() const;
  static RunConfig parse_ini(const std::string& text, const std::string& source = "<config>");
  static RunConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

}  // namespace msp
