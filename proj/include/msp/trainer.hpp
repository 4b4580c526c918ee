#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "msp/config.hpp"
#include "msp/corpus.hpp"
#include "msp/optimizer.hpp"
#include "msp/pipeline.hpp"

namespace msp {

/// One line of the training log.
struct StepRecord {
  std::size_t step = 0;
  std::string phase;  // refiner | generator | generator0 | valid
  std::optional<double> loss;
  double lr = 0.0;
  std::size_t examples = 0;
  std::string skipped;  // reason, when the phase did not run
};

struct TrainSummary {
  std::size_t steps = 0;
  bool plateaued = false;
  double best_valid = 0.0;
  std::filesystem::path last_checkpoint;
};

/// Alternating refiner / generator optimisation. Each iteration advances the
/// step counter, runs a refiner step on a batch drawn from one stream, then,
/// once the counter exceeds n_f, a generator step on a batch from another.
///
/// With an output directory the trainer writes config.ini, split.txt,
/// train.log.jsonl (deterministic), timing.log (wall-clock) and
/// checkpoints/step-NNNNNN/ at every eval interval.
class Trainer {
 public:
  Trainer(RunConfig config, const Corpus& corpus, Ablations ablations = {}, std::filesystem::path out_dir = {});
  ~Trainer();

  /// Continue from `checkpoint`; the log in `out_dir` is cut back to the checkpoint step.
  static std::unique_ptr<Trainer> resume(const std::filesystem::path& checkpoint, const Corpus& corpus,
                                         std::filesystem::path out_dir = {});

  /// L^s of one refiner batch; nullopt when no example has history to match.
  std::optional<double> refiner_step();
  /// L^g of one generator batch. Throws ContractError while step() <= n_f.
  double generator_step();
  void run_iteration();
  TrainSummary train();

  double validation_loss() const;
  std::filesystem::path save_checkpoint();

  std::size_t step() const { return step_; }
  const std::vector<StepRecord>& records() const { return records_; }
  /// Mean generator loss over the last `window` generator steps.
  double recent_generator_loss(std::size_t window) const;
  std::vector<double> refiner_losses() const;

  const RunConfig& config() const { return *config_; }
  const Ablations& ablations() const { return ablations_; }
  const Split& split() const { return split_; }
  MspModel& model() { return *model_; }
  const MspModel& model() const { return *model_; }
  const ProfilePipeline& pipeline() const { return *pipeline_; }

 private:
  struct Resume;
  Trainer(std::unique_ptr<RunConfig> config, const Corpus& corpus, Ablations ablations, std::filesystem::path out_dir,
          const Resume* resume);

  void log(const StepRecord& r, double wall_ms);
  void check_unchanged(std::uint64_t before, const std::vector<std::string>& prefixes, const char* what) const;
  std::vector<std::string> frozen_during_refiner() const;

  std::unique_ptr<RunConfig> config_;
  const Corpus* corpus_;
  Ablations ablations_;
  std::filesystem::path out_dir_;
  Split split_;
  std::unique_ptr<MspModel> model_;
  std::unique_ptr<ProfilePipeline> pipeline_;
  std::unique_ptr<Optimizer> refiner_opt_;
  std::unique_ptr<Optimizer> generator_opt_;
  std::unique_ptr<Optimizer> plain_opt_;
  Rng rng_q_;
  Rng rng_p_;
  std::size_t step_ = 0;
  double best_valid_ = 0.0;
  bool has_best_ = false;
  std::size_t bad_evals_ = 0;
  std::vector<StepRecord> records_;
  std::ofstream log_;
  std::ofstream timing_;
};

/// A trained model rebuilt from a checkpoint against a corpus.
struct RestoredModel {
  std::unique_ptr<RunConfig> config;
  Ablations ablations;
  std::size_t step = 0;
  Split split;
  std::unique_ptr<MspModel> model;
  std::unique_ptr<ProfilePipeline> pipeline;
};

/// Throws DataError when the corpus vocabulary differs from the checkpoint's.
RestoredModel restore_model(const std::filesystem::path& checkpoint, const Corpus& corpus,
                            std::optional<Ablations> ablations = std::nullopt);

/// Directory name of the newest checkpoint under `run_dir`/checkpoints, or `run_dir` itself if it is one.
std::filesystem::path resolve_checkpoint(const std::filesystem::path& run_dir);

}  // namespace msp
