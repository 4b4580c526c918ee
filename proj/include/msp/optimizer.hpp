#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "msp/params.hpp"
#include "msp/tensor.hpp"

namespace msp {

enum class OptimizerKind { Adam, AdamWWarmup };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& name);

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t warmup_steps = 0;  // AdamWWarmup only
  double weight_decay = 0.0;       // AdamWWarmup only
};

/// Adam, or AdamW with linear warm-up, over a fixed list of named parameters.
/// Gradients are read, never cleared: resetting them is the caller's job.
class Optimizer {
 public:
  Optimizer(OptimizerSettings settings, std::vector<std::pair<std::string, Tensor>> params);

  void step();

  /// Learning rate applied at 1-based step `step`.
  double lr_at(std::uint64_t step) const;
  /// Learning rate the most recent step used (0 before the first step).
  double last_lr() const { return step_ == 0 ? 0.0 : lr_at(step_); }

  std::uint64_t step_count() const { return step_; }
  const OptimizerSettings& settings() const { return settings_; }

  void save_state(ParamContainer& out, const std::string& prefix) const;
  void load_state(const ParamContainer& in, const std::string& prefix);

 private:
  OptimizerSettings settings_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::uint64_t step_ = 0;
};

}  // namespace msp
