#include "msp/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "msp/error.hpp"

namespace msp {

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::Adam ? "adam" : "adamw-with-warmup";
}

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "adamw-with-warmup" || name == "adamw") return OptimizerKind::AdamWWarmup;
  throw ContractError("unknown optimizer kind '" + name + "'");
}

Optimizer::Optimizer(OptimizerSettings settings, std::vector<std::pair<std::string, Tensor>> params)
    : settings_(settings), params_(std::move(params)) {
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

double Optimizer::lr_at(std::uint64_t step) const {
  if (settings_.kind == OptimizerKind::AdamWWarmup && settings_.warmup_steps > 0) {
    const double frac = static_cast<double>(step) / static_cast<double>(settings_.warmup_steps);
    return settings_.lr * std::min(1.0, frac);
  }
  return settings_.lr;
}

void Optimizer::step() {
  for (const auto& [name, t] : params_) {
    if (!t.has_grad()) throw ContractError("optimizer step: parameter '" + name + "' has no gradient");
  }
  ++step_;
  const double lr = lr_at(step_);
  const double b1 = settings_.beta1;
  const double b2 = settings_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const bool decoupled = settings_.kind == OptimizerKind::AdamWWarmup && settings_.weight_decay > 0.0;
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor t = params_[p].second;
    auto w = t.mutable_data();
    const auto g = t.grad();
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      if (decoupled) w[i] -= lr * settings_.weight_decay * w[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + settings_.eps);
    }
  }
}

void Optimizer::save_state(ParamContainer& out, const std::string& prefix) const {
  out.entries[prefix + "step"] = {{1}, {static_cast<double>(step_)}};
  for (std::size_t p = 0; p < params_.size(); ++p) {
    const auto& [name, t] = params_[p];
    out.entries[prefix + "m." + name] = {t.shape(), m_[p]};
    out.entries[prefix + "v." + name] = {t.shape(), v_[p]};
  }
}

void Optimizer::load_state(const ParamContainer& in, const std::string& prefix) {
  auto fetch = [&](const std::string& key) -> const std::vector<double>& {
    auto it = in.entries.find(key);
    if (it == in.entries.end()) throw DataError("optimizer state is missing '" + key + "'");
    return it->second.second;
  };
  step_ = static_cast<std::uint64_t>(fetch(prefix + "step").at(0));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    const auto& name = params_[p].first;
    const auto& m = fetch(prefix + "m." + name);
    const auto& v = fetch(prefix + "v." + name);
    if (m.size() != m_[p].size() || v.size() != v_[p].size()) {
      throw DataError("optimizer state size mismatch for '" + name + "'");
    }
    m_[p] = m;
    v_[p] = v;
  }
}

}  // namespace msp
