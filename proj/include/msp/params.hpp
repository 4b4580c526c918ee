#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "msp/rng.hpp"
#include "msp/tensor.hpp"

namespace msp {

/// Named trainable tensors. Iteration order is the lexicographic name order,
/// which keeps optimizer updates and serialisation deterministic.
class ParameterStore {
 public:
  Tensor& add(const std::string& name, Tensor value);
  Tensor& add_normal(const std::string& name, Shape shape, double stddev, Rng& rng);
  Tensor& add_constant(const std::string& name, Shape shape, double value);

  bool contains(const std::string& name) const { return params_.contains(name); }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;

  /// Parameters whose names start with any of `prefixes` (all when empty).
  std::vector<std::pair<std::string, Tensor>> select(const std::vector<std::string>& prefixes = {}) const;

  void zero_grad(const std::vector<std::string>& prefixes = {});

  /// FNV-1a over names and raw bytes, for parameter-isolation checks.
  std::uint64_t hash(const std::vector<std::string>& prefixes = {}) const;

  std::size_t size() const { return params_.size(); }
  const std::map<std::string, Tensor>& all() const { return params_; }

 private:
  std::map<std::string, Tensor> params_;
};

/// Versioned binary container: a text header of hyperparameters followed by
/// (name, shape, float64 little-endian data) entries.
///
///   magic "MSPPARAM" | u32 version | u32 header bytes | header text
///   | u64 count | { u32 name bytes | name | u32 rank | u64 dims[rank] | f64 data[] }*
struct ParamContainer {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::uint32_t version = kFormatVersion;
  std::map<std::string, std::string> header;
  std::map<std::string, std::pair<Shape, std::vector<double>>> entries;

  void put(const std::string& name, const Tensor& t);
  void put_all(const ParameterStore& store, const std::string& prefix = "");
  /// Overwrite values of existing parameters; shapes must agree.
  void load_into(ParameterStore& store, const std::string& prefix = "") const;

  void write(const std::filesystem::path& path) const;
  static ParamContainer read(const std::filesystem::path& path);
};

}  // namespace msp
