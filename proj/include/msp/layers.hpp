#pragma once

#include <span>
#include <string>

#include "msp/params.hpp"
#include "msp/rng.hpp"
#include "msp/tensor.hpp"

namespace msp {

/// Registers `name.w` (in x out) and `name.b` (out).
void init_linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng);
Tensor linear(const ParameterStore& store, const std::string& name, const Tensor& x);

struct BlockDims {
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t ff = 128;
};

/// Pre-LN transformer block: x + MHA(LN(x)), then + FF(LN(.)) with GELU.
void init_block(ParameterStore& store, const std::string& prefix, const BlockDims& dims, Rng& rng);
Tensor block_forward(const ParameterStore& store, const std::string& prefix, const Tensor& x, std::size_t heads,
                     std::span<const Segment> segments, bool causal);

void init_layernorm(ParameterStore& store, const std::string& name, std::size_t d);
Tensor apply_layernorm(const ParameterStore& store, const std::string& name, const Tensor& x);

}  // namespace msp
