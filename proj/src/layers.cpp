#include "msp/layers.hpp"

#include <cmath>

#include "msp/error.hpp"

namespace msp {

void init_linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  store.add_normal(name + ".w", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  store.add_constant(name + ".b", {out}, 0.0);
}

Tensor linear(const ParameterStore& store, const std::string& name, const Tensor& x) {
  return add_bias(matmul(x, store.get(name + ".w")), store.get(name + ".b"));
}

void init_layernorm(ParameterStore& store, const std::string& name, std::size_t d) {
  store.add_constant(name + ".g", {d}, 1.0);
  store.add_constant(name + ".b", {d}, 0.0);
}

Tensor apply_layernorm(const ParameterStore& store, const std::string& name, const Tensor& x) {
  return layernorm(x, store.get(name + ".g"), store.get(name + ".b"));
}

void init_block(ParameterStore& store, const std::string& prefix, const BlockDims& dims, Rng& rng) {
  if (dims.heads == 0 || dims.d % dims.heads != 0) {
    throw ContractError("model dimension " + std::to_string(dims.d) + " is not divisible by " +
                        std::to_string(dims.heads) + " heads");
  }
  init_layernorm(store, prefix + ".ln1", dims.d);
  init_linear(store, prefix + ".q", dims.d, dims.d, rng);
  init_linear(store, prefix + ".k", dims.d, dims.d, rng);
  init_linear(store, prefix + ".v", dims.d, dims.d, rng);
  init_linear(store, prefix + ".o", dims.d, dims.d, rng);
  init_layernorm(store, prefix + ".ln2", dims.d);
  init_linear(store, prefix + ".ff1", dims.d, dims.ff, rng);
  init_linear(store, prefix + ".ff2", dims.ff, dims.d, rng);
}

Tensor block_forward(const ParameterStore& store, const std::string& prefix, const Tensor& x, std::size_t heads,
                     std::span<const Segment> segments, bool causal) {
  const Tensor h = apply_layernorm(store, prefix + ".ln1", x);
  const Tensor att = multi_head_attention(linear(store, prefix + ".q", h), linear(store, prefix + ".k", h),
                                          linear(store, prefix + ".v", h), heads, segments, causal);
  const Tensor x1 = add(x, linear(store, prefix + ".o", att));
  const Tensor h2 = apply_layernorm(store, prefix + ".ln2", x1);
  return add(x1, linear(store, prefix + ".ff2", gelu(linear(store, prefix + ".ff1", h2))));
}

}  // namespace msp
