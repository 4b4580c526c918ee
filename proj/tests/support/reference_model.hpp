#pragma once

// Plain-loop forward passes used as oracles for the tape-based models.

#include <cmath>
#include <string>
#include <vector>

#include "msp/params.hpp"

namespace msp::testing {

using Rows = std::vector<std::vector<double>>;

inline std::vector<double> values(const ParameterStore& s, const std::string& name) {
  const auto d = s.get(name).data();
  return {d.begin(), d.end()};
}

inline std::vector<double> ref_layernorm(const std::vector<double>& x, const std::vector<double>& g,
                                         const std::vector<double>& b) {
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * g[i] + b[i];
  return out;
}

inline std::vector<double> ref_linear(const std::vector<double>& x, const std::vector<double>& w,
                                      const std::vector<double>& b) {
  const std::size_t out = b.size();
  std::vector<double> y(b);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < out; ++j) y[j] += x[i] * w[i * out + j];
  return y;
}

inline double ref_gelu(double x) {
  const double pi = 3.14159265358979323846;
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / pi) * (x + 0.044715 * x * x * x)));
}

inline Rows ref_block(const ParameterStore& s, const std::string& p, const Rows& x, std::size_t heads, bool causal) {
  const std::size_t n = x.size();
  const std::size_t d = x[0].size();
  const std::size_t dh = d / heads;
  Rows q(n), k(n), v(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto h = ref_layernorm(x[i], values(s, p + ".ln1.g"), values(s, p + ".ln1.b"));
    q[i] = ref_linear(h, values(s, p + ".q.w"), values(s, p + ".q.b"));
    k[i] = ref_linear(h, values(s, p + ".k.w"), values(s, p + ".k.b"));
    v[i] = ref_linear(h, values(s, p + ".v.w"), values(s, p + ".v.b"));
  }
  Rows out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> att(d, 0.0);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t last = causal ? i + 1 : n;
      std::vector<double> w(last);
      double mx = -1e300;
      for (std::size_t j = 0; j < last; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[i][hd * dh + c] * k[j][hd * dh + c];
        w[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, w[j]);
      }
      double z = 0.0;
      for (double& e : w) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < last; ++j)
        for (std::size_t c = 0; c < dh; ++c) att[hd * dh + c] += w[j] / z * v[j][hd * dh + c];
    }
    auto x1 = x[i];
    const auto o = ref_linear(att, values(s, p + ".o.w"), values(s, p + ".o.b"));
    for (std::size_t c = 0; c < d; ++c) x1[c] += o[c];
    const auto h2 = ref_layernorm(x1, values(s, p + ".ln2.g"), values(s, p + ".ln2.b"));
    auto f = ref_linear(h2, values(s, p + ".ff1.w"), values(s, p + ".ff1.b"));
    for (double& e : f) e = ref_gelu(e);
    const auto f2 = ref_linear(f, values(s, p + ".ff2.w"), values(s, p + ".ff2.b"));
    for (std::size_t c = 0; c < d; ++c) x1[c] += f2[c];
    out[i] = x1;
  }
  return out;
}

inline Rows embed_rows(const ParameterStore& s, const std::string& table, const std::vector<int>& ids) {
  const auto t = values(s, table);
  const std::size_t d = s.get(table).shape()[1];
  Rows out;
  for (int id : ids) out.emplace_back(t.begin() + static_cast<std::ptrdiff_t>(id * d), t.begin() + static_cast<std::ptrdiff_t>((id + 1) * d));
  return out;
}

inline void add_rows(Rows& a, const Rows& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
}

/// Encoder states: token + position embeddings, blocks, final layer norm.
inline Rows ref_encoder(const ParameterStore& s, const std::string& p, const std::vector<int>& ids, std::size_t layers,
                        std::size_t heads) {
  Rows x = embed_rows(s, p + ".tok", ids);
  std::vector<int> pos(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) pos[i] = static_cast<int>(i);
  add_rows(x, embed_rows(s, p + ".pos", pos));
  for (std::size_t l = 0; l < layers; ++l) x = ref_block(s, p + ".layer" + std::to_string(l), x, heads, false);
  for (auto& r : x) r = ref_layernorm(r, values(s, p + ".ln_f.g"), values(s, p + ".ln_f.b"));
  return x;
}

/// Decoder logits at every position of `ids` (tags per position), output tied to `table`.
inline Rows ref_decoder_logits(const ParameterStore& s, const std::string& p, const std::string& table,
                               const std::vector<int>& ids, const std::vector<int>& tags, std::size_t layers,
                               std::size_t heads) {
  Rows x = embed_rows(s, table, ids);
  std::vector<int> pos(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) pos[i] = static_cast<int>(i);
  add_rows(x, embed_rows(s, p + ".pos", pos));
  add_rows(x, embed_rows(s, p + ".seg", tags));
  for (std::size_t l = 0; l < layers; ++l) x = ref_block(s, p + ".layer" + std::to_string(l), x, heads, true);
  const auto t = values(s, table);
  const auto ob = values(s, p + ".out_b");
  const std::size_t d = x[0].size();
  Rows out;
  for (auto& r : x) {
    const auto h = ref_layernorm(r, values(s, p + ".ln_f.g"), values(s, p + ".ln_f.b"));
    std::vector<double> logits(ob);
    for (std::size_t w = 0; w < ob.size(); ++w)
      for (std::size_t j = 0; j < d; ++j) logits[w] += h[j] * t[w * d + j];
    out.push_back(logits);
  }
  return out;
}

}  // namespace msp::testing
