#include "msp/generator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "msp/error.hpp"
#include "msp/layers.hpp"

namespace msp {

namespace {

char tag_char(SegmentTag t) {
  switch (t) {
    case SegmentTag::Sim: return 's';
    case SegmentTag::Per: return 'p';
    case SegmentTag::Query: return 'q';
    case SegmentTag::Response: return 'r';
  }
  return '?';
}

}  // namespace

std::string GenerationInput::serialize() const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tag_char(tags[i]);
    out += ':';
    out += std::to_string(tokens[i]);
  }
  return out;
}

GenerationInput GenerationInput::parse(std::string_view text) {
  GenerationInput in;
  for (const auto& item : tokenize(text)) {
    if (item.size() < 3 || item[1] != ':') throw DataError("malformed generation input item '" + item + "'");
    SegmentTag tag;
    switch (item[0]) {
      case 's': tag = SegmentTag::Sim; break;
      case 'p': tag = SegmentTag::Per; break;
      case 'q': tag = SegmentTag::Query; break;
      case 'r': tag = SegmentTag::Response; break;
      default: throw DataError("unknown segment tag in '" + item + "'");
    }
    in.tags.push_back(tag);
    try {
      in.tokens.push_back(std::stoi(item.substr(2)));
    } catch (const std::exception&) {
      throw DataError("malformed token id in '" + item + "'");
    }
  }
  return in;
}

GenerationInput build_input(std::span<const TokenId> sim, std::span<const TokenId> per, std::span<const TokenId> query) {
  if (query.empty()) throw ContractError("build_input: empty query");
  GenerationInput x;
  const auto append = [&](std::span<const TokenId> ids, SegmentTag tag) {
    x.tokens.insert(x.tokens.end(), ids.begin(), ids.end());
    x.tags.insert(x.tags.end(), ids.size(), tag);
  };
  append(sim, SegmentTag::Sim);
  append(per, SegmentTag::Per);
  append(query, SegmentTag::Query);
  x.tokens.push_back(kBos);
  x.tags.push_back(SegmentTag::Response);
  return x;
}

Nucleus nucleus(std::span<const double> probs, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw ContractError("nucleus: p must lie in (0, 1]");
  if (probs.empty()) throw ContractError("nucleus: empty distribution");
  std::vector<TokenId> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
    return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)];
  });
  Nucleus n;
  double mass = 0.0;
  for (TokenId id : order) {
    const double q = probs[static_cast<std::size_t>(id)];
    if (q <= 0.0) break;
    n.ids.push_back(id);
    n.probs.push_back(q);
    mass += q;
    if (mass >= p) break;
  }
  if (n.ids.empty()) throw ContractError("nucleus: distribution has no positive mass");
  for (double& q : n.probs) q /= mass;
  return n;
}

TokenId sample_from(const Nucleus& n, Rng& rng) {
  double u = rng.uniform();
  for (std::size_t i = 0; i < n.ids.size(); ++i) {
    u -= n.probs[i];
    if (u < 0.0) return n.ids[i];
  }
  return n.ids.back();
}

Generator::Generator(ParameterStore& store, std::string prefix, GeneratorConfig config, Rng& rng)
    : store_(&store), prefix_(std::move(prefix)), config_(config) {
  if (config_.vocab_size <= static_cast<std::size_t>(kFirstRegular)) throw ContractError("generator needs a vocabulary");
  if (config_.shared_embedding.empty()) {
    token_table_ = prefix_ + ".tok";
    store.add_normal(token_table_, {config_.vocab_size, config_.d}, 0.1, rng);
  } else {
    token_table_ = config_.shared_embedding;
    if (!store.contains(token_table_) || store.get(token_table_).shape() != Shape{config_.vocab_size, config_.d}) {
      throw ContractError("shared embedding '" + token_table_ + "' must be a registered (vocab_size x d) table");
    }
  }
  store.add_normal(prefix_ + ".pos", {config_.max_positions, config_.d}, 0.1, rng);
  store.add_normal(prefix_ + ".seg", {kSegmentTags, config_.d}, 0.1, rng);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    init_block(store, prefix_ + ".layer" + std::to_string(l), {config_.d, config_.heads, config_.ff}, rng);
  }
  init_layernorm(store, prefix_ + ".ln_f", config_.d);
  store.add_constant(prefix_ + ".out_b", {config_.vocab_size}, 0.0);
}

void Generator::check_length(std::size_t total) const {
  if (total > config_.max_positions) {
    throw ContractError("generator input of " + std::to_string(total) + " tokens exceeds max_positions " +
                        std::to_string(config_.max_positions));
  }
}

Tensor Generator::teacher_forced_logits(std::span<const GenerationInput> inputs,
                                        std::span<const std::vector<TokenId>> targets) const {
  if (inputs.size() != targets.size() || inputs.empty()) {
    throw ContractError("teacher forcing needs one target per input");
  }
  std::vector<int> ids;
  std::vector<int> positions;
  std::vector<int> tags;
  std::vector<Segment> segments;
  std::vector<int> rows;
  for (std::size_t e = 0; e < inputs.size(); ++e) {
    const auto& x = inputs[e];
    const auto& y = targets[e];
    if (x.tokens.empty() || x.tokens.size() != x.tags.size()) throw ContractError("malformed generation input");
    const std::size_t total = x.size() + y.size();
    check_length(total);
    const std::size_t begin = ids.size();
    segments.push_back({begin, total});
    for (std::size_t i = 0; i < total; ++i) {
      const bool in_x = i < x.size();
      ids.push_back(in_x ? x.tokens[i] : y[i - x.size()]);
      tags.push_back(static_cast<int>(in_x ? x.tags[i] : SegmentTag::Response));
      positions.push_back(static_cast<int>(i));
    }
    for (std::size_t t = 0; t <= y.size(); ++t) rows.push_back(static_cast<int>(begin + x.size() - 1 + t));
  }
  const Tensor& tok = store_->get(token_table_);
  Tensor h = add(add(embedding(tok, ids), embedding(store_->get(prefix_ + ".pos"), positions)),
                 embedding(store_->get(prefix_ + ".seg"), tags));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    h = block_forward(*store_, prefix_ + ".layer" + std::to_string(l), h, config_.heads, segments, true);
  }
  const Tensor selected = embedding(h, rows);
  const Tensor normed = apply_layernorm(*store_, prefix_ + ".ln_f", selected);
  return add_bias(matmul_nt(normed, tok), store_->get(prefix_ + ".out_b"));
}

Tensor Generator::distributions(const GenerationInput& input, std::span<const TokenId> target) const {
  GenerationInput in[1] = {input};
  std::vector<TokenId> tgt[1] = {std::vector<TokenId>(target.begin(), target.end())};
  return softmax(teacher_forced_logits(in, tgt));
}

// ---------------------------------------------------------------------------
// Incremental decoding
// ---------------------------------------------------------------------------

struct Generator::Cache {
  std::vector<std::vector<double>> keys;    // per layer, rows appended
  std::vector<std::vector<double>> values;  // per layer
  std::size_t length = 0;
};

namespace {

// y = x W + b for a single row; W is (in x out) row-major.
void row_linear(std::span<const double> x, const Tensor& w, const Tensor& b, std::vector<double>& y) {
  const std::size_t in = w.shape()[0];
  const std::size_t out = w.shape()[1];
  const auto W = w.data();
  y.assign(b.data().begin(), b.data().end());
  for (std::size_t i = 0; i < in; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const double* row = W.data() + i * out;
    for (std::size_t j = 0; j < out; ++j) y[j] += xi * row[j];
  }
}

void row_layernorm(std::span<const double> x, const Tensor& g, const Tensor& b, std::vector<double>& y) {
  const std::size_t m = x.size();
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(m);
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(m);
  const double rstd = 1.0 / std::sqrt(var + 1e-5);
  y.resize(m);
  for (std::size_t j = 0; j < m; ++j) y[j] = (x[j] - mu) * rstd * g.data()[j] + b.data()[j];
}

double gelu_scalar(double x) {
  constexpr double c = 0.7978845608028654;
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

}  // namespace

void Generator::step(Cache& cache, TokenId token, SegmentTag tag, std::vector<double>* logits) const {
  const std::size_t d = config_.d;
  const std::size_t pos = cache.length;
  check_length(pos + 1);
  if (token < 0 || static_cast<std::size_t>(token) >= config_.vocab_size) {
    throw IndexError("token id " + std::to_string(token) + " outside generator vocabulary");
  }
  const Tensor& tok = store_->get(token_table_);
  const auto te = tok.data().subspan(static_cast<std::size_t>(token) * d, d);
  const auto pe = store_->get(prefix_ + ".pos").data().subspan(pos * d, d);
  const auto se = store_->get(prefix_ + ".seg").data().subspan(static_cast<std::size_t>(tag) * d, d);
  std::vector<double> x(d);
  for (std::size_t j = 0; j < d; ++j) x[j] = (te[j] + pe[j]) + se[j];

  if (cache.keys.empty()) {
    cache.keys.resize(config_.layers);
    cache.values.resize(config_.layers);
  }
  const std::size_t heads = config_.heads;
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> h, q, k, v, att(d), o, f1, f2, scores;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = prefix_ + ".layer" + std::to_string(l);
    const auto& S = *store_;
    row_layernorm(x, S.get(p + ".ln1.g"), S.get(p + ".ln1.b"), h);
    row_linear(h, S.get(p + ".q.w"), S.get(p + ".q.b"), q);
    row_linear(h, S.get(p + ".k.w"), S.get(p + ".k.b"), k);
    row_linear(h, S.get(p + ".v.w"), S.get(p + ".v.b"), v);
    auto& K = cache.keys[l];
    auto& V = cache.values[l];
    K.insert(K.end(), k.begin(), k.end());
    V.insert(V.end(), v.begin(), v.end());
    const std::size_t n = pos + 1;
    std::fill(att.begin(), att.end(), 0.0);
    scores.resize(n);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t off = hd * dh;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < dh; ++t) s += q[off + t] * K[j * d + off + t];
        scores[j] = s * inv_sqrt;
        mx = std::max(mx, scores[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        z += scores[j];
      }
      for (std::size_t j = 0; j < n; ++j) {
        const double w = scores[j] / z;
        for (std::size_t t = 0; t < dh; ++t) att[off + t] += w * V[j * d + off + t];
      }
    }
    row_linear(att, S.get(p + ".o.w"), S.get(p + ".o.b"), o);
    for (std::size_t j = 0; j < d; ++j) x[j] += o[j];
    row_layernorm(x, S.get(p + ".ln2.g"), S.get(p + ".ln2.b"), h);
    row_linear(h, S.get(p + ".ff1.w"), S.get(p + ".ff1.b"), f1);
    for (double& e : f1) e = gelu_scalar(e);
    row_linear(f1, S.get(p + ".ff2.w"), S.get(p + ".ff2.b"), f2);
    for (std::size_t j = 0; j < d; ++j) x[j] += f2[j];
  }
  cache.length = pos + 1;
  if (!logits) return;
  row_layernorm(x, store_->get(prefix_ + ".ln_f.g"), store_->get(prefix_ + ".ln_f.b"), h);
  const auto T = tok.data();
  const auto ob = store_->get(prefix_ + ".out_b").data();
  logits->resize(config_.vocab_size);
  for (std::size_t w = 0; w < config_.vocab_size; ++w) {
    const double* row = T.data() + w * d;
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += h[j] * row[j];
    (*logits)[w] = s + ob[w];
  }
}

std::vector<double> Generator::next_logits(const GenerationInput& input, std::span<const TokenId> prefix) const {
  if (input.tokens.empty()) throw ContractError("next_logits: empty input");
  check_length(input.size() + prefix.size());
  Cache cache;
  std::vector<double> logits;
  const std::size_t total = input.size() + prefix.size();
  for (std::size_t i = 0; i < total; ++i) {
    const bool in_x = i < input.size();
    step(cache, in_x ? input.tokens[i] : prefix[i - input.size()], in_x ? input.tags[i] : SegmentTag::Response,
         i + 1 == total ? &logits : nullptr);
  }
  return logits;
}

std::vector<TokenId> Generator::sample(const GenerationInput& input, const SampleOptions& options, Rng& rng,
                                       std::vector<std::size_t>* nucleus_sizes) const {
  if (options.max_len == 0) throw ContractError("sample: max_len must be >= 1");
  if (input.tokens.empty()) throw ContractError("sample: empty input");
  check_length(input.size());
  Cache cache;
  std::vector<double> logits;
  for (std::size_t i = 0; i < input.size(); ++i) {
    step(cache, input.tokens[i], input.tags[i], i + 1 == input.size() ? &logits : nullptr);
  }
  std::vector<TokenId> out;
  std::vector<double> probs(config_.vocab_size);
  while (out.size() < options.max_len) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t w = 0; w < logits.size(); ++w) {
      const auto id = static_cast<TokenId>(w);
      const bool blocked = (id < kFirstRegular && id != kEos) || (id == kEos && out.empty());
      if (!blocked) mx = std::max(mx, logits[w]);
    }
    double z = 0.0;
    for (std::size_t w = 0; w < logits.size(); ++w) {
      const auto id = static_cast<TokenId>(w);
      const bool blocked = (id < kFirstRegular && id != kEos) || (id == kEos && out.empty());
      probs[w] = blocked ? 0.0 : std::exp(logits[w] - mx);
      z += probs[w];
    }
    for (double& pr : probs) pr /= z;
    const Nucleus n = nucleus(probs, options.p);
    if (nucleus_sizes) nucleus_sizes->push_back(n.ids.size());
    const TokenId next = sample_from(n, rng);
    if (next == kEos) break;
    out.push_back(next);
    if (out.size() == options.max_len || cache.length + 1 > config_.max_positions) break;
    step(cache, next, SegmentTag::Response, &logits);
  }
  return out;
}

std::vector<int> generation_targets(std::span<const std::vector<TokenId>> targets) {
  std::vector<int> out;
  for (const auto& y : targets) {
    out.insert(out.end(), y.begin(), y.end());
    out.push_back(kEos);
  }
  return out;
}

Tensor generation_loss(const Tensor& logits, std::span<const int> targets) { return cross_entropy(logits, targets); }

}  // namespace msp
