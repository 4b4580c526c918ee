#include "msp/token_refiner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "msp/error.hpp"
#include "msp/layers.hpp"

namespace msp {

TokenRefiner::TokenRefiner(ParameterStore& store, std::string prefix, std::size_t d, Rng& rng)
    : store_(&store), prefix_(std::move(prefix)), d_(d) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  store.add_normal(prefix_ + ".wq", {d, d}, sd, rng);
  store.add_normal(prefix_ + ".wk", {d, d}, sd, rng);
  store.add_normal(prefix_ + ".wv", {d, d}, sd, rng);
}

AttentionMap TokenRefiner::attend(const Tensor& query_states, const Tensor& response_states) const {
  const Segment all{0, response_states.rows()};
  return attend_all(query_states, response_states, std::span<const Segment>(&all, 1)).front();
}

std::vector<AttentionMap> TokenRefiner::attend_all(const Tensor& query_states, const Tensor& response_states,
                                                   std::span<const Segment> segments) const {
  if (query_states.rank() != 2 || query_states.rows() == 0) throw ContractError("cross_attention: empty query");
  if (response_states.rank() != 2 || response_states.rows() == 0) {
    throw ContractError("cross_attention: empty history response");
  }
  const Tensor q = matmul(query_states, store_->get(prefix_ + ".wq"));
  const Tensor k = matmul(response_states, store_->get(prefix_ + ".wk"));
  const Tensor v = matmul(response_states, store_->get(prefix_ + ".wv"));
  const double inv = 1.0 / std::sqrt(static_cast<double>(d_));
  std::vector<AttentionMap> maps;
  maps.reserve(segments.size());
  for (const auto& seg : segments) {
    if (seg.length == 0) throw ContractError("cross_attention: empty history response");
    const Tensor ks = slice_rows(k, seg.begin, seg.begin + seg.length);
    const Tensor vs = slice_rows(v, seg.begin, seg.begin + seg.length);
    maps.push_back({softmax(scale(matmul_nt(q, ks), inv)), vs});
  }
  return maps;
}

AttentionMap TokenRefiner::cross_attention(std::span<const TokenId> query, std::span<const TokenId> response,
                                           const TransformerEncoder& encoder) const {
  if (query.empty()) throw ContractError("cross_attention: empty query");
  if (response.empty()) throw ContractError("cross_attention: empty history response");
  return attend(encoder.encode(query).states, encoder.encode(response).states);
}

std::string to_string(ProfileSource source) { return source == ProfileSource::Sim ? "sim" : "cur"; }

std::vector<TokenId> ProfileTokens::ids() const {
  std::vector<TokenId> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(t.id);
  return out;
}

std::vector<double> column_max(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("column_max expects a matrix, got " + shape_to_string(a.shape()));
  const std::size_t n = a.rows();
  const std::size_t m = a.cols();
  const auto x = a.data();
  std::vector<double> out(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(m));
  for (std::size_t i = 1; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j] = std::max(out[j], x[i * m + j]);
  return out;
}

ProfileTokens select_profile(std::span<const double> scores, std::span<const TokenId> tokens, std::size_t k_p,
                             ProfileSource source) {
  if (k_p == 0) throw ContractError("select_profile needs k_p >= 1");
  if (scores.size() != tokens.size()) {
    throw DimensionError("select_profile: " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(tokens.size()) + " tokens");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t keep = std::min(k_p, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] != scores[b] ? scores[a] > scores[b] : a < b; });
  ProfileTokens out;
  out.source = source;
  for (std::size_t i = 0; i < keep; ++i) out.tokens.push_back({tokens[order[i]], scores[order[i]], order[i]});
  return out;
}

ProfileTokens select_profile(std::span<const Tensor> maps, std::span<const std::vector<TokenId>> responses,
                             std::size_t k_p, ProfileSource source) {
  if (maps.size() != responses.size()) throw DimensionError("select_profile: one attention map per response expected");
  std::vector<double> scores;
  std::vector<TokenId> tokens;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    auto col = column_max(maps[i]);
    if (col.size() != responses[i].size()) {
      throw DimensionError("select_profile: attention map has " + std::to_string(col.size()) + " columns for a " +
                           std::to_string(responses[i].size()) + "-token response");
    }
    scores.insert(scores.end(), col.begin(), col.end());
    tokens.insert(tokens.end(), responses[i].begin(), responses[i].end());
  }
  return select_profile(scores, tokens, k_p, source);
}

std::string dump_profile(const ProfileTokens& profile, const Vocabulary& vocab) {
  std::ostringstream os;
  os.precision(6);
  for (std::size_t i = 0; i < profile.tokens.size(); ++i) {
    os << i + 1 << ", " << vocab.token(profile.tokens[i].id) << ", " << std::fixed << profile.tokens[i].score << ", "
       << to_string(profile.source) << '\n';
  }
  return os.str();
}

MatchingHead::MatchingHead(ParameterStore& store, std::string prefix, std::size_t d, MatchingHeadConfig config,
                           Rng& rng)
    : store_(&store), prefix_(std::move(prefix)), d_(d), config_(config) {
  if (config.kernel == 0 || config.pool == 0 || config.channels == 0 || config.lstm_hidden == 0 ||
      config.mlp_hidden == 0) {
    throw ContractError("matching head sizes must be positive");
  }
  if (d < config.kernel + config.pool - 1) throw ContractError("matching head: model dimension too small for kernel");
  step_features_ = config.channels * ((d - config.kernel + 1) / config.pool);
  const double conv_sd = 1.0 / static_cast<double>(config.kernel);
  store.add_normal(prefix_ + ".conv.w", {config.channels, 1, config.kernel, config.kernel}, conv_sd, rng);
  store.add_constant(prefix_ + ".conv.b", {config.channels}, 0.0);
  const std::size_t hdim = config.lstm_hidden;
  store.add_normal(prefix_ + ".lstm.wx", {step_features_, 4 * hdim}, 1.0 / std::sqrt(static_cast<double>(step_features_)),
                   rng);
  store.add_normal(prefix_ + ".lstm.wh", {hdim, 4 * hdim}, 1.0 / std::sqrt(static_cast<double>(hdim)), rng);
  std::vector<double> bias(4 * hdim, 0.0);
  std::fill(bias.begin() + static_cast<std::ptrdiff_t>(hdim), bias.begin() + static_cast<std::ptrdiff_t>(2 * hdim), 1.0);
  store.add(prefix_ + ".lstm.b", Tensor::from({4 * hdim}, std::move(bias)));
  init_linear(store, prefix_ + ".mlp1", hdim, config.mlp_hidden, rng);
  init_linear(store, prefix_ + ".mlp2", config.mlp_hidden, 1, rng);
}

Tensor MatchingHead::logit(const AttentionMap& map) const {
  if (map.a.rank() != 2 || map.v.rank() != 2 || map.a.cols() != map.v.rows() || map.v.cols() != d_) {
    throw DimensionError("matching head: attention " + shape_to_string(map.a.shape()) + " and values " +
                         shape_to_string(map.v.shape()) + " are inconsistent with d=" + std::to_string(d_));
  }
  Tensor h = matmul(map.a, map.v);
  const std::size_t rows = std::max(h.rows(), min_rows());
  if (h.rows() < rows) {
    std::vector<Tensor> parts{h, Tensor::zeros({rows - h.rows(), d_})};
    h = concat_rows(parts);
  }
  const Tensor conv = relu(conv2d(reshape(h, {1, rows, d_}), store_->get(prefix_ + ".conv.w"),
                                  store_->get(prefix_ + ".conv.b")));
  const Tensor pooled = maxpool2d(conv, config_.pool);
  const std::size_t steps = pooled.shape()[1];
  const std::size_t width = pooled.shape()[2];
  const Tensor flat = reshape(pooled, {config_.channels, steps * width});

  const std::size_t hd = config_.lstm_hidden;
  const Tensor& wx = store_->get(prefix_ + ".lstm.wx");
  const Tensor& wh = store_->get(prefix_ + ".lstm.wh");
  const Tensor& b = store_->get(prefix_ + ".lstm.b");
  Tensor hstate = Tensor::zeros({1, hd});
  Tensor cstate = Tensor::zeros({1, hd});
  for (std::size_t t = 0; t < steps; ++t) {
    const Tensor x = reshape(slice_cols(flat, t * width, (t + 1) * width), {1, step_features_});
    const Tensor gates = add_bias(add(matmul(x, wx), matmul(hstate, wh)), b);
    const Tensor i = sigmoid(slice_cols(gates, 0, hd));
    const Tensor f = sigmoid(slice_cols(gates, hd, 2 * hd));
    const Tensor g = tanh(slice_cols(gates, 2 * hd, 3 * hd));
    const Tensor o = sigmoid(slice_cols(gates, 3 * hd, 4 * hd));
    cstate = add(mul(f, cstate), mul(i, g));
    hstate = mul(o, tanh(cstate));
  }
  const Tensor out = linear(*store_, prefix_ + ".mlp2", tanh(linear(*store_, prefix_ + ".mlp1", hstate)));
  return reshape(out, {1});
}

double MatchingHead::score(const AttentionMap& map) const {
  NoGradGuard no_grad;
  const double z = logit(map).item();
  return 1.0 / (1.0 + std::exp(-z));
}

PseudoLabel pseudo_label(std::span<const TokenId> y, const Tensor& y_hat_prime, std::span<const TokenId> r,
                         double alpha) {
  if (y.empty()) throw ContractError("pseudo_label: empty ground truth");
  if (y_hat_prime.rank() != 2 || y_hat_prime.rows() != y.size()) {
    throw ContractError("pseudo_label: " + std::to_string(y.size()) + " target positions but distributions of shape " +
                        shape_to_string(y_hat_prime.shape()));
  }
  const std::size_t vocab = y_hat_prime.cols();
  std::vector<bool> in_r(vocab, false);
  for (TokenId t : r) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) throw IndexError("pseudo_label: history token outside vocabulary");
    in_r[static_cast<std::size_t>(t)] = true;
  }
  const auto p = y_hat_prime.data();
  double total = 0.0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    if (y[t] < 0 || static_cast<std::size_t>(y[t]) >= vocab) throw IndexError("pseudo_label: target outside vocabulary");
    const auto yt = static_cast<std::size_t>(y[t]);
    // Only the y_t column can be positive; every other masked entry is -p <= 0.
    if (in_r[yt]) total += 1.0 - p[t * vocab + yt];
  }
  PseudoLabel out;
  out.alpha = alpha;
  out.g_soft = total / static_cast<double>(y.size());
  out.g = out.g_soft >= alpha ? 1 : 0;
  return out;
}

Tensor matching_loss(const Tensor& logits, std::span<const double> g) { return bce_with_logits(logits, g); }

}  // namespace msp
