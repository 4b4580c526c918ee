#include "msp/encoder.hpp"

#include <cmath>

#include "msp/error.hpp"

namespace msp {

TransformerEncoder::TransformerEncoder(ParameterStore& store, std::string prefix, EncoderConfig config, Rng& rng)
    : store_(&store), prefix_(std::move(prefix)), config_(config) {
  if (config_.vocab_size == 0) throw ContractError("encoder needs a nonempty vocabulary");
  if (config_.max_positions == 0) throw ContractError("encoder needs max_positions >= 1");
  store.add_normal(prefix_ + ".tok", {config_.vocab_size, config_.d}, 0.1, rng);
  store.add_normal(prefix_ + ".pos", {config_.max_positions, config_.d}, 0.1, rng);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    init_block(store, prefix_ + ".layer" + std::to_string(l), {config_.d, config_.heads, config_.ff}, rng);
  }
  init_layernorm(store, prefix_ + ".ln_f", config_.d);
}

EncodedBatch TransformerEncoder::encode_batch(std::span<const std::vector<TokenId>> sequences) const {
  if (sequences.empty()) throw ContractError("encode: empty batch");
  EncodedBatch out;
  std::vector<int> ids;
  std::vector<int> positions;
  for (const auto& seq : sequences) {
    if (seq.empty()) throw ContractError("encode: empty token sequence");
    const std::size_t len = std::min(seq.size(), config_.max_positions);
    out.segments.push_back({ids.size(), len});
    out.truncated.push_back(len < seq.size());
    for (std::size_t i = 0; i < len; ++i) {
      ids.push_back(seq[i]);
      positions.push_back(static_cast<int>(i));
    }
  }
  Tensor x = add(embedding(store_->get(prefix_ + ".tok"), ids), embedding(store_->get(prefix_ + ".pos"), positions));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    x = block_forward(*store_, prefix_ + ".layer" + std::to_string(l), x, config_.heads, out.segments, false);
  }
  out.states = apply_layernorm(*store_, prefix_ + ".ln_f", x);
  return out;
}

Encoded TransformerEncoder::encode(std::span<const TokenId> ids) const {
  std::vector<std::vector<TokenId>> one{std::vector<TokenId>(ids.begin(), ids.end())};
  auto batch = encode_batch(one);
  return {batch.states, batch.truncated[0]};
}

std::string to_string(SentenceMode mode) {
  switch (mode) {
    case SentenceMode::Cls: return "cls";
    case SentenceMode::Mean: return "mean";
    case SentenceMode::BagOfWords: return "bow";
  }
  return "?";
}

SentenceMode sentence_mode_from_string(const std::string& name) {
  if (name == "cls") return SentenceMode::Cls;
  if (name == "mean") return SentenceMode::Mean;
  if (name == "bow" || name == "bag-of-words") return SentenceMode::BagOfWords;
  throw ContractError("unknown sentence embedding mode '" + name + "'");
}

BagOfWordsEmbedder::BagOfWordsEmbedder(std::size_t vocab_size, std::size_t dim, std::uint64_t seed,
                                       std::vector<TokenId> ignored)
    : vocab_size_(vocab_size), dim_(dim), ignored_(vocab_size, false) {
  if (vocab_size == 0 || dim == 0) throw ContractError("bag-of-words embedder needs vocab_size and dim >= 1");
  Rng rng(seed);
  const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
  projection_.resize(vocab_size * dim);
  for (auto& w : projection_) w = rng.normal(0.0, sd);
  for (TokenId id : ignored)
    if (id >= 0 && static_cast<std::size_t>(id) < vocab_size) ignored_[static_cast<std::size_t>(id)] = true;
}

BagOfWordsEmbedder BagOfWordsEmbedder::identity(std::size_t vocab_size, std::vector<TokenId> ignored) {
  if (vocab_size == 0) throw ContractError("bag-of-words embedder needs vocab_size >= 1");
  BagOfWordsEmbedder e;
  e.vocab_size_ = vocab_size;
  e.dim_ = vocab_size;
  e.identity_ = true;
  e.ignored_.assign(vocab_size, false);
  for (TokenId id : ignored)
    if (id >= 0 && static_cast<std::size_t>(id) < vocab_size) e.ignored_[static_cast<std::size_t>(id)] = true;
  return e;
}

bool BagOfWordsEmbedder::ignores(TokenId id) const {
  return id < kFirstRegular || ignored_[static_cast<std::size_t>(id)];
}

std::vector<double> BagOfWordsEmbedder::token_vector(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_size_) {
    throw IndexError("token id " + std::to_string(id) + " outside embedder vocabulary of " + std::to_string(vocab_size_));
  }
  const auto row = static_cast<std::size_t>(id);
  if (identity_) {
    std::vector<double> v(dim_, 0.0);
    v[row] = 1.0;
    return v;
  }
  return {projection_.begin() + static_cast<std::ptrdiff_t>(row * dim_),
          projection_.begin() + static_cast<std::ptrdiff_t>((row + 1) * dim_)};
}

std::vector<double> BagOfWordsEmbedder::embed(std::span<const TokenId> ids) const {
  if (ids.empty()) throw ContractError("embed_sentence: empty input");
  std::vector<double> v(dim_, 0.0);
  bool any = false;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size_) {
      throw IndexError("token id " + std::to_string(id) + " outside embedder vocabulary of " +
                       std::to_string(vocab_size_));
    }
    if (ignores(id)) continue;
    any = true;
    const auto row = static_cast<std::size_t>(id);
    if (identity_) {
      v[row] += 1.0;
    } else {
      const double* p = projection_.data() + row * dim_;
      for (std::size_t j = 0; j < dim_; ++j) v[j] += p[j];
    }
  }
  if (!any) throw ContractError("embed_sentence: no content tokens after stopword filtering");
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm == 0.0) throw ContractError("embed_sentence: projection collapsed to the zero vector");
  for (double& x : v) x /= norm;
  return v;
}

EncoderEmbedder::EncoderEmbedder(const TransformerEncoder& encoder, SentenceMode mode)
    : encoder_(&encoder), mode_(mode) {
  if (mode == SentenceMode::BagOfWords) throw ContractError("EncoderEmbedder supports cls and mean modes only");
}

std::vector<double> EncoderEmbedder::embed(std::span<const TokenId> ids) const {
  if (ids.empty()) throw ContractError("embed_sentence: empty input");
  NoGradGuard no_grad;
  if (mode_ == SentenceMode::Cls) {
    std::vector<TokenId> with_cls;
    with_cls.reserve(ids.size() + 1);
    with_cls.push_back(kCls);
    with_cls.insert(with_cls.end(), ids.begin(), ids.end());
    const auto enc = encoder_->encode(with_cls);
    const auto row = slice_rows(enc.states, 0, 1);
    return row.to_vector();
  }
  const auto enc = encoder_->encode(ids);
  const std::size_t n = enc.states.rows();
  const std::size_t d = enc.states.cols();
  std::vector<double> v(d, 0.0);
  const auto x = enc.states.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) v[j] += x[i * d + j];
  for (double& e : v) e /= static_cast<double>(n);
  return v;
}

std::vector<TokenId> ignored_ids(const Vocabulary& vocab, std::span<const std::string> stopwords) {
  std::vector<TokenId> out{kCls, kPad, kBos, kEos, kUnk};
  for (const auto& w : stopwords)
    if (auto id = vocab.find(w)) out.push_back(*id);
  return out;
}

}  // namespace msp
