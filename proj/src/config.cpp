#include "msp/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "msp/error.hpp"

namespace msp {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw DataError("config key " + key + ": expected a nonnegative integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw DataError("config key " + key + ": expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw DataError("config key " + key + ": expected true or false, got '" + v + "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string fmt_bool(bool v) { return v ? "true" : "false"; }

struct Entry {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

template <typename T>
Entry size_entry(T RunConfig::*field) {
  return {[field](const RunConfig& c) { return std::to_string(c.*field); },
          [field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = static_cast<T>(parse_u64(k, v)); }};
}

Entry double_entry(double RunConfig::*field) {
  return {[field](const RunConfig& c) { return fmt(c.*field); },
          [field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_double(k, v); }};
}

Entry bool_entry(bool RunConfig::*field) {
  return {[field](const RunConfig& c) { return fmt_bool(c.*field); },
          [field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_bool(k, v); }};
}

Entry string_entry(std::string RunConfig::*field, std::vector<std::string> allowed = {}) {
  return {[field](const RunConfig& c) { return c.*field; },
          [field, allowed](RunConfig& c, const std::string& k, const std::string& v) {
            if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
              std::string opts;
              for (const auto& a : allowed) opts += (opts.empty() ? "" : "|") + a;
              throw DataError("config key " + k + ": expected one of " + opts + ", got '" + v + "'");
            }
            c.*field = v;
          }};
}

template <typename Get>
Entry head_entry(Get member) {
  return {[member](const RunConfig& c) { return std::to_string(c.head.*member); },
          [member](RunConfig& c, const std::string& k, const std::string& v) { c.head.*member = parse_u64(k, v); }};
}

Entry optimizer_entry(OptimizerSettings RunConfig::*group, const std::string& what) {
  if (what == "kind") {
    return {[group](const RunConfig& c) { return to_string((c.*group).kind); },
            [group](RunConfig& c, const std::string& k, const std::string& v) {
              try {
                (c.*group).kind = optimizer_kind_from_string(v);
              } catch (const ContractError& e) {
                throw DataError("config key " + k + ": " + e.what());
              }
            }};
  }
  if (what == "warmup") {
    return {[group](const RunConfig& c) { return std::to_string((c.*group).warmup_steps); },
            [group](RunConfig& c, const std::string& k, const std::string& v) { (c.*group).warmup_steps = parse_u64(k, v); }};
  }
  double OptimizerSettings::*field = what == "lr"             ? &OptimizerSettings::lr
                                     : what == "beta1"        ? &OptimizerSettings::beta1
                                     : what == "beta2"        ? &OptimizerSettings::beta2
                                     : what == "eps"          ? &OptimizerSettings::eps
                                                              : &OptimizerSettings::weight_decay;
  return {[group, field](const RunConfig& c) { return fmt((c.*group).*field); },
          [group, field](RunConfig& c, const std::string& k, const std::string& v) { (c.*group).*field = parse_double(k, v); }};
}

// Insertion-ordered registry so to_ini() is stable and grouped.
const std::vector<std::pair<std::string, Entry>>& registry() {
  static const std::vector<std::pair<std::string, Entry>> entries = [] {
    std::vector<std::pair<std::string, Entry>> e;
    e.emplace_back("corpus.path", string_entry(&RunConfig::corpus_path));
    e.emplace_back("corpus.split",
                   Entry{[](const RunConfig& c) { return fmt(c.split[0]) + "," + fmt(c.split[1]) + "," + fmt(c.split[2]); },
                         [](RunConfig& c, const std::string& k, const std::string& v) {
                           std::array<double, 3> r{};
                           std::stringstream ss(v);
                           std::string part;
                           std::size_t i = 0;
                           while (std::getline(ss, part, ',')) {
                             if (i == 3) throw DataError("config key " + k + ": expected three ratios");
                             r[i++] = parse_double(k, trim(part));
                           }
                           if (i != 3) throw DataError("config key " + k + ": expected three ratios");
                           c.split = r;
                         }});
    e.emplace_back("model.d", size_entry(&RunConfig::d));
    e.emplace_back("model.heads", size_entry(&RunConfig::heads));
    e.emplace_back("model.encoder_layers", size_entry(&RunConfig::encoder_layers));
    e.emplace_back("model.decoder_layers", size_entry(&RunConfig::decoder_layers));
    e.emplace_back("model.ff", size_entry(&RunConfig::ff));
    e.emplace_back("model.encoder_max_positions", size_entry(&RunConfig::encoder_max_positions));
    e.emplace_back("model.decoder_max_positions", size_entry(&RunConfig::decoder_max_positions));
    e.emplace_back("model.head_channels", head_entry(&MatchingHeadConfig::channels));
    e.emplace_back("model.head_kernel", head_entry(&MatchingHeadConfig::kernel));
    e.emplace_back("model.head_pool", head_entry(&MatchingHeadConfig::pool));
    e.emplace_back("model.head_lstm_hidden", head_entry(&MatchingHeadConfig::lstm_hidden));
    e.emplace_back("model.head_mlp_hidden", head_entry(&MatchingHeadConfig::mlp_hidden));
    e.emplace_back("model.share_embeddings", bool_entry(&RunConfig::share_embeddings));
    e.emplace_back("model.sentence_embedder", string_entry(&RunConfig::sentence_embedder, {"bow", "cls", "mean"}));
    e.emplace_back("model.bow_dim", size_entry(&RunConfig::bow_dim));
    e.emplace_back("model.bow_seed", size_entry(&RunConfig::bow_seed));
    e.emplace_back("refiner.k_u", size_entry(&RunConfig::k_u));
    e.emplace_back("refiner.k_p", size_entry(&RunConfig::k_p));
    e.emplace_back("refiner.topics", size_entry(&RunConfig::topics));
    e.emplace_back("refiner.topic_hidden", size_entry(&RunConfig::topic_hidden));
    e.emplace_back("refiner.topic_epochs", size_entry(&RunConfig::topic_epochs));
    e.emplace_back("refiner.topic_lr", double_entry(&RunConfig::topic_lr));
    e.emplace_back("refiner.topic_labels", string_entry(&RunConfig::topic_labels, {"auto", "corpus", "kmeans"}));
    e.emplace_back("refiner.topic_model", string_entry(&RunConfig::topic_model));
    e.emplace_back("refiner.fallback_recent", size_entry(&RunConfig::fallback_recent));
    e.emplace_back("refiner.max_sim_pairs", size_entry(&RunConfig::max_sim_pairs));
    e.emplace_back("refiner.restrict_to_past", bool_entry(&RunConfig::restrict_to_past));
    e.emplace_back("refiner.normalize_user_vectors", bool_entry(&RunConfig::normalize_user_vectors));
    e.emplace_back("refiner.aggregation", string_entry(&RunConfig::aggregation, {"sum", "mean"}));
    e.emplace_back("train.n_s", size_entry(&RunConfig::n_s));
    e.emplace_back("train.n_d", size_entry(&RunConfig::n_d));
    e.emplace_back("train.n_f", size_entry(&RunConfig::n_f));
    e.emplace_back("train.alpha", double_entry(&RunConfig::alpha));
    e.emplace_back("train.max_steps", size_entry(&RunConfig::max_steps));
    e.emplace_back("train.eval_interval", size_entry(&RunConfig::eval_interval));
    e.emplace_back("train.patience", size_entry(&RunConfig::patience));
    e.emplace_back("train.valid_samples", size_entry(&RunConfig::valid_samples));
    e.emplace_back("train.sentences_cur", size_entry(&RunConfig::sentences_cur));
    e.emplace_back("train.sentences_sim", size_entry(&RunConfig::sentences_sim));
    for (const char* what : {"kind", "lr", "beta1", "beta2", "eps", "warmup", "weight_decay"}) {
      e.emplace_back(std::string("train.refiner_") + what, optimizer_entry(&RunConfig::refiner_optimizer, what));
    }
    for (const char* what : {"kind", "lr", "beta1", "beta2", "eps", "warmup", "weight_decay"}) {
      e.emplace_back(std::string("train.generator_") + what, optimizer_entry(&RunConfig::generator_optimizer, what));
    }
    e.emplace_back("train.separate_nonpersonalized", bool_entry(&RunConfig::separate_nonpersonalized));
    e.emplace_back("train.seed", size_entry(&RunConfig::seed));
    e.emplace_back("train.test_mode", bool_entry(&RunConfig::test_mode));
    e.emplace_back("generate.top_p", double_entry(&RunConfig::top_p));
    e.emplace_back("generate.max_len", size_entry(&RunConfig::max_len));
    e.emplace_back("generate.seed", size_entry(&RunConfig::sample_seed));
    e.emplace_back("eval.samples", size_entry(&RunConfig::eval_samples));
    e.emplace_back("eval.coverage_against_reference", bool_entry(&RunConfig::coverage_against_reference));
    e.emplace_back("eval.sweep_k_p",
                   Entry{[](const RunConfig& c) {
                           std::string s;
                           for (auto k : c.sweep_k_p) s += (s.empty() ? "" : ",") + std::to_string(k);
                           return s;
                         },
                         [](RunConfig& c, const std::string& k, const std::string& v) {
                           std::vector<std::size_t> out;
                           std::stringstream ss(v);
                           std::string part;
                           while (std::getline(ss, part, ',')) out.push_back(parse_u64(k, trim(part)));
                           if (out.empty()) throw DataError("config key " + k + ": empty list");
                           c.sweep_k_p = out;
                         }});
    e.emplace_back("eval.bm25_top", size_entry(&RunConfig::bm25_top));
    e.emplace_back("eval.bm25_k1", double_entry(&RunConfig::bm25_k1));
    e.emplace_back("eval.bm25_b", double_entry(&RunConfig::bm25_b));
    return e;
  }();
  return entries;
}

const Entry& find_entry(const std::string& key) {
  for (const auto& [k, e] : registry())
    if (k == key) return e;
  throw DataError("unknown config key '" + key + "'");
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> out = [] {
    std::vector<std::string> k;
    for (const auto& [name, e] : registry()) k.push_back(name);
    return k;
  }();
  return out;
}

void RunConfig::set(const std::string& key, const std::string& value) { find_entry(key).set(*this, key, value); }

std::string RunConfig::get(const std::string& key) const { return find_entry(key).get(*this); }

void RunConfig::validate() const {
  const auto need = [](bool ok, const std::string& what) {
    if (!ok) throw DataError("invalid config: " + what);
  };
  need(std::abs(split[0] + split[1] + split[2] - 1.0) < 1e-9 && split[0] > 0 && split[1] > 0 && split[2] > 0,
       "corpus.split ratios must be positive and sum to 1");
  need(d > 0 && heads > 0 && d % heads == 0, "model.d must be divisible by model.heads");
  need(encoder_layers > 0 && decoder_layers > 0 && ff > 0, "layer counts and ff width must be positive");
  need(k_u > 0 && k_p > 0, "refiner.k_u and refiner.k_p must be positive");
  need(topics >= 2, "refiner.topics must be at least 2");
  need(n_s > 0 && n_d > 0, "train batch sizes must be positive");
  need(alpha > 0.0 && alpha < 1.0, "train.alpha must lie in (0, 1)");
  need(max_steps > 0 && eval_interval > 0 && patience > 0, "train.max_steps, eval_interval and patience must be positive");
  need(top_p > 0.0 && top_p <= 1.0, "generate.top_p must lie in (0, 1]");
  need(max_len > 0, "generate.max_len must be positive");
  need(2 * k_p + 2 <= decoder_max_positions, "2 * refiner.k_p must leave room for the query in the decoder");
}

std::string RunConfig::to_ini() const {
  std::ostringstream os;
  std::string section;
  for (const auto& [key, entry] : registry()) {
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) os << '\n';
      os << '[' << sec << "]\n";
      section = sec;
    }
    os << key.substr(dot + 1) << " = " << entry.get(*this) << '\n';
  }
  return os.str();
}

RunConfig RunConfig::parse_ini(const std::string& text, const std::string& source) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::string section;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string where = source + ":" + std::to_string(line_no);
    std::string s = trim(line);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw DataError(where + ": malformed section header");
      section = trim(std::string_view(s).substr(1, s.size() - 2));
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw DataError(where + ": expected key = value");
    if (section.empty()) throw DataError(where + ": key outside of any section");
    const std::string key = section + "." + trim(std::string_view(s).substr(0, eq));
    try {
      cfg.set(key, trim(std::string_view(s).substr(eq + 1)));
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read config '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_ini(ss.str(), path.string());
}

void RunConfig::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write config '" + path.string() + "'");
  os << to_ini();
}

}  // namespace msp
