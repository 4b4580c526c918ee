// msp: corpus generation, topic pretraining, training, generation and evaluation.
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 internal error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "msp/config.hpp"
#include "msp/corpus.hpp"
#include "msp/error.hpp"
#include "msp/evaluation.hpp"
#include "msp/pipeline.hpp"
#include "msp/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace msp {
namespace {

constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kInternal = 3;

const std::vector<std::string> kAblationNames{"user-refiner", "topic-refiner", "token-refiner", "sim-profile",
                                              "per-profile",  "joint-training", "profile",      "bm25-baseline"};

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write '" + path.string() + "'");
  return os;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read '" + path.string() + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

json parse_line(const std::string& line, const fs::path& path, std::size_t lineno) {
  try {
    return json::parse(line);
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
  }
}

// --config FILE plus repeated --set section.key=value, then --corpus.
RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& sets,
                         const std::string& corpus_path) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw DataError("--set expects section.key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!corpus_path.empty()) cfg.corpus_path = corpus_path;
  cfg.validate();
  return cfg;
}

Corpus load_corpus(const std::string& path) {
  if (path.empty()) throw DataError("no corpus given (--corpus or corpus.path)");
  return ingest(path);
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void print_corpus_table(const std::string& name, const Corpus& c) {
  std::size_t tokens = 0;
  for (const auto& p : c.pairs) tokens += p.query.size() + p.response.size();
  const double avg_history = static_cast<double>(c.pairs.size()) / static_cast<double>(std::max<std::size_t>(1, c.users.size()));
  const std::vector<std::pair<std::string, std::string>> cols{
      {"Corpus", name},
      {"# Users", std::to_string(c.users.size())},
      {"# Pairs", std::to_string(c.pairs.size())},
      {"Avg. history length", fixed(avg_history, 2)},
      {"Vocabulary", std::to_string(c.vocab.size())},
      {"# Tokens", std::to_string(tokens)}};
  std::string head = "|";
  std::string rule = "|";
  std::string row = "|";
  for (const auto& [h, v] : cols) {
    const std::size_t w = std::max(h.size(), v.size());
    head += " " + h + std::string(w - h.size(), ' ') + " |";
    rule += std::string(w + 2, '-') + "|";
    row += " " + std::string(w - v.size(), ' ') + v + " |";
  }
  std::cout << head << '\n' << rule << '\n' << row << '\n';
}

// ---------------------------------------------------------------------------

struct CorpusArgs {
  SyntheticSpec spec;
  std::string out;
  std::string stats;
};

int cmd_corpus(const CorpusArgs& a) {
  if (!a.stats.empty()) {
    print_corpus_table(fs::path(a.stats).filename().string(), ingest(a.stats));
    return 0;
  }
  if (a.out.empty()) throw CLI::RequiredError("--out");
  const auto syn = generate_synthetic(a.spec);
  {
    auto os = open_out(a.out);
    os << to_jsonl(syn.pairs);
  }
  {
    auto os = open_out(a.out + ".spec.ini");
    const auto& s = a.spec;
    os << "[synthetic]\nusers = " << s.users << "\nclusters = " << s.clusters << "\ntopics = " << s.topics
       << "\npairs_per_user = " << s.pairs_per_user << "\nvocab_size = " << s.vocab_size << "\nseed = " << s.seed
       << "\ntopic_words = " << s.topic_words << "\ncluster_words = " << s.cluster_words
       << "\nsignature_words = " << s.signature_words << "\ngeneric_words = " << s.generic_words
       << "\npersona_rate = " << s.persona_rate << "\n";
  }
  {
    auto os = open_out(a.out + ".clusters.tsv");
    for (const auto& id : syn.user_ids) os << id << '\t' << syn.user_cluster.at(id) << '\n';
  }
  print_corpus_table(fs::path(a.out).filename().string(), build_corpus(syn.pairs));
  return 0;
}

// ---------------------------------------------------------------------------

struct ConfigArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string corpus;
};

struct TopicArgs {
  ConfigArgs cfg;
  std::string out;
};

int cmd_train_topics(const TopicArgs& a) {
  RunConfig cfg = resolve_config(a.cfg.config, a.cfg.sets, a.cfg.corpus);
  const Corpus corpus = load_corpus(cfg.corpus_path);
  const Split split = chronological_split(corpus, corpus.triplets, cfg.split);
  const MspModel model(cfg, corpus.vocab.size(), cfg.seed);
  const auto embedder = make_sentence_embedder(cfg, corpus.vocab, model.encoder());
  const auto embeddings = embed_pairs(corpus, *embedder);
  double train_acc = 0.0;
  std::string source;
  std::vector<double> curve;
  const auto clf = train_topics(cfg, corpus, split, embeddings, &train_acc, &source, &curve);

  const fs::path out(a.out);
  fs::create_directories(out);
  clf.save(out / "topic.bin");
  {
    auto os = open_out(out / "topic_curve.csv");
    os << "epoch,loss\n";
    for (std::size_t e = 0; e < curve.size(); ++e) os << e + 1 << ',' << fixed(curve[e], 6) << '\n';
  }
  cfg.topic_model = (out / "topic.bin").string();
  cfg.save(out / "config.ini");

  std::cout << "labels: " << source << "\ntrain accuracy: " << fixed(train_acc, 4) << '\n';
  if (source == "corpus") {
    std::vector<std::vector<double>> x;
    std::vector<int> y;
    for (const auto* part : {&split.valid, &split.test}) {
      for (const auto& t : *part) {
        x.push_back(embeddings.query[t.pair]);
        y.push_back(*corpus.pairs[t.pair].topic);
      }
    }
    std::cout << "held-out accuracy: " << fixed(topic_accuracy(clf, x, y), 4) << " (" << x.size() << " queries)\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  ConfigArgs cfg;
  std::vector<std::string> ablate;
  std::string out;
  std::string resume;
};

int cmd_train(const TrainArgs& a) {
  if (!a.resume.empty()) {
    const auto ckpt = resolve_checkpoint(a.resume);
    const RunConfig saved = RunConfig::load(ckpt / "config.ini");
    const Corpus corpus = load_corpus(a.cfg.corpus.empty() ? saved.corpus_path : a.cfg.corpus);
    auto trainer = Trainer::resume(ckpt, corpus, a.out);
    std::cout << "resumed from " << ckpt.string() << " at step " << trainer->step() << '\n';
    const auto s = trainer->train();
    std::cout << "steps: " << s.steps << "\nbest valid: " << fixed(s.best_valid, 4) << "\ncheckpoint: "
              << s.last_checkpoint.string() << '\n';
    return 0;
  }
  const RunConfig cfg = resolve_config(a.cfg.config, a.cfg.sets, a.cfg.corpus);
  const Corpus corpus = load_corpus(cfg.corpus_path);
  const Ablations ablations = Ablations::parse(a.ablate);
  Trainer trainer(cfg, corpus, ablations, a.out);
  std::cout << "ablations: " << ablations.describe() << "\ntopic labels: " << trainer.pipeline().topic_label_source()
            << "\n";
  const auto s = trainer.train();
  std::cout << "steps: " << s.steps << (s.plateaued ? " (validation plateau)" : "") << "\nbest valid: "
            << fixed(s.best_valid, 4) << "\nfinal-100 generator loss: " << fixed(trainer.recent_generator_loss(100), 4)
            << "\ncheckpoint: " << s.last_checkpoint.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct ModelArgs {
  std::string checkpoint;
  std::string corpus;
  std::vector<std::string> sets;  // generate.* and eval.* overrides
};

// Restored model plus inference-time overrides applied to its config.
// The corpus is heap-held: the pipeline keeps a pointer to it.
struct Loaded {
  std::unique_ptr<Corpus> corpus;
  RestoredModel model;
};

Loaded load_model(const ModelArgs& a, std::optional<Ablations> ablations) {
  const auto ckpt = resolve_checkpoint(a.checkpoint);
  const RunConfig saved = RunConfig::load(ckpt / "config.ini");
  Loaded l{std::make_unique<Corpus>(load_corpus(a.corpus.empty() ? saved.corpus_path : a.corpus)), {}};
  l.model = restore_model(ckpt, *l.corpus, ablations);
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw DataError("--set expects section.key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    if (key.rfind("generate.", 0) != 0 && key.rfind("eval.", 0) != 0) {
      throw DataError("only generate.* and eval.* keys can be changed at inference, got '" + key + "'");
    }
    l.model.config->set(key, kv.substr(eq + 1));
  }
  l.model.config->validate();
  return l;
}

struct GenerateArgs {
  ModelArgs model;
  std::string queries;
  std::string out;
  bool no_profile = false;
  std::optional<std::size_t> k_p;
  std::optional<std::uint64_t> seed;
};

int cmd_generate(const GenerateArgs& a) {
  Loaded l = load_model(a.model, std::nullopt);
  const RunConfig& cfg = *l.model.config;
  const Corpus& corpus = *l.corpus;
  const std::size_t k_p = a.k_p.value_or(cfg.k_p);
  const std::uint64_t seed = a.seed.value_or(cfg.sample_seed);
  std::int64_t after_all = 0;
  for (const auto& p : corpus.pairs) after_all = std::max(after_all, p.ts + 1);

  const auto lines = read_lines(a.queries);
  auto os = open_out(a.out);
  auto sidecar = open_out(a.out + ".nucleus.jsonl");
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const json q = parse_line(lines[i], a.queries, i + 1);
    if (!q.is_object() || !q.contains("query") || !q["query"].is_string()) {
      throw DataError(a.queries + ":" + std::to_string(i + 1) + ": expected an object with a string 'query'");
    }
    json out;
    ProfileRequest req;
    if (q.contains("user_id")) {
      out["user_id"] = q["user_id"];
      req.user = corpus.find_user(q["user_id"].get<std::string>());
    }
    out["query"] = q["query"];
    req.query = corpus.vocab.encode(q["query"].get<std::string>());
    req.before_ts = q.contains("ts") ? q["ts"].get<std::int64_t>() : after_all;
    if (req.query.empty()) {
      std::cerr << "warning: " << a.queries << ":" << i + 1 << ": empty query skipped\n";
      ++skipped;
      out["response"] = "";
      out["skipped"] = true;
      os << out.dump() << '\n';
      sidecar << "[]\n";
      continue;
    }
    const auto r = respond(*l.model.model, *l.model.pipeline, req, k_p, a.no_profile, {cfg.top_p, cfg.max_len},
                           seed + i);
    out["response"] = corpus.vocab.decode(r.ids);
    out["profile_sim"] = corpus.vocab.decode(r.extraction.sim.ids());
    out["profile_per"] = corpus.vocab.decode(r.extraction.per.ids());
    os << out.dump() << '\n';
    sidecar << json(r.nucleus_sizes).dump() << '\n';
  }
  {
    RunConfig resolved = cfg;
    if (a.k_p) resolved.k_p = *a.k_p;
    resolved.sample_seed = seed;
    resolved.save(a.out + ".config.ini");
  }
  std::cerr << lines.size() - skipped << " responses written to " << a.out << (skipped ? ", " : "")
            << (skipped ? std::to_string(skipped) + " empty queries skipped" : "") << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  ModelArgs model;
  std::string responses;
  std::string references;
  std::string histories;
  std::string out;
  std::string split = "test";
  std::string mode = "model";
  std::string sweep;
  bool no_profile = false;
  std::optional<std::size_t> samples;
  std::optional<std::size_t> k_p;
  std::optional<std::uint64_t> seed;
  std::size_t seeds = 1;
};

std::string text_field(const json& j, std::initializer_list<const char*> names, const std::string& where) {
  if (j.is_string()) return j.get<std::string>();
  for (const char* n : names)
    if (j.is_object() && j.contains(n) && j[n].is_string()) return j[n].get<std::string>();
  throw DataError(where + ": no text field");
}

void write_samples(const fs::path& path, std::span<const EvalSample> samples) {
  const std::set<std::string> stop(default_stopwords().begin(), default_stopwords().end());
  auto os = open_out(path);
  const auto join = [](const Sentence& s) {
    std::string out;
    for (const auto& w : s) out += (out.empty() ? "" : " ") + w;
    return out;
  };
  for (const auto& s : samples) {
    json j;
    j["response"] = join(s.candidate);
    j["reference"] = join(s.reference);
    j["bleu1"] = bleu(s.candidate, s.reference, 1);
    j["rouge_l"] = rouge_l(s.candidate, s.reference);
    j["persona_f1"] = persona_f1(s.candidate, s.history, stop);
    j["history_sentences"] = s.history.size();
    os << j.dump() << '\n';
  }
}

void write_report(const fs::path& out, const MetricReport& report) {
  std::cout << report.to_table();
  if (out.empty()) return;
  auto os = open_out(out / "metrics.csv");
  os << report.to_csv();
}

int eval_files(const EvalArgs& a) {
  const auto resp = read_lines(a.responses);
  const auto refs = read_lines(a.references);
  const auto hist = read_lines(a.histories);
  if (resp.size() != refs.size() || resp.size() != hist.size()) {
    throw DataError("misaligned inputs: " + std::to_string(resp.size()) + " responses, " + std::to_string(refs.size()) +
                    " references, " + std::to_string(hist.size()) + " histories");
  }
  std::vector<EvalSample> samples;
  for (std::size_t i = 0; i < resp.size(); ++i) {
    const std::string at = ":" + std::to_string(i + 1);
    EvalSample s;
    s.candidate = tokenize(text_field(parse_line(resp[i], a.responses, i + 1), {"response"}, a.responses + at));
    s.reference = tokenize(text_field(parse_line(refs[i], a.references, i + 1), {"reference", "response"}, a.references + at));
    const json h = parse_line(hist[i], a.histories, i + 1);
    const json& list = h.is_object() && h.contains("history") ? h["history"] : h;
    if (!list.is_array()) throw DataError(a.histories + at + ": expected a list of history sentences");
    for (const auto& sent : list) s.history.push_back(tokenize(text_field(sent, {"response"}, a.histories + at)));
    samples.push_back(std::move(s));
  }
  // Word vectors come from a vocabulary over every text involved.
  std::vector<std::string> texts;
  for (const auto& s : samples) {
    for (const auto* sent : {&s.candidate, &s.reference}) texts.insert(texts.end(), sent->begin(), sent->end());
    for (const auto& h : s.history) texts.insert(texts.end(), h.begin(), h.end());
  }
  const Vocabulary vocab = Vocabulary::build(texts);
  RunConfig cfg;
  for (const auto& kv : a.model.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw DataError("--set expects section.key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  const auto report = score_samples(samples, vocab, cfg);
  write_report(a.out, report);
  if (!a.out.empty()) {
    write_samples(fs::path(a.out) / "samples.jsonl", samples);
    cfg.save(fs::path(a.out) / "config.ini");
  }
  return 0;
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(item, &used);
      if (used != item.size() || v == 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw DataError("--sweep expects positive integers, got '" + item + "'");
    }
  }
  return out;
}

int eval_checkpoint(const EvalArgs& a) {
  std::optional<Ablations> ablations;
  if (a.mode == "bm25-baseline") {
    ablations = Ablations{};
    ablations->disable("bm25-baseline");
  }
  Loaded l = load_model(a.model, ablations);
  RunConfig& cfg = *l.model.config;
  const auto& part = a.split == "valid" ? l.model.split.valid : l.model.split.test;
  const std::size_t limit = a.samples.value_or(cfg.eval_samples);
  const std::uint64_t seed = a.seed.value_or(cfg.sample_seed);
  const fs::path out(a.out);
  if (!a.out.empty()) fs::create_directories(out);

  if (!a.sweep.empty()) {
    std::vector<std::size_t> sizes;
    if (a.sweep == "k_p") {
      sizes = cfg.sweep_k_p;
    } else {
      sizes = parse_sizes(a.sweep);
    }
    std::ostringstream csv;
    csv << "k_p,seeds,input_tokens";
    for (const auto& n : metric_names()) csv << ',' << n;
    csv << '\n';
    for (std::size_t k : sizes) {
      std::vector<double> mean(metric_names().size(), 0.0);
      double input_tokens = 0.0;
      std::size_t n_inputs = 0;
      for (std::size_t s = 0; s < a.seeds; ++s) {
        const auto run = evaluate_triplets(cfg, *l.corpus, *l.model.model, *l.model.pipeline, part, limit, k,
                                           a.no_profile, seed + 100003 * s);
        for (std::size_t m = 0; m < mean.size(); ++m) mean[m] += run.report.values[m].second / static_cast<double>(a.seeds);
        for (const auto& r : run.responses) {
          input_tokens += static_cast<double>(r.extraction.input.size());
          ++n_inputs;
        }
      }
      csv << k << ',' << a.seeds << ',' << fixed(input_tokens / static_cast<double>(std::max<std::size_t>(1, n_inputs)), 2);
      for (double v : mean) csv << ',' << fixed(100.0 * v, 4);
      csv << '\n';
      std::cerr << "k_p " << k << " done\n";
    }
    std::cout << csv.str();
    if (!a.out.empty()) {
      auto os = open_out(out / "sweep_k_p.csv");
      os << csv.str();
      cfg.save(out / "config.ini");
    }
    return 0;
  }

  const std::size_t k_p = a.k_p.value_or(cfg.k_p);
  const auto run = evaluate_triplets(cfg, *l.corpus, *l.model.model, *l.model.pipeline, part, limit, k_p, a.no_profile, seed);
  write_report(out, run.report);
  if (!a.out.empty()) {
    write_samples(out / "samples.jsonl", run.samples);
    cfg.k_p = k_p;
    cfg.sample_seed = seed;
    cfg.save(out / "config.ini");
  }
  return 0;
}

int cmd_eval(const EvalArgs& a) {
  const bool files = !a.responses.empty() || !a.references.empty() || !a.histories.empty();
  if (files) {
    if (a.responses.empty() || a.references.empty() || a.histories.empty()) {
      throw CLI::ValidationError("file mode needs --responses, --references and --histories");
    }
    return eval_files(a);
  }
  if (a.model.checkpoint.empty()) throw CLI::ValidationError("give --checkpoint or the three input files");
  return eval_checkpoint(a);
}

void add_config_options(CLI::App* cmd, ConfigArgs& c) {
  cmd->add_option("--config", c.config, "INI configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.sets, "Override one key, section.key=value (repeatable)");
  cmd->add_option("--corpus", c.corpus, "Corpus JSONL (overrides corpus.path)");
}

void add_model_options(CLI::App* cmd, ModelArgs& m) {
  cmd->add_option("--checkpoint", m.checkpoint, "Run directory or checkpoint directory");
  cmd->add_option("--corpus", m.corpus, "Corpus JSONL (defaults to the checkpoint's corpus.path)");
  cmd->add_option("--set", m.sets, "Override a generate.* or eval.* key (repeatable)");
}

int run(int argc, char** argv) {
  CLI::App app{"Personalized dialogue generation with user, topic and token refiners"};
  app.require_subcommand(1);

  CorpusArgs corpus_args;
  auto* corpus_cmd = app.add_subcommand("corpus", "Generate a synthetic corpus and print its statistics");
  corpus_cmd->add_option("--users", corpus_args.spec.users, "Number of users")->capture_default_str();
  corpus_cmd->add_option("--clusters", corpus_args.spec.clusters, "Interest clusters")->capture_default_str();
  corpus_cmd->add_option("--topics", corpus_args.spec.topics, "Query topics")->capture_default_str();
  corpus_cmd->add_option("--pairs", corpus_args.spec.pairs_per_user, "Pairs per user")->capture_default_str();
  corpus_cmd->add_option("--vocab", corpus_args.spec.vocab_size, "Vocabulary budget")->capture_default_str();
  corpus_cmd->add_option("--persona-rate", corpus_args.spec.persona_rate, "Share of persona-bearing responses")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  corpus_cmd->add_option("--seed", corpus_args.spec.seed, "Generator seed")->capture_default_str();
  corpus_cmd->add_option("--out", corpus_args.out, "Output JSONL");
  corpus_cmd->add_option("--stats", corpus_args.stats, "Only summarise an existing corpus")->check(CLI::ExistingFile);

  TopicArgs topic_args;
  auto* topic_cmd = app.add_subcommand("train-topics", "Pretrain the topic classifier on training-split queries");
  add_config_options(topic_cmd, topic_args.cfg);
  topic_cmd->add_option("--out", topic_args.out, "Output directory")->required();

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Joint refiner / generator training");
  add_config_options(train_cmd, train_args.cfg);
  train_cmd->add_option("--ablate", train_args.ablate, "Switch off a component (repeatable)")
      ->check(CLI::IsMember(kAblationNames));
  train_cmd->add_option("--out", train_args.out, "Run directory")->required();
  train_cmd->add_option("--resume", train_args.resume, "Checkpoint or run directory to continue from");

  GenerateArgs gen_args;
  auto* gen_cmd = app.add_subcommand("generate", "Respond to JSONL queries with a trained model");
  add_model_options(gen_cmd, gen_args.model);
  gen_cmd->get_option("--checkpoint")->required();
  gen_cmd->add_option("--queries", gen_args.queries, "JSONL with query, optional user_id and ts")
      ->required()
      ->check(CLI::ExistingFile);
  gen_cmd->add_option("--out", gen_args.out, "Output JSONL")->required();
  gen_cmd->add_flag("--no-profile", gen_args.no_profile, "Answer from the query alone");
  gen_cmd->add_option("--k-p", gen_args.k_p, "Profile tokens per source");
  gen_cmd->add_option("--seed", gen_args.seed, "Sampling seed");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Score responses (files) or a checkpoint on held-out data");
  add_model_options(eval_cmd, eval_args.model);
  eval_cmd->add_option("--responses", eval_args.responses, "Responses JSONL")->check(CLI::ExistingFile);
  eval_cmd->add_option("--references", eval_args.references, "References JSONL")->check(CLI::ExistingFile);
  eval_cmd->add_option("--histories", eval_args.histories, "Histories JSONL")->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", eval_args.out, "Output directory");
  eval_cmd->add_option("--split", eval_args.split, "Held-out part")->check(CLI::IsMember({"valid", "test"}));
  eval_cmd->add_option("--mode", eval_args.mode, "Profile selection")->check(CLI::IsMember({"model", "bm25-baseline"}));
  eval_cmd->add_option("--sweep", eval_args.sweep, "'k_p' for eval.sweep_k_p, or a comma list of k_p values");
  eval_cmd->add_option("--seeds", eval_args.seeds, "Sampling seeds averaged per sweep point")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  eval_cmd->add_flag("--no-profile", eval_args.no_profile, "Answer from the query alone");
  eval_cmd->add_option("--samples", eval_args.samples, "Held-out examples to score");
  eval_cmd->add_option("--k-p", eval_args.k_p, "Profile tokens per source");
  eval_cmd->add_option("--seed", eval_args.seed, "Sampling seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kUsage;
  }

  try {
    if (*corpus_cmd) return cmd_corpus(corpus_args);
    if (*topic_cmd) return cmd_train_topics(topic_args);
    if (*train_cmd) return cmd_train(train_args);
    if (*gen_cmd) return cmd_generate(gen_args);
    if (*eval_cmd) return cmd_eval(eval_args);
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kInternal;
  }
  return kUsage;
}

}  // namespace
}  // namespace msp

int main(int argc, char** argv) { return msp::run(argc, argv); }
