#include "msp/trainer.hpp"

#include <chrono>
#include <cstdio>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "msp/error.hpp"

namespace msp {

using nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kStreamQ = 0x51ULL;
constexpr std::uint64_t kStreamP = 0x50ULL;

std::string step_dir_name(std::size_t step) {
  std::ostringstream os;
  os << "step-" << std::setw(6) << std::setfill('0') << step;
  return os.str();
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write '" + path.string() + "'");
  os << text;
}

// Keeps log lines whose "step" is at most `step`.
void truncate_log(const std::filesystem::path& path, std::size_t step, bool json) {
  if (!std::filesystem::exists(path)) return;
  std::istringstream is(read_text(path));
  std::string line;
  std::string kept;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::size_t s = 0;
    if (json) {
      s = ordered_json::parse(line).at("step").get<std::size_t>();
    } else {
      s = std::stoull(line.substr(0, line.find(' ')));
    }
    if (s <= step) kept += line + '\n';
  }
  write_text(path, kept);
}

Ablations ablations_from_json(const ordered_json& j) {
  Ablations a;
  a.user_refiner = j.at("user_refiner");
  a.topic_refiner = j.at("topic_refiner");
  a.token_refiner = j.at("token_refiner");
  a.sim_profile = j.at("sim_profile");
  a.per_profile = j.at("per_profile");
  a.joint_training = j.at("joint_training");
  a.profile = j.at("profile");
  a.bm25 = j.at("bm25");
  return a;
}

ordered_json ablations_to_json(const Ablations& a) {
  ordered_json j;
  j["user_refiner"] = a.user_refiner;
  j["topic_refiner"] = a.topic_refiner;
  j["token_refiner"] = a.token_refiner;
  j["sim_profile"] = a.sim_profile;
  j["per_profile"] = a.per_profile;
  j["joint_training"] = a.joint_training;
  j["profile"] = a.profile;
  j["bm25"] = a.bm25;
  return j;
}

void check_vocab(const std::filesystem::path& checkpoint, const Corpus& corpus) {
  const auto saved = Vocabulary::load(checkpoint / "vocab.txt");
  if (!(saved == corpus.vocab)) {
    throw DataError("vocabulary mismatch: checkpoint has " + std::to_string(saved.size()) + " tokens, corpus has " +
                    std::to_string(corpus.vocab.size()));
  }
}

}  // namespace

struct Trainer::Resume {
  std::filesystem::path dir;
  ordered_json state;
};

Trainer::Trainer(RunConfig config, const Corpus& corpus, Ablations ablations, std::filesystem::path out_dir)
    : Trainer(std::make_unique<RunConfig>(std::move(config)), corpus, ablations, std::move(out_dir), nullptr) {}

Trainer::~Trainer() = default;

Trainer::Trainer(std::unique_ptr<RunConfig> config, const Corpus& corpus, Ablations ablations,
                 std::filesystem::path out_dir, const Resume* resume)
    : config_(std::move(config)),
      corpus_(&corpus),
      ablations_(ablations),
      out_dir_(std::move(out_dir)),
      rng_q_(config_->seed ^ (kStreamQ << 56)),
      rng_p_(config_->seed ^ (kStreamP << 56)) {
  config_->validate();
  split_ = chronological_split(corpus, corpus.triplets, config_->split);
  if (split_.train.size() < std::max(config_->n_s, config_->n_d)) {
    throw ContractError("training split has " + std::to_string(split_.train.size()) +
                        " triplets, fewer than one batch");
  }
  model_ = std::make_unique<MspModel>(*config_, corpus.vocab.size(), config_->seed);
  std::optional<TopicClassifier> classifier;
  if (resume) {
    ParamContainer::read(resume->dir / "params.bin").load_into(model_->store());
    classifier = TopicClassifier::load(resume->dir / "topic.bin");
  }
  pipeline_ = std::make_unique<ProfilePipeline>(*config_, corpus, split_, *model_, ablations_, std::move(classifier));

  refiner_opt_ = std::make_unique<Optimizer>(config_->refiner_optimizer,
                                             model_->store().select(MspModel::refiner_prefixes()));
  generator_opt_ = std::make_unique<Optimizer>(config_->generator_optimizer,
                                               model_->store().select(model_->generator_prefixes()));
  if (model_->has_plain_generator()) {
    plain_opt_ = std::make_unique<Optimizer>(config_->generator_optimizer,
                                             model_->store().select(MspModel::plain_generator_prefixes()));
  }

  if (resume) {
    const auto opt = ParamContainer::read(resume->dir / "optim.bin");
    refiner_opt_->load_state(opt, "refiner/");
    generator_opt_->load_state(opt, "generator/");
    if (plain_opt_) plain_opt_->load_state(opt, "generator0/");
    std::istringstream rng(read_text(resume->dir / "rng.txt"));
    std::string q;
    std::string p;
    std::getline(rng, q);
    std::getline(rng, p);
    rng_q_.deserialize(q);
    rng_p_.deserialize(p);
    step_ = resume->state.at("step");
    has_best_ = resume->state.at("has_best");
    best_valid_ = resume->state.at("best_valid");
    bad_evals_ = resume->state.at("bad_evals");
  }

  if (!out_dir_.empty()) {
    std::filesystem::create_directories(out_dir_ / "checkpoints");
    config_->save(out_dir_ / "config.ini");
    write_split_manifest(out_dir_ / "split.txt", split_);
    const auto mode = resume ? std::ios::app : std::ios::trunc;
    if (resume) {
      truncate_log(out_dir_ / "train.log.jsonl", step_, true);
      truncate_log(out_dir_ / "timing.log", step_, false);
    }
    log_.open(out_dir_ / "train.log.jsonl", std::ios::binary | mode);
    timing_.open(out_dir_ / "timing.log", std::ios::binary | mode);
    if (!log_ || !timing_) throw DataError("cannot open logs in '" + out_dir_.string() + "'");
  }
}

std::unique_ptr<Trainer> Trainer::resume(const std::filesystem::path& checkpoint, const Corpus& corpus,
                                         std::filesystem::path out_dir) {
  const auto dir = resolve_checkpoint(checkpoint);
  check_vocab(dir, corpus);
  Resume r{dir, ordered_json::parse(read_text(dir / "state.json"))};
  auto config = std::make_unique<RunConfig>(RunConfig::load(dir / "config.ini"));
  const Ablations ablations = ablations_from_json(r.state.at("ablations"));
  return std::unique_ptr<Trainer>(new Trainer(std::move(config), corpus, ablations, std::move(out_dir), &r));
}

void Trainer::log(const StepRecord& r, double wall_ms) {
  records_.push_back(r);
  if (!log_.is_open()) return;
  ordered_json j;
  j["step"] = r.step;
  j["phase"] = r.phase;
  if (r.loss) j["loss"] = *r.loss;
  if (!r.skipped.empty()) j["skipped"] = r.skipped;
  j["lr"] = r.lr;
  j["examples"] = r.examples;
  log_ << j.dump() << '\n';
  log_.flush();
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", wall_ms);
  timing_ << r.step << ' ' << r.phase << ' ' << buf << '\n';
  timing_.flush();
}

std::vector<std::string> Trainer::frozen_during_refiner() const {
  std::vector<std::string> p = model_->generator_prefixes();
  p.push_back("enc.");
  if (model_->has_plain_generator()) p.push_back("gen0.");
  return p;
}

void Trainer::check_unchanged(std::uint64_t before, const std::vector<std::string>& prefixes, const char* what) const {
  if (model_->store().hash(prefixes) != before) {
    throw ContractError(std::string("parameter isolation violated: ") + what);
  }
}

std::optional<double> Trainer::refiner_step() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto elapsed = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };
  StepRecord rec{step_, "refiner", std::nullopt, refiner_opt_->lr_at(refiner_opt_->step_count() + 1), 0, ""};
  if (!ablations_.trains_refiner()) {
    rec.lr = 0.0;
    rec.skipped = "ablation " + ablations_.describe();
    log(rec, elapsed());
    return std::nullopt;
  }
  const auto frozen = frozen_during_refiner();
  const std::uint64_t before = config_->test_mode ? model_->store().hash(frozen) : 0;
  model_->store().zero_grad(MspModel::refiner_prefixes());

  const auto& cfg = *config_;
  std::vector<Tensor> logits;
  std::vector<double> labels;
  for (std::size_t i = 0; i < cfg.n_s; ++i) {
    const auto& t = split_.train[rng_q_.below(split_.train.size())];
    const auto req = pipeline_->request_for(t);
    const int topic = pipeline_->query_topic(req);
    std::vector<std::size_t> sentences;
    if (ablations_.per_profile) {
      auto cur = pipeline_->per_candidates(req, topic);
      const std::size_t keep = std::min(cur.size(), cfg.sentences_cur);
      sentences.insert(sentences.end(), cur.end() - static_cast<std::ptrdiff_t>(keep), cur.end());
    }
    if (ablations_.sim_profile) {
      auto sim = pipeline_->sim_candidates(req, topic);
      const std::size_t keep = std::min(sim.size(), cfg.sentences_sim);
      for (std::size_t k = 0; k < keep; ++k) std::swap(sim[k], sim[k + rng_q_.below(sim.size() - k)]);
      sentences.insert(sentences.end(), sim.begin(), sim.begin() + static_cast<std::ptrdiff_t>(keep));
    }
    if (sentences.empty()) continue;
    pipeline_->ensure_states(std::span<const std::size_t>(&t.pair, 1), sentences);

    const auto& y = corpus_->pair_of(t).response;
    Tensor y_prime;
    {
      NoGradGuard no_grad;
      const auto plain = build_input({}, {}, req.query);
      y_prime = slice_rows(model_->plain_generator().distributions(plain, y), 0, y.size());
    }
    for (std::size_t p : sentences) {
      const auto label = pseudo_label(y, y_prime, corpus_->pairs[p].response, cfg.alpha);
      const auto map = model_->refiner().attend(pipeline_->query_states(t.pair), pipeline_->response_states(p));
      logits.push_back(reshape(model_->head().logit(map), {1, 1}));
      labels.push_back(static_cast<double>(label.g));
    }
    ++rec.examples;
  }
  if (logits.empty()) {
    rec.lr = 0.0;
    rec.skipped = "no usable history";
    log(rec, elapsed());
    return std::nullopt;
  }
  const Tensor loss = matching_loss(reshape(concat_rows(logits), {logits.size()}), labels);
  loss.backward();
  refiner_opt_->step();
  if (cfg.test_mode) check_unchanged(before, frozen, "refiner step changed generator or encoder parameters");
  rec.loss = loss.item();
  rec.lr = refiner_opt_->last_lr();
  log(rec, elapsed());
  return rec.loss;
}

double Trainer::generator_step() {
  if (step_ <= config_->n_f) {
    throw ContractError("generator step at step " + std::to_string(step_) + " <= n_f = " + std::to_string(config_->n_f));
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto& cfg = *config_;
  std::vector<std::string> frozen = MspModel::refiner_prefixes();
  for (const auto& p : model_->frozen_encoder_prefixes()) frozen.push_back(p);
  const std::uint64_t before = cfg.test_mode ? model_->store().hash(frozen) : 0;

  std::vector<GenerationInput> inputs;
  std::vector<GenerationInput> plain_inputs;
  std::vector<std::vector<TokenId>> targets;
  for (std::size_t i = 0; i < cfg.n_d; ++i) {
    const auto& t = split_.train[rng_p_.below(split_.train.size())];
    inputs.push_back(pipeline_->extract(t, cfg.k_p).input);
    targets.push_back(corpus_->pair_of(t).response);
    if (plain_opt_) plain_inputs.push_back(build_input({}, {}, corpus_->pair_of(t).query));
  }
  const auto flat = generation_targets(targets);

  model_->store().zero_grad(model_->generator_prefixes());
  const Tensor loss = generation_loss(model_->generator().teacher_forced_logits(inputs, targets), flat);
  loss.backward();
  generator_opt_->step();
  if (model_->shares_embeddings()) pipeline_->invalidate_states();
  const double value = loss.item();
  log({step_, "generator", value, generator_opt_->last_lr(), inputs.size(), ""},
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());

  if (plain_opt_) {
    const auto t1 = std::chrono::steady_clock::now();
    model_->store().zero_grad(MspModel::plain_generator_prefixes());
    const Tensor plain = generation_loss(model_->plain_generator().teacher_forced_logits(plain_inputs, targets), flat);
    plain.backward();
    plain_opt_->step();
    log({step_, "generator0", plain.item(), plain_opt_->last_lr(), plain_inputs.size(), ""},
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t1).count());
  }
  if (cfg.test_mode) check_unchanged(before, frozen, "generator step changed refiner or encoder parameters");
  return value;
}

double Trainer::validation_loss() const {
  NoGradGuard no_grad;
  const auto& cfg = *config_;
  const std::size_t n = std::min(cfg.valid_samples, split_.valid.size());
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t begin = 0; begin < n; begin += cfg.n_d) {
    const std::size_t end = std::min(n, begin + cfg.n_d);
    std::vector<GenerationInput> inputs;
    std::vector<std::vector<TokenId>> targets;
    for (std::size_t i = begin; i < end; ++i) {
      inputs.push_back(pipeline_->extract(split_.valid[i], cfg.k_p).input);
      targets.push_back(corpus_->pair_of(split_.valid[i]).response);
    }
    const auto flat = generation_targets(targets);
    const double l = generation_loss(model_->generator().teacher_forced_logits(inputs, targets), flat).item();
    total += l * static_cast<double>(flat.size());
    tokens += flat.size();
  }
  return tokens == 0 ? 0.0 : total / static_cast<double>(tokens);
}

void Trainer::run_iteration() {
  ++step_;
  refiner_step();
  if (step_ > config_->n_f) generator_step();
}

TrainSummary Trainer::train() {
  TrainSummary summary;
  const auto& cfg = *config_;
  while (step_ < cfg.max_steps) {
    run_iteration();
    if (step_ % cfg.eval_interval != 0) continue;
    const auto t0 = std::chrono::steady_clock::now();
    const double v = validation_loss();
    if (step_ > cfg.n_f) {
      if (!has_best_ || v < best_valid_) {
        best_valid_ = v;
        has_best_ = true;
        bad_evals_ = 0;
      } else {
        ++bad_evals_;
      }
    }
    log({step_, "valid", v, 0.0, std::min(cfg.valid_samples, split_.valid.size()), ""},
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    summary.last_checkpoint = save_checkpoint();
    if (bad_evals_ >= cfg.patience) {
      summary.plateaued = true;
      break;
    }
  }
  if (step_ % cfg.eval_interval != 0 || summary.last_checkpoint.empty()) summary.last_checkpoint = save_checkpoint();
  summary.steps = step_;
  summary.best_valid = best_valid_;
  return summary;
}

std::filesystem::path Trainer::save_checkpoint() {
  if (out_dir_.empty()) return {};
  const auto dir = out_dir_ / "checkpoints" / step_dir_name(step_);
  std::filesystem::create_directories(dir);
  config_->save(dir / "config.ini");
  corpus_->vocab.save(dir / "vocab.txt");

  ParamContainer params;
  params.header["format"] = "msp-model";
  params.header["vocab_size"] = std::to_string(corpus_->vocab.size());
  params.header["step"] = std::to_string(step_);
  params.put_all(model_->store());
  params.write(dir / "params.bin");

  ParamContainer opt;
  opt.header["format"] = "msp-optimizer";
  refiner_opt_->save_state(opt, "refiner/");
  generator_opt_->save_state(opt, "generator/");
  if (plain_opt_) plain_opt_->save_state(opt, "generator0/");
  opt.write(dir / "optim.bin");

  write_text(dir / "rng.txt", rng_q_.serialize() + "\n" + rng_p_.serialize() + "\n");
  pipeline_->classifier().save(dir / "topic.bin");
  pipeline_->snapshot().index.save(dir / "index.bin");

  ordered_json state;
  state["step"] = step_;
  state["has_best"] = has_best_;
  state["best_valid"] = best_valid_;
  state["bad_evals"] = bad_evals_;
  state["ablations"] = ablations_to_json(ablations_);
  write_text(dir / "state.json", state.dump(2) + "\n");
  write_text(out_dir_ / "checkpoints" / "LATEST", step_dir_name(step_) + "\n");
  return dir;
}

double Trainer::recent_generator_loss(std::size_t window) const {
  double total = 0.0;
  std::size_t n = 0;
  for (auto it = records_.rbegin(); it != records_.rend() && n < window; ++it) {
    if (it->phase != "generator" || !it->loss) continue;
    total += *it->loss;
    ++n;
  }
  if (n == 0) throw ContractError("no generator steps recorded");
  return total / static_cast<double>(n);
}

std::vector<double> Trainer::refiner_losses() const {
  std::vector<double> out;
  for (const auto& r : records_)
    if (r.phase == "refiner" && r.loss) out.push_back(*r.loss);
  return out;
}

std::filesystem::path resolve_checkpoint(const std::filesystem::path& run_dir) {
  if (std::filesystem::exists(run_dir / "params.bin")) return run_dir;
  const auto latest = run_dir / "checkpoints" / "LATEST";
  if (std::filesystem::exists(latest)) {
    std::string name = read_text(latest);
    while (!name.empty() && (name.back() == '\n' || name.back() == '\r')) name.pop_back();
    return run_dir / "checkpoints" / name;
  }
  throw DataError("no checkpoint found at '" + run_dir.string() + "'");
}

RestoredModel restore_model(const std::filesystem::path& checkpoint, const Corpus& corpus,
                            std::optional<Ablations> ablations) {
  const auto dir = resolve_checkpoint(checkpoint);
  check_vocab(dir, corpus);
  const auto state = ordered_json::parse(read_text(dir / "state.json"));
  RestoredModel out;
  out.config = std::make_unique<RunConfig>(RunConfig::load(dir / "config.ini"));
  out.ablations = ablations ? *ablations : ablations_from_json(state.at("ablations"));
  out.step = state.at("step");
  out.split = chronological_split(corpus, corpus.triplets, out.config->split);
  out.model = std::make_unique<MspModel>(*out.config, corpus.vocab.size(), out.config->seed);
  ParamContainer::read(dir / "params.bin").load_into(out.model->store());
  out.pipeline = std::make_unique<ProfilePipeline>(*out.config, corpus, out.split, *out.model, out.ablations,
                                                   TopicClassifier::load(dir / "topic.bin"));
  return out;
}

}  // namespace msp
