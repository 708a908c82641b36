#include "aloha/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "aloha/common.hpp"
#include "aloha/text.hpp"

namespace aloha::pipeline {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

PipelineConfig::PipelineConfig() { finetune.stage = ranker::Stage::lsrm_finetune; }

void PipelineConfig::validate() const {
  csm.validate();
  community.validate();
  sampling.validate();
  train.validate();
  finetune.validate();
  if (!(mask_fraction > 0.0 && mask_fraction < 1.0)) throw Error("mask_fraction must lie in (0, 1)");
  if (recall_n < 1) throw Error("recall_n must be at least 1");
  if (n_folds < 2) throw Error("n_folds must be at least 2");
  if (model.dim < 1 || model.vocab_buckets == 0) throw Error("model dim and vocab_buckets must be positive");
}

void PipelineConfig::override_seed(std::uint64_t seed) {
  csm.seed = derive_seed(seed, 1);
  mask_seed = derive_seed(seed, 2);
  sampling.seed = derive_seed(seed, 3);
  obs_seed = derive_seed(seed, 4);
  model.seed = derive_seed(seed, 5);
  train.seed = derive_seed(seed, 6);
  finetune.seed = derive_seed(seed, 7);
  fold_seed = derive_seed(seed, 8);
}

namespace {

Json train_json(const ranker::TrainConfig& t) {
  return {{"epochs", t.epochs},         {"batch_size", t.batch_size}, {"learning_rate", t.learning_rate},
          {"beta1", t.beta1},           {"beta2", t.beta2},           {"adam_eps", t.adam_eps},
          {"seed", t.seed}};
}

Json csm_json(const csm::CsmConfig& c) {
  return {{"alpha", c.alpha},
          {"lambda", c.lambda},
          {"dim", c.dim},
          {"sweeps", c.sweeps},
          {"inner_solver", csm::to_string(c.inner_solver)},
          {"cg_iters", c.cg_iters},
          {"loss_mode", csm::to_string(c.loss_mode)},
          {"seed", c.seed}};
}

Json community_json(const ccm::CommunityConfig& c) {
  return {{"first_level_fraction", c.first_level_fraction},
          {"second_level_k", c.second_level_k},
          {"min_frequency", c.min_frequency}};
}

Json sampling_json(const PipelineConfig& c) {
  return {{"n_distractors", c.sampling.n_distractors},
          {"similarity_pool_k", c.sampling.similarity_pool_k},
          {"seed", c.sampling.seed},
          {"obs_seed", c.obs_seed}};
}

Json model_json(const ranker::ModelConfig& m) {
  return {{"vocab_buckets", m.vocab_buckets},
          {"dim", m.dim},
          {"init_scale", m.init_scale},
          {"identity_projection", m.identity_projection},
          {"seed", m.seed},
          {"obs_cap", m.tokenizer.obs_cap},
          {"cand_cap", m.tokenizer.cand_cap},
          {"lowercase", m.tokenizer.lowercase}};
}

// Reads the keys of `j` into the setters, rejecting anything unknown.
class Reader {
 public:
  Reader(const Json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw Error("config section '" + section_ + "' must be an object");
  }
  template <typename T>
  Reader& read(const char* key, T& out) {
    seen_.insert(key);
    if (auto it = j_.find(key); it != j_.end()) {
      try {
        out = it->template get<T>();
      } catch (const nlohmann::json::exception&) {
        throw Error("config key '" + section_ + "." + key + "' has the wrong type");
      }
    }
    return *this;
  }
  const Json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  void done() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw Error("unknown config key '" + (section_.empty() ? k : section_ + "." + k) + "'");
    }
  }

 private:
  const Json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

void read_train(const Json& j, const std::string& name, ranker::TrainConfig& t) {
  Reader r(j, name);
  r.read("epochs", t.epochs)
      .read("batch_size", t.batch_size)
      .read("learning_rate", t.learning_rate)
      .read("beta1", t.beta1)
      .read("beta2", t.beta2)
      .read("adam_eps", t.adam_eps)
      .read("seed", t.seed);
  r.done();
}

}  // namespace

Json PipelineConfig::to_json() const {
  return {{"corpus", {{"hla", hla_path}, {"dialogue", dialogue_path}, {"min_hla", min_hla}}},
          {"workdir", workdir},
          {"csm", csm_json(csm)},
          {"csm_eval", {{"mask_fraction", mask_fraction}, {"recall_n", recall_n}, {"seed", mask_seed}}},
          {"community", community_json(community)},
          {"sampling", sampling_json(*this)},
          {"model", model_json(model)},
          {"train", train_json(train)},
          {"finetune", train_json(finetune)},
          {"targets", targets},
          {"folds", {{"n_folds", n_folds}, {"seed", fold_seed}}}};
}

PipelineConfig PipelineConfig::from_json(const Json& j) {
  PipelineConfig c;
  Reader top(j, "");
  top.read("workdir", c.workdir).read("targets", c.targets);
  if (auto* s = top.child("corpus")) {
    Reader r(*s, "corpus");
    r.read("hla", c.hla_path).read("dialogue", c.dialogue_path).read("min_hla", c.min_hla);
    r.done();
  }
  if (auto* s = top.child("csm")) {
    Reader r(*s, "csm");
    std::string solver = csm::to_string(c.csm.inner_solver), mode = csm::to_string(c.csm.loss_mode);
    r.read("alpha", c.csm.alpha)
        .read("lambda", c.csm.lambda)
        .read("dim", c.csm.dim)
        .read("sweeps", c.csm.sweeps)
        .read("inner_solver", solver)
        .read("cg_iters", c.csm.cg_iters)
        .read("loss_mode", mode)
        .read("seed", c.csm.seed);
    r.done();
    c.csm.inner_solver = csm::parse_inner_solver(solver);
    c.csm.loss_mode = csm::parse_loss_mode(mode);
  }
  if (auto* s = top.child("csm_eval")) {
    Reader r(*s, "csm_eval");
    r.read("mask_fraction", c.mask_fraction).read("recall_n", c.recall_n).read("seed", c.mask_seed);
    r.done();
  }
  if (auto* s = top.child("community")) {
    Reader r(*s, "community");
    r.read("first_level_fraction", c.community.first_level_fraction)
        .read("second_level_k", c.community.second_level_k)
        .read("min_frequency", c.community.min_frequency);
    r.done();
  }
  if (auto* s = top.child("sampling")) {
    Reader r(*s, "sampling");
    r.read("n_distractors", c.sampling.n_distractors)
        .read("similarity_pool_k", c.sampling.similarity_pool_k)
        .read("seed", c.sampling.seed)
        .read("obs_seed", c.obs_seed);
    r.done();
  }
  if (auto* s = top.child("model")) {
    Reader r(*s, "model");
    r.read("vocab_buckets", c.model.vocab_buckets)
        .read("dim", c.model.dim)
        .read("init_scale", c.model.init_scale)
        .read("identity_projection", c.model.identity_projection)
        .read("seed", c.model.seed)
        .read("obs_cap", c.model.tokenizer.obs_cap)
        .read("cand_cap", c.model.tokenizer.cand_cap)
        .read("lowercase", c.model.tokenizer.lowercase);
    r.done();
  }
  if (auto* s = top.child("train")) read_train(*s, "train", c.train);
  if (auto* s = top.child("finetune")) read_train(*s, "finetune", c.finetune);
  if (auto* s = top.child("folds")) {
    Reader r(*s, "folds");
    r.read("n_folds", c.n_folds).read("seed", c.fold_seed);
    r.done();
  }
  top.done();
  c.train.stage = ranker::Stage::uniform;
  c.finetune.stage = ranker::Stage::lsrm_finetune;
  c.validate();
  return c;
}

PipelineConfig load_config(const std::string& path) {
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(path + ": " + e.what());
  }
  return PipelineConfig::from_json(j);
}

// ---------------------------------------------------------------------------
// Per-target data

Split split_for(const Corpus& corpus, const FoldPlan& plan, CharacterId target) {
  Split s;
  s.fold = plan.fold_of(corpus.character(target).show_id);
  for (const auto& [show, fold] : plan.assignment) (fold == s.fold ? s.test_shows : s.train_shows).push_back(show);
  return s;
}

namespace {

enum Purpose : std::uint64_t { kUniformTrain = 1, kFinetune = 2, kEval = 3 };

std::uint64_t seed_for(std::uint64_t base, Purpose purpose, LineId line) {
  return derive_seed(derive_seed(base, purpose), static_cast<std::uint64_t>(line));
}

obs::Observation unguided(std::string context) {
  obs::Observation o;
  o.hla_slots.fill(std::string(obs::kNone));
  o.context_text = std::move(context);
  return o;
}

}  // namespace

TargetData build_target_data(const Corpus& corpus, const csm::LatentFactors& factors, const ccm::Community& community,
                             const Split& split, const PipelineConfig& config) {
  const CharacterId target = community.target;
  const auto target_ext = corpus.character(target).external_id;
  TargetData data;
  data.target = target;
  data.fold = split.fold;

  // Nothing the target said, as response or as context, reaches training.
  std::vector<LineId> train_lines;
  for (const auto& p : corpus.pairs()) {
    if (std::find(split.train_shows.begin(), split.train_shows.end(), p.response.show_id) == split.train_shows.end()) {
      continue;
    }
    if (p.response.character_id == target || p.context_external_id == target_ext) continue;
    train_lines.push_back(p.response.id);
  }
  const obs::LinePool train_pool(corpus, train_lines);
  const auto test_pool = obs::LinePool::of_shows(corpus, split.test_shows);

  obs::SamplingConfig uniform_cfg = config.sampling;
  uniform_cfg.mode = obs::SamplingMode::uniform_character;
  for (LineId l : train_pool.lines()) {
    uniform_cfg.seed = seed_for(config.sampling.seed, kUniformTrain, l);
    data.uniform_train.push_back(
        obs::sample_uniform(corpus, train_pool, l, unguided(corpus.pair(l).context_text), uniform_cfg));
  }

  std::vector<std::string> docs;
  for (LineId l : train_pool.lines()) docs.push_back(corpus.pair(l).response.text);
  const text::TfIdf tfidf(docs);
  obs::SamplingConfig negative_cfg = config.sampling;
  negative_cfg.mode = obs::SamplingMode::negative_character;
  for (CharacterId c : community.positive) {
    if (c == target) continue;
    for (LineId l : train_pool.lines_of(c)) {
      const auto obs = obs::build_obs(corpus, c, corpus.pair(l).context_text, obs::ObsMode::hla_og, factors,
                                      seed_for(config.obs_seed, kFinetune, l));
      negative_cfg.seed = seed_for(config.sampling.seed, kFinetune, l);
      data.finetune_train.push_back(obs::sample_negative(corpus, train_pool, community, l, obs, negative_cfg, tfidf));
    }
  }
  if (data.finetune_train.empty()) {
    throw Error("positive community of " + corpus.character(target).name +
                " has no training-fold dialogue; nothing to fine-tune on");
  }

  for (LineId l : corpus.lines_of(target)) {
    const auto& pair = corpus.pair(l);
    const auto obs = obs::build_obs(corpus, target, pair.context_text, obs::ObsMode::hla_og, factors,
                                    seed_for(config.obs_seed, kEval, l));
    uniform_cfg.seed = seed_for(config.sampling.seed, kEval, l);
    auto set = obs::sample_uniform(corpus, test_pool, l, obs, uniform_cfg);
    auto plain = set;
    plain.obs = unguided(pair.context_text);
    data.eval_aloha.push_back(std::move(set));
    data.eval_uniform.push_back(std::move(plain));
  }
  if (data.eval_aloha.empty()) throw Error(corpus.character(target).name + " has no dialogue to evaluate on");

  check_provenance(data.uniform_train, target, "uniform training sets");
  check_provenance(data.finetune_train, target, "fine-tuning sets");
  return data;
}

void check_provenance(const std::vector<obs::CandidateSet>& training, CharacterId target, const std::string& what) {
  for (std::size_t k = 0; k < training.size(); ++k) {
    const auto& s = training[k];
    if (s.target == target || std::find(s.provenance.begin(), s.provenance.end(), target) != s.provenance.end()) {
      throw Error(what + ": set " + std::to_string(k) + " contains a line by target character " +
                  std::to_string(target));
    }
  }
}

TrainedModels train_models(const TargetData& data, const PipelineConfig& config) {
  TrainedModels m{ranker::BiEncoderModel(config.model), ranker::BiEncoderModel(config.model), {}, {}};
  auto uniform_cfg = config.train;
  uniform_cfg.stage = ranker::Stage::uniform;
  m.uniform_loss = ranker::train(m.uniform, data.uniform_train, uniform_cfg).loss_curve;
  m.aloha = m.uniform;
  auto finetune_cfg = config.finetune;
  finetune_cfg.stage = ranker::Stage::lsrm_finetune;
  m.finetune_loss = ranker::train(m.aloha, data.finetune_train, finetune_cfg).loss_curve;
  return m;
}

TargetResult evaluate_models(const TargetData& data, const TrainedModels& models) {
  TargetResult r;
  r.target = data.target;
  r.fold = data.fold;
  r.uniform = metrics::evaluate(ranker::BiEncoderScorer(models.uniform), data.eval_uniform);
  r.aloha = metrics::evaluate(ranker::BiEncoderScorer(models.aloha), data.eval_aloha);
  r.uniform_loss = models.uniform_loss;
  r.finetune_loss = models.finetune_loss;
  return r;
}

TargetResult run_target(const Corpus& corpus, const csm::LatentFactors& factors, const FoldPlan& plan,
                        CharacterId target, const PipelineConfig& config) {
  const auto community = ccm::build_community(factors, target, config.community, corpus.dialogue_characters());
  const auto data = build_target_data(corpus, factors, community, split_for(corpus, plan, target), config);
  return evaluate_models(data, train_models(data, config));
}

// ---------------------------------------------------------------------------
// Cross-validation

Summary summarize(const std::vector<double>& values) {
  Summary s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stdev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

namespace {

CharacterId resolve_target(const Corpus& corpus, std::int64_t external_id) {
  auto id = corpus.find_external(external_id);
  if (!id) throw NotFoundError("target character " + std::to_string(external_id) + " is not in the corpus");
  if (corpus.lines_of(*id).empty()) {
    throw Error("target character " + corpus.character(*id).name + " has no dialogue to evaluate on");
  }
  return *id;
}

}  // namespace

std::vector<std::vector<CharacterId>> crossval_targets(const Corpus& corpus, const FoldPlan& plan,
                                                       const PipelineConfig& config) {
  std::vector<std::vector<CharacterId>> out(static_cast<std::size_t>(plan.n_folds));
  for (auto ext : config.targets) {
    const CharacterId id = resolve_target(corpus, ext);
    out[plan.fold_of(corpus.character(id).show_id)].push_back(id);
  }
  for (int f = 0; f < plan.n_folds; ++f) {
    if (!out[f].empty()) continue;
    const auto shows = plan.shows_in(f);
    CharacterId best = -1;
    for (CharacterId c : corpus.dialogue_characters()) {
      if (std::find(shows.begin(), shows.end(), corpus.character(c).show_id) == shows.end()) continue;
      if (best < 0 || corpus.lines_of(c).size() > corpus.lines_of(best).size()) best = c;
    }
    if (best < 0) throw Error("fold " + std::to_string(f) + " has no eligible target character");
    out[f].push_back(best);
  }
  return out;
}

CrossvalResult crossval(const Corpus& corpus, const csm::LatentFactors& factors, const PipelineConfig& config) {
  const auto plan = make_folds(corpus, config.n_folds, config.fold_seed);
  CrossvalResult result;
  for (const auto& fold_targets : crossval_targets(corpus, plan, config)) {
    for (CharacterId t : fold_targets) result.targets.push_back(run_target(corpus, factors, plan, t, config));
  }
  std::vector<double> a, u;
  for (const auto& t : result.targets) {
    a.push_back(t.aloha.overall.hits1);
    u.push_back(t.uniform.overall.hits1);
  }
  try {
    result.hits1_test = metrics::paired_t_test(a, u);
  } catch (const Error&) {
    result.hits1_test.reset();
  }
  return result;
}

std::string CrossvalResult::report(const Corpus& corpus) const {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "fold\ttarget\tmodel\thits@1\thits@5\thits@10\tmean_rank\tmrr\tf1\tbleu\tn\n";
  auto row = [&](const TargetResult& t, const char* model, const metrics::MetricSet& m) {
    out << t.fold << '\t' << corpus.character(t.target).name << '\t' << model << '\t' << m.hits1 << '\t' << m.hits5
        << '\t' << m.hits10 << '\t' << m.mean_rank << '\t' << m.mrr << '\t' << m.f1 << '\t' << m.bleu << '\t'
        << m.count << '\n';
  };
  for (const auto& t : targets) {
    row(t, "uniform", t.uniform.overall);
    row(t, "aloha", t.aloha.overall);
  }
  out << '\n';
  using Field = double metrics::MetricSet::*;
  const std::vector<std::pair<const char*, Field>> fields = {
      {"hits@1", &metrics::MetricSet::hits1},       {"hits@5", &metrics::MetricSet::hits5},
      {"hits@10", &metrics::MetricSet::hits10},     {"mean_rank", &metrics::MetricSet::mean_rank},
      {"mrr", &metrics::MetricSet::mrr},            {"f1", &metrics::MetricSet::f1},
      {"bleu", &metrics::MetricSet::bleu}};
  out << "metric\tuniform mean\tuniform stdev\taloha mean\taloha stdev\n";
  for (const auto& [name, field] : fields) {
    std::vector<double> u, a;
    for (const auto& t : targets) {
      u.push_back(t.uniform.overall.*field);
      a.push_back(t.aloha.overall.*field);
    }
    const auto su = summarize(u), sa = summarize(a);
    out << name << '\t' << su.mean << '\t' << su.stdev << '\t' << sa.mean << '\t' << sa.stdev << '\n';
  }
  out << '\n';
  if (hits1_test) {
    out << "paired t-test on hits@1 (aloha - uniform): t = " << hits1_test->t << ", df = " << hits1_test->df
        << ", p = " << std::setprecision(6) << hits1_test->p << '\n';
  } else {
    out << "paired t-test on hits@1: not available (fewer than two targets or constant differences)\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Workdir stages

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::ingest: return "ingest";
    case Stage::fit_csm: return "fit-csm";
    case Stage::eval_csm: return "eval-csm";
    case Stage::community: return "community";
    case Stage::candidates: return "candidates";
    case Stage::train: return "train";
    case Stage::finetune: return "finetune";
    case Stage::eval_ranker: return "eval-ranker";
    case Stage::crossval: return "crossval";
    case Stage::export_embeddings: return "export-embeddings";
  }
  return "?";
}

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> stages = {Stage::ingest,     Stage::fit_csm, Stage::eval_csm,
                                            Stage::community,  Stage::candidates, Stage::train,
                                            Stage::finetune,   Stage::eval_ranker, Stage::crossval,
                                            Stage::export_embeddings};
  return stages;
}

Stage parse_stage(const std::string& name) {
  for (Stage s : all_stages()) {
    if (to_string(s) == name) return s;
  }
  throw Error("unknown stage '" + name + "'");
}

namespace paths {
std::string manifest(const std::string& w) { return (fs::path(w) / "manifest.json").string(); }
std::string hla(const std::string& w) { return (fs::path(w) / "corpus" / "hla.tsv").string(); }
std::string dialogue(const std::string& w) { return (fs::path(w) / "corpus" / "dialogue.tsv").string(); }
std::string factors(const std::string& w) { return (fs::path(w) / "csm" / "factors.txt").string(); }
std::string community(const std::string& w, std::int64_t t) {
  return (fs::path(w) / "community" / (std::to_string(t) + ".tsv")).string();
}
std::string target_dir(const std::string& w, std::int64_t t) {
  return (fs::path(w) / "targets" / std::to_string(t)).string();
}
}  // namespace paths

Corpus load_ingested(const std::string& workdir) {
  return load_corpus(paths::hla(workdir), paths::dialogue(workdir));
}

namespace {

class Manifest {
 public:
  explicit Manifest(std::string workdir) : workdir_(std::move(workdir)), path_(paths::manifest(workdir_)) {
    if (fs::exists(path_)) {
      try {
        data_ = Json::parse(read_file(path_));
      } catch (const nlohmann::json::parse_error& e) {
        throw Error(path_ + ": " + e.what());
      }
    } else {
      data_ = Json::object();
    }
  }

  const Json* entry(Stage s) const {
    auto it = data_.find(to_string(s));
    return it == data_.end() ? nullptr : &*it;
  }

  /// True when every recorded file still hashes to its recorded value.
  std::optional<std::string> changed_file(Stage s) const {
    const Json* e = entry(s);
    if (!e) return std::nullopt;
    for (const auto& [rel, hash] : (*e)["files"].items()) {
      const auto full = (fs::path(workdir_) / rel).string();
      if (!fs::exists(full) || hex64(fnv1a(read_file(full))) != hash.get<std::string>()) return rel;
    }
    return std::nullopt;
  }

  void record(Stage s, const std::string& fingerprint, const std::vector<std::string>& files) {
    Json f = Json::object();
    for (const auto& full : files) {
      f[fs::relative(full, workdir_).generic_string()] = hex64(fnv1a(read_file(full)));
    }
    data_[to_string(s)] = {{"fingerprint", fingerprint}, {"files", f}};
    write_file(path_, data_.dump(2) + "\n");
  }

 private:
  std::string workdir_;
  std::string path_;
  Json data_;
};

std::vector<Stage> upstream_of(Stage s) {
  switch (s) {
    case Stage::ingest: return {};
    case Stage::fit_csm:
    case Stage::eval_csm: return {Stage::ingest};
    case Stage::community: return {Stage::fit_csm};
    case Stage::candidates: return {Stage::community};
    case Stage::train: return {Stage::candidates};
    case Stage::finetune: return {Stage::train};
    case Stage::eval_ranker: return {Stage::finetune};
    case Stage::crossval:
    case Stage::export_embeddings: return {Stage::fit_csm};
  }
  return {};
}

Json stage_slice(Stage s, const PipelineConfig& c) {
  switch (s) {
    case Stage::ingest:
      return {{"hla", hex64(fnv1a(read_file(c.hla_path)))},
              {"dialogue", hex64(fnv1a(read_file(c.dialogue_path)))},
              {"min_hla", c.min_hla}};
    case Stage::fit_csm: return csm_json(c.csm);
    case Stage::eval_csm:
      return {{"csm", csm_json(c.csm)}, {"mask_fraction", c.mask_fraction}, {"recall_n", c.recall_n},
              {"seed", c.mask_seed}};
    case Stage::community: return {{"community", community_json(c.community)}, {"targets", c.targets}};
    case Stage::candidates:
      return {{"sampling", sampling_json(c)}, {"n_folds", c.n_folds}, {"fold_seed", c.fold_seed}};
    case Stage::train: return {{"model", model_json(c.model)}, {"train", train_json(c.train)}};
    case Stage::finetune: return train_json(c.finetune);
    case Stage::eval_ranker: return Json::object();
    case Stage::crossval: {
      auto j = c.to_json();
      j.erase("corpus");
      j.erase("workdir");
      j.erase("csm");
      j.erase("csm_eval");
      return j;
    }
    case Stage::export_embeddings: return Json::object();
  }
  return Json::object();
}

struct Runner {
  const PipelineConfig& config;
  Manifest manifest;
  std::ostream& log;

  // Fingerprint this stage would carry under the current configuration.
  // Ingest is the only stage that reads the raw inputs; downstream stages
  // take its recorded fingerprint as given.
  std::string expected(Stage s) const {
    if (s == Stage::ingest) {
      if (const Json* e = manifest.entry(Stage::ingest)) return (*e)["fingerprint"].get<std::string>();
      return fresh(s);
    }
    return fresh(s);
  }

  std::string fresh(Stage s) const {
    Json j = {{"stage", to_string(s)}, {"config", stage_slice(s, config)}};
    for (Stage u : upstream_of(s)) j["upstream"][to_string(u)] = expected(u);
    return hex64(fnv1a(j.dump()));
  }

  // Ancestors first, so the earliest missing stage is the one named.
  void require(Stage u) const {
    for (Stage up : upstream_of(u)) require(up);
    const Json* e = manifest.entry(u);
    if (!e) throw StageError("run " + to_string(u) + " first");
    if (auto changed = manifest.changed_file(u)) {
      throw StageError("artifact " + *changed + " changed since " + to_string(u) + " wrote it; rerun " + to_string(u));
    }
    if ((*e)["fingerprint"].get<std::string>() != expected(u)) {
      throw StageError(to_string(u) + " artifacts were produced under a different configuration; rerun " +
                       to_string(u));
    }
  }
};

std::vector<CharacterId> resolve_targets(const Corpus& corpus, const PipelineConfig& config) {
  if (config.targets.empty()) throw Error("no target characters configured");
  std::vector<CharacterId> out;
  for (auto ext : config.targets) out.push_back(resolve_target(corpus, ext));
  return out;
}

std::string join_path(const std::string& a, const std::string& b) { return (fs::path(a) / b).string(); }

void put(std::vector<std::string>& files, const std::string& path, const std::string& contents) {
  fs::create_directories(fs::path(path).parent_path());
  write_file(path, contents);
  files.push_back(path);
}

csm::LatentFactors load_factors(const std::string& workdir) {
  return csm::deserialize_factors(read_file(paths::factors(workdir)));
}

std::vector<std::string> do_stage(Stage stage, const PipelineConfig& cfg, std::ostream& log) {
  const auto& w = cfg.workdir;
  std::vector<std::string> files;
  switch (stage) {
    case Stage::ingest: {
      auto corpus = filter_min_hla(load_corpus(cfg.hla_path, cfg.dialogue_path), cfg.min_hla);
      put(files, paths::hla(w), write_hla_file(corpus));
      put(files, paths::dialogue(w), write_dialogue_file(corpus));
      const auto stats = corpus_stats(corpus).to_string();
      put(files, join_path(w, "corpus/stats.txt"), stats);
      log << stats;
      break;
    }
    case Stage::fit_csm: {
      const auto corpus = load_ingested(w);
      const auto result = csm::fit(csm::InteractionMatrix::from_corpus(corpus), cfg.csm);
      put(files, paths::factors(w), csm::serialize_factors(result.factors));
      std::string curve = "sweep\tloss\n";
      for (std::size_t s = 0; s < result.loss_curve.size(); ++s) {
        curve += std::to_string(s + 1) + '\t' + format_double(result.loss_curve[s]) + '\n';
      }
      put(files, join_path(w, "csm/loss.tsv"), curve);
      log << "fitted " << corpus.num_characters() << " x " << corpus.num_hlas() << " matrix, final loss "
          << format_double(result.loss_curve.back()) << '\n';
      break;
    }
    case Stage::eval_csm: {
      const auto corpus = load_ingested(w);
      const auto P = csm::InteractionMatrix::from_corpus(corpus);
      auto [train, plan] = csm::mask(P, cfg.mask_fraction, cfg.mask_seed);
      const auto f = csm::fit(train, cfg.csm).factors;
      std::string out = "n\trecall\trandom_baseline\n";
      const double m = static_cast<double>(P.cols());
      for (int n = 1; n <= cfg.recall_n; ++n) {
        out += std::to_string(n) + '\t' + format_double(csm::recall_at_n(f, train, plan, n)) + '\t' +
               format_double(std::min(1.0, n / m)) + '\n';
      }
      put(files, join_path(w, "csm/recall.tsv"), out);
      log << "held out " << plan.held_out.size() << " positives; recall@" << cfg.recall_n << " = "
          << format_double(csm::recall_at_n(f, train, plan, cfg.recall_n)) << '\n';
      break;
    }
    case Stage::community: {
      const auto corpus = load_ingested(w);
      const auto f = load_factors(w);
      for (CharacterId t : resolve_targets(corpus, cfg)) {
        const auto c = ccm::build_community(f, t, cfg.community, corpus.dialogue_characters());
        const auto ext = corpus.character(t).external_id;
        put(files, paths::community(w, ext), ccm::export_community(c, corpus));
        const auto report = ccm::community_report(c, corpus, cfg.community);
        put(files, join_path(w, "community/" + std::to_string(ext) + ".txt"), report);
        log << report;
      }
      break;
    }
    case Stage::candidates: {
      const auto corpus = load_ingested(w);
      const auto f = load_factors(w);
      const auto plan = make_folds(corpus, cfg.n_folds, cfg.fold_seed);
      for (CharacterId t : resolve_targets(corpus, cfg)) {
        const auto ext = corpus.character(t).external_id;
        const auto community = ccm::import_community(read_file(paths::community(w, ext)), t);
        const auto data = build_target_data(corpus, f, community, split_for(corpus, plan, t), cfg);
        const auto dir = paths::target_dir(w, ext);
        put(files, join_path(dir, "uniform_train.tsv"), obs::write_candidate_sets(data.uniform_train));
        put(files, join_path(dir, "finetune_train.tsv"), obs::write_candidate_sets(data.finetune_train));
        put(files, join_path(dir, "eval_aloha.tsv"), obs::write_candidate_sets(data.eval_aloha));
        put(files, join_path(dir, "eval_uniform.tsv"), obs::write_candidate_sets(data.eval_uniform));
        put(files, join_path(dir, "fold.txt"), std::to_string(data.fold) + '\n');
        log << corpus.character(t).name << ": fold " << data.fold << ", " << data.uniform_train.size()
            << " uniform training sets, " << data.finetune_train.size() << " fine-tuning sets, "
            << data.eval_aloha.size() << " evaluation sets\n";
      }
      break;
    }
    case Stage::train:
    case Stage::finetune: {
      const auto corpus = load_ingested(w);
      for (CharacterId t : resolve_targets(corpus, cfg)) {
        const auto dir = paths::target_dir(w, corpus.character(t).external_id);
        const bool uniform = stage == Stage::train;
        const auto sets =
            obs::read_candidate_sets(read_file(join_path(dir, uniform ? "uniform_train.tsv" : "finetune_train.tsv")));
        check_provenance(sets, t, uniform ? "uniform_train.tsv" : "finetune_train.tsv");
        auto model = uniform ? ranker::BiEncoderModel(cfg.model)
                             : ranker::BiEncoderModel::deserialize(read_file(join_path(dir, "uniform.model")));
        const auto result = ranker::train(model, sets, uniform ? cfg.train : cfg.finetune);
        put(files, join_path(dir, uniform ? "uniform.model" : "aloha.model"), model.serialize());
        put(files, join_path(dir, uniform ? "uniform_loss.tsv" : "finetune_loss.tsv"),
            ranker::format_loss_curve(result.loss_curve));
        log << corpus.character(t).name << ": loss " << format_double(result.loss_curve.front()) << " -> "
            << format_double(result.loss_curve.back()) << '\n';
      }
      break;
    }
    case Stage::eval_ranker: {
      const auto corpus = load_ingested(w);
      std::vector<double> u, a;
      std::string summary;
      for (CharacterId t : resolve_targets(corpus, cfg)) {
        const auto dir = paths::target_dir(w, corpus.character(t).external_id);
        const auto uniform = ranker::BiEncoderModel::deserialize(read_file(join_path(dir, "uniform.model")));
        const auto aloha = ranker::BiEncoderModel::deserialize(read_file(join_path(dir, "aloha.model")));
        const auto ru = metrics::evaluate(ranker::BiEncoderScorer(uniform),
                                          obs::read_candidate_sets(read_file(join_path(dir, "eval_uniform.tsv"))));
        const auto ra = metrics::evaluate(ranker::BiEncoderScorer(aloha),
                                          obs::read_candidate_sets(read_file(join_path(dir, "eval_aloha.tsv"))));
        const std::string text = "uniform model\n" + ru.table(&corpus) + "\naloha model\n" + ra.table(&corpus);
        put(files, join_path(dir, "eval.txt"), text);
        std::string lines;
        for (const auto& [model, report] : {std::pair{"uniform", &ru}, std::pair{"aloha", &ra}}) {
          std::istringstream in(report->lines());
          for (std::string l; std::getline(in, l);) lines += std::string(model) + '\t' + l + '\n';
        }
        put(files, join_path(dir, "eval.tsv"), lines);
        u.push_back(ru.overall.hits1);
        a.push_back(ra.overall.hits1);
        summary += corpus.character(t).name + "\thits@1 uniform " + format_double(ru.overall.hits1) + "\taloha " +
                   format_double(ra.overall.hits1) + '\n';
      }
      const auto su = summarize(u), sa = summarize(a);
      summary += "mean hits@1 uniform " + format_double(su.mean) + " (sd " + format_double(su.stdev) + "), aloha " +
                 format_double(sa.mean) + " (sd " + format_double(sa.stdev) + ")\n";
      put(files, join_path(w, "report/eval.txt"), summary);
      log << summary;
      break;
    }
    case Stage::crossval: {
      const auto corpus = load_ingested(w);
      const auto result = crossval(corpus, load_factors(w), cfg);
      const auto report = result.report(corpus);
      put(files, join_path(w, "crossval/report.txt"), report);
      log << report;
      break;
    }
    case Stage::export_embeddings: {
      const auto corpus = load_ingested(w);
      const auto path = join_path(w, "csm/embeddings.tsv");
      fs::create_directories(fs::path(path).parent_path());
      csm::export_embeddings(load_factors(w), corpus, path);
      files.push_back(path);
      log << "wrote " << corpus.num_characters() << " embeddings to " << path << '\n';
      break;
    }
  }
  return files;
}

}  // namespace

StageOutcome run_stage(Stage stage, const PipelineConfig& config, std::ostream& log) {
  config.validate();
  if (stage == Stage::ingest && (config.hla_path.empty() || config.dialogue_path.empty())) {
    throw Error("ingest needs both corpus paths (hla and dialogue)");
  }
  fs::create_directories(config.workdir);
  Runner runner{config, Manifest(config.workdir), log};
  for (Stage u : upstream_of(stage)) runner.require(u);

  const auto fingerprint = runner.fresh(stage);
  if (const Json* e = runner.manifest.entry(stage)) {
    if ((*e)["fingerprint"].get<std::string>() == fingerprint && !runner.manifest.changed_file(stage)) {
      return {false, to_string(stage) + " is up to date"};
    }
  }
  const auto files = do_stage(stage, config, log);
  runner.manifest.record(stage, fingerprint, files);
  return {true, to_string(stage) + " done"};
}

}  // namespace aloha::pipeline
