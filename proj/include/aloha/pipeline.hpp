#pragma once

#include <cstdint>
#include <iosfwd>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "aloha/ccm.hpp"
#include "aloha/common.hpp"
#include "aloha/corpus.hpp"
#include "aloha/csm.hpp"
#include "aloha/metrics.hpp"
#include "aloha/obs.hpp"
#include "aloha/ranker.hpp"

namespace aloha::pipeline {

using Json = nlohmann::json;

struct PipelineConfig {
  std::string hla_path;
  std::string dialogue_path;
  std::string workdir = "work";
  std::size_t min_hla = 0;

  csm::CsmConfig csm;
  double mask_fraction = 0.3;
  int recall_n = 10;
  std::uint64_t mask_seed = 0;

  ccm::CommunityConfig community;
  obs::SamplingConfig sampling;
  std::uint64_t obs_seed = 0;

  ranker::ModelConfig model;
  ranker::TrainConfig train;
  ranker::TrainConfig finetune;

  /// External ids of the target characters.
  std::vector<std::int64_t> targets;
  int n_folds = 5;
  std::uint64_t fold_seed = 0;

  PipelineConfig();
  void validate() const;
  /// Replaces every stage seed with one derived from `seed`.
  void override_seed(std::uint64_t seed);

  Json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static PipelineConfig from_json(const Json& j);
};

PipelineConfig load_config(const std::string& path);

/// Shows used for training and testing when `target` is held out.
struct Split {
  int fold = 0;
  std::vector<ShowId> train_shows;
  std::vector<ShowId> test_shows;
};
Split split_for(const Corpus& corpus, const FoldPlan& plan, CharacterId target);

/// Candidate sets for one held-out target.
struct TargetData {
  CharacterId target = 0;
  int fold = 0;
  /// Training-fold pairs with no-HLA observations and uniform distractors.
  std::vector<obs::CandidateSet> uniform_train;
  /// Training-fold lines of positive-community characters, each with its
  /// speaker's own HLA observation and negative-set distractors.
  std::vector<obs::CandidateSet> finetune_train;
  /// The target's lines with uniform test-fold distractors, guided and not.
  std::vector<obs::CandidateSet> eval_aloha;
  std::vector<obs::CandidateSet> eval_uniform;
};

TargetData build_target_data(const Corpus& corpus, const csm::LatentFactors& factors, const ccm::Community& community,
                             const Split& split, const PipelineConfig& config);

/// Throws if any training set carries a line spoken by `target`.
void check_provenance(const std::vector<obs::CandidateSet>& training, CharacterId target, const std::string& what);

struct TargetResult {
  CharacterId target = 0;
  int fold = 0;
  metrics::EvalReport uniform;
  metrics::EvalReport aloha;
  std::vector<double> uniform_loss;
  std::vector<double> finetune_loss;
};

struct TrainedModels {
  ranker::BiEncoderModel uniform;
  ranker::BiEncoderModel aloha;
  std::vector<double> uniform_loss;
  std::vector<double> finetune_loss;
};

TrainedModels train_models(const TargetData& data, const PipelineConfig& config);
TargetResult evaluate_models(const TargetData& data, const TrainedModels& models);

/// Everything after the CSM fit for one target, in memory.
TargetResult run_target(const Corpus& corpus, const csm::LatentFactors& factors, const FoldPlan& plan,
                        CharacterId target, const PipelineConfig& config);

struct Summary {
  double mean = 0.0;
  double stdev = 0.0;
};
Summary summarize(const std::vector<double>& values);

struct CrossvalResult {
  std::vector<TargetResult> targets;
  std::optional<metrics::TTest> hits1_test;  ///< ALOHA vs Uniform, paired over targets

  std::string report(const Corpus& corpus) const;
};

/// Targets for each fold: configured ones that fall in it, otherwise the
/// fold's character with the most lines (lowest id on ties).
std::vector<std::vector<CharacterId>> crossval_targets(const Corpus& corpus, const FoldPlan& plan,
                                                       const PipelineConfig& config);

CrossvalResult crossval(const Corpus& corpus, const csm::LatentFactors& factors, const PipelineConfig& config);

/// Workdir stages. Each records a fingerprint of its configuration and its
/// inputs in manifest.json; a rerun with the same fingerprint does nothing.
enum class Stage { ingest, fit_csm, eval_csm, community, candidates, train, finetune, eval_ranker, crossval, export_embeddings };

std::string to_string(Stage stage);
Stage parse_stage(const std::string& name);
const std::vector<Stage>& all_stages();

/// Upstream stage is missing or stale.
class StageError : public Error {
 public:
  using Error::Error;
};

struct StageOutcome {
  bool ran = false;
  std::string message;
};

StageOutcome run_stage(Stage stage, const PipelineConfig& config, std::ostream& log);

/// Artifact locations inside a workdir.
namespace paths {
std::string manifest(const std::string& workdir);
std::string hla(const std::string& workdir);
std::string dialogue(const std::string& workdir);
std::string factors(const std::string& workdir);
std::string community(const std::string& workdir, std::int64_t target);
std::string target_dir(const std::string& workdir, std::int64_t target);
}  // namespace paths

/// Loads the canonical corpus written by `ingest`.
Corpus load_ingested(const std::string& workdir);

}  // namespace aloha::pipeline
