#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "aloha/obs.hpp"
#include "aloha/text.hpp"

namespace aloha::ranker {

struct Tokenizer {
  std::size_t obs_cap = 360;
  std::size_t cand_cap = 72;
  bool lowercase = true;

  std::vector<std::string> operator()(std::string_view text, std::size_t cap) const {
    return text::tokenize(text, cap, lowercase);
  }
};

enum class Side { context, candidate };

struct ModelConfig {
  std::uint32_t vocab_buckets = 1u << 18;
  int dim = 64;
  /// Embedding rows start uniform in [-init_scale, init_scale].
  double init_scale = 0.1;
  /// Projections start as the identity (otherwise zero).
  bool identity_projection = true;
  std::uint64_t seed = 0;
  Tokenizer tokenizer;
};

/// Bag-of-hashed-tokens bi-encoder. Both sides share one embedding table;
/// each side has its own dim x dim projection. score = <ctx, cand>.
///
/// The embedding table is logically vocab_buckets x dim. Rows are generated
/// from (seed, bucket) on first use and stored only once they are updated.
class BiEncoderModel {
 public:
  using Projection = Eigen::MatrixXd;

  explicit BiEncoderModel(ModelConfig config = {});
  /// All parameters zero.
  static BiEncoderModel zeros(ModelConfig config = {});

  const ModelConfig& config() const { return config_; }
  int dim() const { return config_.dim; }

  std::uint32_t bucket(std::string_view token) const;
  std::vector<std::uint32_t> buckets(std::string_view text, Side side) const;

  /// Current value of an embedding row.
  void embedding_row(std::uint32_t bucket, std::span<double> out) const;
  /// Materializes the row if needed.
  std::span<double> mutable_row(std::uint32_t bucket);
  const std::unordered_map<std::uint32_t, std::vector<double>>& stored_rows() const { return rows_; }

  Projection& projection(Side side) { return side == Side::context ? context_proj_ : candidate_proj_; }
  const Projection& projection(Side side) const { return side == Side::context ? context_proj_ : candidate_proj_; }

  /// Mean of the token embeddings times the side's projection.
  Eigen::VectorXd encode(const std::vector<std::uint32_t>& buckets, Side side) const;
  Eigen::VectorXd encode_text(std::string_view text, Side side) const;
  double score(std::string_view obs_text, std::string_view candidate_text) const;

  std::uint64_t steps = 0;  ///< optimizer steps taken so far

  std::string serialize() const;
  static BiEncoderModel deserialize(const std::string& text);

 private:
  ModelConfig config_;
  std::unordered_map<std::uint32_t, std::vector<double>> rows_;
  Projection context_proj_;
  Projection candidate_proj_;
};

/// Scores a batch of candidates against one observation text.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual std::vector<double> scores(const std::string& obs_text, const std::vector<std::string>& candidates) const = 0;
};

class BiEncoderScorer : public Scorer {
 public:
  explicit BiEncoderScorer(const BiEncoderModel& model) : model_(model) {}
  std::vector<double> scores(const std::string& obs_text, const std::vector<std::string>& candidates) const override;

 private:
  const BiEncoderModel& model_;
};

/// Untrained baseline: tf-idf cosine between OBS and candidate.
class TfidfScorer : public Scorer {
 public:
  explicit TfidfScorer(text::TfIdf tfidf) : tfidf_(std::move(tfidf)) {}
  std::vector<double> scores(const std::string& obs_text, const std::vector<std::string>& candidates) const override;

 private:
  text::TfIdf tfidf_;
};

/// Fits idf over every context and response in the corpus.
TfidfScorer tfidf_scorer(const Corpus& corpus);
text::TfIdf corpus_tfidf(const Corpus& corpus);

struct Ranking {
  std::vector<int> order;  ///< candidate indices, best first
  std::vector<double> scores;
  int gt_rank = 0;  ///< 1-based
};

/// Descending score, ties by ascending candidate index.
Ranking rank(const Scorer& scorer, const obs::CandidateSet& set);

enum class Stage { uniform, lsrm_finetune };

struct TrainConfig {
  int epochs = 10;
  int batch_size = 16;
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  Stage stage = Stage::uniform;

  void validate() const;
};

struct TrainResult {
  /// loss_curve[e] is the mean set loss after e epochs (entry 0 is before training).
  std::vector<double> loss_curve;
};

/// Minimizes softmax cross-entropy over each set's candidates with Adam.
/// Per-set gradients run in parallel and are reduced in set order.
/// The uniform stage expects unguided (all `none`) observations; the
/// fine-tune stage expects guided ones and a previously trained model.
TrainResult train(BiEncoderModel& model, const std::vector<obs::CandidateSet>& sets, const TrainConfig& cfg);

std::string format_loss_curve(const std::vector<double>& curve);

/// Gradient of one set's loss.
struct Gradient {
  std::map<std::uint32_t, Eigen::VectorXd> rows;
  Eigen::MatrixXd context_proj;
  Eigen::MatrixXd candidate_proj;
};

double set_loss(const BiEncoderModel& model, const obs::CandidateSet& set);
double set_loss_and_gradient(const BiEncoderModel& model, const obs::CandidateSet& set, Gradient& grad);

/// Identifies one scalar parameter.
struct ParamRef {
  enum class Kind { embedding, context_proj, candidate_proj } kind;
  std::uint32_t bucket = 0;  ///< embedding only
  int row = 0;
  int col = 0;
};

double& param(BiEncoderModel& model, const ParamRef& p);
double analytic_gradient(const Gradient& g, const ParamRef& p);
double finite_difference(const BiEncoderModel& model, const obs::CandidateSet& set, const ParamRef& p, double eps);

struct GradientCheck {
  double max_relative_error = 0.0;
  std::size_t parameters_checked = 0;
};

/// Compares analytic gradients with central differences on up to
/// `samples` parameters drawn from the set's embedding rows and projections.
GradientCheck gradient_check(const BiEncoderModel& model, const obs::CandidateSet& set, double eps,
                             std::size_t samples = 256, std::uint64_t seed = 0);

std::string to_string(Stage stage);
Stage parse_stage(const std::string& s);

}  // namespace aloha::ranker
