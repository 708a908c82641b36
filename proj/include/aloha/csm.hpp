#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aloha/corpus.hpp"

namespace aloha::csm {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Binary character x HLA preference matrix stored as sorted positive lists
/// per row and per column.
class InteractionMatrix {
 public:
  InteractionMatrix() = default;
  /// Throws on out-of-range or duplicate positives.
  InteractionMatrix(int rows, int cols, std::vector<std::pair<int, int>> positives);

  static InteractionMatrix from_corpus(const Corpus& corpus);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t nnz() const { return nnz_; }
  const std::vector<int>& row(int u) const { return by_row_[u]; }
  const std::vector<int>& col(int i) const { return by_col_[i]; }
  bool contains(int u, int i) const;
  std::vector<std::pair<int, int>> positives() const;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::size_t nnz_ = 0;
  std::vector<std::vector<int>> by_row_;
  std::vector<std::vector<int>> by_col_;
};

enum class InnerSolver { direct, cg };

enum class LossMode {
  /// Weights 1 + alpha * P, targets P.
  confidence,
  /// Unit weights, targets alpha * P.
  unit_weight,
};

struct CsmConfig {
  double alpha = 20.0;
  double lambda = 100.0;
  int dim = 36;
  int sweeps = 15;
  InnerSolver inner_solver = InnerSolver::cg;
  int cg_iters = 3;
  LossMode loss_mode = LossMode::confidence;
  std::uint64_t seed = 0;

  void validate() const;
};

struct LatentFactors {
  Matrix X;  ///< characters x dim
  Matrix Y;  ///< HLAs x dim

  int dim() const { return static_cast<int>(X.cols()); }
  double score(int u, int i) const;
};

struct FitResult {
  LatentFactors factors;
  /// Objective after each sweep.
  std::vector<double> loss_curve;
};

/// Seeded uniform noise in [-0.01, 0.01], X first then Y.
LatentFactors initial_factors(int rows, int cols, int dim, std::uint64_t seed);

/// Alternating least squares. Row solves run in parallel under OpenMP; the
/// result does not depend on the thread count.
FitResult fit(const InteractionMatrix& P, const CsmConfig& config);

/// Continues ALS from the given factors.
FitResult fit_from(const InteractionMatrix& P, const CsmConfig& config, LatentFactors start);

/// One half sweep: re-solves every row of `target` holding `fixed` constant.
/// `by_row` lists the positive columns of each target row.
void solve_rows(const std::vector<std::vector<int>>& by_row, const Matrix& fixed, Matrix& target,
                const CsmConfig& config);

namespace reference {
/// Single-threaded ALS that assembles each row's normal equations from every
/// column explicitly and solves them directly. Kept to check the fast kernel.
FitResult fit(const InteractionMatrix& P, const CsmConfig& config);
void solve_rows(const InteractionMatrix& P, bool character_side, const Matrix& fixed, Matrix& target,
                const CsmConfig& config);
}  // namespace reference

double loss(const InteractionMatrix& P, const LatentFactors& f, const CsmConfig& config);

struct MaskPlan {
  std::vector<std::pair<int, int>> held_out;  ///< sorted
  double fraction = 0.3;
  std::uint64_t seed = 0;
  /// Rows left with no training positives after masking.
  std::vector<int> empty_rows;
};

/// Removes round(fraction * nnz) seeded positives from P.
std::pair<InteractionMatrix, MaskPlan> mask(const InteractionMatrix& P, double fraction, std::uint64_t seed);

struct ScoredHla {
  HlaId hla;
  double score;
};

/// All HLAs by descending score, ties by ascending id.
std::vector<ScoredHla> rank_hlas(const LatentFactors& f, int u);

struct RecallOptions {
  bool exclude_observed = true;
};

/// Fraction of held-out positives recovered in each character's top N.
/// `train` supplies the observed positives that are skipped when ranking.
double recall_at_n(const LatentFactors& f, const InteractionMatrix& train, const MaskPlan& plan, int N,
                   RecallOptions options = {});

double dot(std::span<const double> a, std::span<const double> b);

/// Cosine of the two character factor rows.
double character_similarity(const LatentFactors& f, int a, int b);

void export_embeddings(const LatentFactors& f, const Corpus& corpus, const std::string& path);
std::string format_embeddings(const LatentFactors& f, const Corpus& corpus);

/// Round-trip exact factor storage used by the pipeline.
std::string serialize_factors(const LatentFactors& f);
LatentFactors deserialize_factors(const std::string& text);

std::string to_string(LossMode mode);
std::string to_string(InnerSolver solver);
LossMode parse_loss_mode(const std::string& s);
InnerSolver parse_inner_solver(const std::string& s);

}  // namespace aloha::csm
