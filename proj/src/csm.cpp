#include "aloha/csm.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "aloha/common.hpp"

namespace aloha::csm {

InteractionMatrix::InteractionMatrix(int rows, int cols, std::vector<std::pair<int, int>> positives)
    : rows_(rows), cols_(cols), by_row_(static_cast<std::size_t>(rows)), by_col_(static_cast<std::size_t>(cols)) {
  if (rows < 0 || cols < 0) throw Error("negative matrix shape");
  std::sort(positives.begin(), positives.end());
  for (std::size_t k = 0; k < positives.size(); ++k) {
    auto [u, i] = positives[k];
    if (u < 0 || u >= rows || i < 0 || i >= cols) {
      throw Error("positive (" + std::to_string(u) + ", " + std::to_string(i) + ") out of range");
    }
    if (k > 0 && positives[k - 1] == positives[k]) {
      throw Error("duplicate positive (" + std::to_string(u) + ", " + std::to_string(i) + ")");
    }
    by_row_[u].push_back(i);
    by_col_[i].push_back(u);
  }
  nnz_ = positives.size();
}

InteractionMatrix InteractionMatrix::from_corpus(const Corpus& corpus) {
  std::vector<std::pair<int, int>> pos;
  for (const auto& ch : corpus.characters()) {
    for (HlaId h : ch.hla_ids) pos.emplace_back(ch.id, h);
  }
  return InteractionMatrix(static_cast<int>(corpus.num_characters()), static_cast<int>(corpus.num_hlas()),
                           std::move(pos));
}

bool InteractionMatrix::contains(int u, int i) const {
  const auto& r = by_row_.at(static_cast<std::size_t>(u));
  return std::binary_search(r.begin(), r.end(), i);
}

std::vector<std::pair<int, int>> InteractionMatrix::positives() const {
  std::vector<std::pair<int, int>> out;
  out.reserve(nnz_);
  for (int u = 0; u < rows_; ++u) {
    for (int i : by_row_[u]) out.emplace_back(u, i);
  }
  return out;
}

void CsmConfig::validate() const {
  if (!(alpha > 0)) throw Error("alpha must be positive");
  if (!(lambda >= 0)) throw Error("lambda must be non-negative");
  if (dim < 1) throw Error("dim must be at least 1");
  if (sweeps < 1) throw Error("sweeps must be at least 1");
  if (cg_iters < 1) throw Error("cg_iters must be at least 1");
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

namespace {

std::span<const double> row_span(const Matrix& M, Eigen::Index r) {
  return {M.data() + r * M.cols(), static_cast<std::size_t>(M.cols())};
}

// Confidence weight and target value of a positive cell.
std::pair<double, double> positive_cell(const CsmConfig& c) {
  return c.loss_mode == LossMode::confidence ? std::pair{1.0 + c.alpha, 1.0} : std::pair{1.0, c.alpha};
}

void check_finite(const Matrix& M, int sweep, const char* which) {
  if (!M.allFinite()) {
    throw DivergenceError(std::string("non-finite ") + which + " factors in sweep " + std::to_string(sweep));
  }
}

}  // namespace

double LatentFactors::score(int u, int i) const { return dot(row_span(X, u), row_span(Y, i)); }

LatentFactors initial_factors(int rows, int cols, int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(-0.01, 0.01);
  LatentFactors f;
  f.X.resize(rows, dim);
  f.Y.resize(cols, dim);
  for (Eigen::Index k = 0; k < f.X.size(); ++k) f.X.data()[k] = noise(rng);
  for (Eigen::Index k = 0; k < f.Y.size(); ++k) f.Y.data()[k] = noise(rng);
  return f;
}

void solve_rows(const std::vector<std::vector<int>>& by_row, const Matrix& fixed, Matrix& target,
                const CsmConfig& config) {
  const int d = static_cast<int>(fixed.cols());
  const int n = static_cast<int>(target.rows());
  const auto [weight, value] = positive_cell(config);
  // Extra weight a positive cell carries over the unit weight in G.
  const double extra = weight - 1.0;
  const Eigen::MatrixXd gram = fixed.transpose() * fixed;
  std::atomic<int> singular_row{-1};

#pragma omp parallel
  {
    Eigen::MatrixXd A(d, d);
    Eigen::VectorXd b(d), x(d), r(d), p(d), Ap(d);
#pragma omp for schedule(dynamic, 16)
    for (int u = 0; u < n; ++u) {
      const auto& pos = by_row[u];
      b.setZero();
      for (int i : pos) b += fixed.row(i).transpose() * (weight * value);

      if (config.inner_solver == InnerSolver::direct) {
        A = gram;
        if (extra != 0.0) {
          for (int i : pos) A.selfadjointView<Eigen::Lower>().rankUpdate(fixed.row(i).transpose(), extra);
        }
        A.diagonal().array() += config.lambda;
        Eigen::LLT<Eigen::MatrixXd> llt(A);
        if (llt.info() != Eigen::Success) {
          singular_row.store(u);
          continue;
        }
        target.row(u) = llt.solve(b).transpose();
        continue;
      }

      auto apply = [&](const Eigen::VectorXd& v, Eigen::VectorXd& out) {
        out.noalias() = gram * v;
        out += config.lambda * v;
        if (extra != 0.0) {
          for (int i : pos) out += fixed.row(i).transpose() * (extra * fixed.row(i).dot(v));
        }
      };
      x = target.row(u).transpose();
      apply(x, Ap);
      r = b - Ap;
      p = r;
      double rr = r.squaredNorm();
      for (int it = 0; it < config.cg_iters && rr > 0.0; ++it) {
        apply(p, Ap);
        const double pAp = p.dot(Ap);
        if (!(pAp > 0.0)) break;
        const double step = rr / pAp;
        x += step * p;
        r -= step * Ap;
        const double rr_next = r.squaredNorm();
        p = r + (rr_next / rr) * p;
        rr = rr_next;
      }
      target.row(u) = x.transpose();
    }
  }
  if (singular_row.load() >= 0) {
    throw Error("singular normal equations for row " + std::to_string(singular_row.load()) +
                " (lambda = 0 with degenerate data?)");
  }
}

FitResult fit_from(const InteractionMatrix& P, const CsmConfig& config, LatentFactors f) {
  config.validate();
  if (P.rows() == 0 || P.cols() == 0) throw Error("cannot fit an empty matrix");
  if (f.X.rows() != P.rows() || f.Y.rows() != P.cols() || f.X.cols() != config.dim || f.Y.cols() != config.dim) {
    throw Error("starting factors do not match matrix shape");
  }
  std::vector<std::vector<int>> rows(P.rows()), cols(P.cols());
  for (int u = 0; u < P.rows(); ++u) rows[u] = P.row(u);
  for (int i = 0; i < P.cols(); ++i) cols[i] = P.col(i);

  FitResult result;
  for (int s = 0; s < config.sweeps; ++s) {
    solve_rows(rows, f.Y, f.X, config);
    check_finite(f.X, s, "character");
    solve_rows(cols, f.X, f.Y, config);
    check_finite(f.Y, s, "HLA");
    result.loss_curve.push_back(loss(P, f, config));
  }
  result.factors = std::move(f);
  return result;
}

FitResult fit(const InteractionMatrix& P, const CsmConfig& config) {
  config.validate();
  return fit_from(P, config, initial_factors(P.rows(), P.cols(), config.dim, config.seed));
}

namespace reference {

void solve_rows(const InteractionMatrix& P, bool character_side, const Matrix& fixed, Matrix& target,
                const CsmConfig& config) {
  const int d = static_cast<int>(fixed.cols());
  const auto [weight, value] = positive_cell(config);
  for (Eigen::Index t = 0; t < target.rows(); ++t) {
    Eigen::MatrixXd A = Eigen::MatrixXd::Identity(d, d) * config.lambda;
    Eigen::VectorXd b = Eigen::VectorXd::Zero(d);
    for (Eigen::Index k = 0; k < fixed.rows(); ++k) {
      const bool positive = character_side ? P.contains(static_cast<int>(t), static_cast<int>(k))
                                           : P.contains(static_cast<int>(k), static_cast<int>(t));
      const double c = positive ? weight : 1.0;
      const double p = positive ? value : 0.0;
      Eigen::VectorXd y = fixed.row(k).transpose();
      A += c * y * y.transpose();
      b += c * p * y;
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
    if (!qr.isInvertible()) throw Error("singular normal equations for row " + std::to_string(t));
    target.row(t) = qr.solve(b).transpose();
  }
}

FitResult fit(const InteractionMatrix& P, const CsmConfig& config) {
  config.validate();
  if (P.rows() == 0 || P.cols() == 0) throw Error("cannot fit an empty matrix");
  LatentFactors f = initial_factors(P.rows(), P.cols(), config.dim, config.seed);
  FitResult result;
  for (int s = 0; s < config.sweeps; ++s) {
    solve_rows(P, true, f.Y, f.X, config);
    check_finite(f.X, s, "character");
    solve_rows(P, false, f.X, f.Y, config);
    check_finite(f.Y, s, "HLA");
    result.loss_curve.push_back(csm::loss(P, f, config));
  }
  result.factors = std::move(f);
  return result;
}

}  // namespace reference

double loss(const InteractionMatrix& P, const LatentFactors& f, const CsmConfig& config) {
  if (f.X.rows() != P.rows() || f.Y.rows() != P.cols() || f.X.cols() != f.Y.cols()) {
    throw Error("factor dimensions do not match the interaction matrix");
  }
  const auto [weight, value] = positive_cell(config);
  // Sum over every cell of (X_u . Y_i)^2, then correct the positive cells.
  const Eigen::MatrixXd gram = f.Y.transpose() * f.Y;
  double total = (f.X * gram).cwiseProduct(f.X).sum();
  for (int u = 0; u < P.rows(); ++u) {
    for (int i : P.row(u)) {
      const double s = f.score(u, i);
      total += weight * (value - s) * (value - s) - s * s;
    }
  }
  total += config.lambda * (f.X.squaredNorm() + f.Y.squaredNorm());
  return total;
}

std::pair<InteractionMatrix, MaskPlan> mask(const InteractionMatrix& P, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw Error("mask fraction must lie in (0, 1)");
  auto pos = P.positives();
  std::vector<std::size_t> order(pos.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pos.size())));

  std::vector<char> held(pos.size(), 0);
  for (std::size_t j = 0; j < k; ++j) held[order[j]] = 1;

  MaskPlan plan;
  plan.fraction = fraction;
  plan.seed = seed;
  std::vector<std::pair<int, int>> train;
  for (std::size_t j = 0; j < pos.size(); ++j) {
    (held[j] ? plan.held_out : train).push_back(pos[j]);
  }
  InteractionMatrix masked(P.rows(), P.cols(), std::move(train));
  for (int u = 0; u < P.rows(); ++u) {
    if (masked.row(u).empty() && !P.row(u).empty()) plan.empty_rows.push_back(u);
  }
  return {std::move(masked), std::move(plan)};
}

std::vector<ScoredHla> rank_hlas(const LatentFactors& f, int u) {
  if (u < 0 || u >= f.X.rows()) throw NotFoundError("character " + std::to_string(u) + " out of range");
  std::vector<ScoredHla> out(static_cast<std::size_t>(f.Y.rows()));
  for (int i = 0; i < f.Y.rows(); ++i) out[i] = {i, f.score(u, i)};
  std::stable_sort(out.begin(), out.end(), [](const ScoredHla& a, const ScoredHla& b) { return a.score > b.score; });
  return out;
}

double recall_at_n(const LatentFactors& f, const InteractionMatrix& train, const MaskPlan& plan, int N,
                   RecallOptions options) {
  if (N < 1) throw Error("N must be at least 1");
  if (plan.held_out.empty()) throw Error("recall is undefined with no held-out positives");

  std::vector<std::vector<int>> held(static_cast<std::size_t>(f.X.rows()));
  for (auto [u, i] : plan.held_out) held.at(static_cast<std::size_t>(u)).push_back(i);
  const int n = static_cast<int>(f.X.rows());
  const int m = static_cast<int>(f.Y.rows());

  long long hits = 0;
#pragma omp parallel for schedule(dynamic, 8) reduction(+ : hits)
  for (int u = 0; u < n; ++u) {
    if (held[u].empty()) continue;
    std::vector<std::pair<double, int>> cand;
    cand.reserve(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
      if (options.exclude_observed && train.contains(u, i)) continue;
      cand.emplace_back(-f.score(u, i), i);
    }
    const auto top = static_cast<std::ptrdiff_t>(std::min<std::size_t>(static_cast<std::size_t>(N), cand.size()));
    std::partial_sort(cand.begin(), cand.begin() + top, cand.end());
    std::vector<int> picked;
    for (std::ptrdiff_t k = 0; k < top; ++k) picked.push_back(cand[k].second);
    std::sort(picked.begin(), picked.end());
    for (int i : held[u]) {
      if (std::binary_search(picked.begin(), picked.end(), i)) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(plan.held_out.size());
}

double character_similarity(const LatentFactors& f, int a, int b) {
  if (a < 0 || a >= f.X.rows() || b < 0 || b >= f.X.rows()) throw NotFoundError("character out of range");
  const auto ra = row_span(f.X, a);
  const auto rb = row_span(f.X, b);
  const double na = dot(ra, ra);
  const double nb = dot(rb, rb);
  if (na == 0.0) throw Error("character " + std::to_string(a) + " has a zero factor row");
  if (nb == 0.0) throw Error("character " + std::to_string(b) + " has a zero factor row");
  return dot(ra, rb) / (std::sqrt(na) * std::sqrt(nb));
}

std::string format_embeddings(const LatentFactors& f, const Corpus& corpus) {
  if (static_cast<std::size_t>(f.X.rows()) != corpus.num_characters()) {
    throw Error("factor rows do not match the corpus");
  }
  std::string out;
  for (int u = 0; u < f.X.rows(); ++u) {
    out += std::to_string(u);
    out += '\t';
    out += escape_field(corpus.character(u).name);
    out += '\t';
    for (int k = 0; k < f.X.cols(); ++k) {
      if (k) out += ',';
      out += format_double(f.X(u, k));
    }
    out += '\n';
  }
  return out;
}

void export_embeddings(const LatentFactors& f, const Corpus& corpus, const std::string& path) {
  write_file(path, format_embeddings(f, corpus));
}

std::string serialize_factors(const LatentFactors& f) {
  std::string out = "csm-factors v1\n";
  out += std::to_string(f.X.rows()) + ' ' + std::to_string(f.Y.rows()) + ' ' + std::to_string(f.X.cols()) + '\n';
  auto dump = [&](const Matrix& M) {
    for (Eigen::Index r = 0; r < M.rows(); ++r) {
      for (Eigen::Index c = 0; c < M.cols(); ++c) {
        if (c) out += ',';
        out += format_double(M(r, c));
      }
      out += '\n';
    }
  };
  dump(f.X);
  dump(f.Y);
  return out;
}

LatentFactors deserialize_factors(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "csm-factors v1") throw Error("not a csm factor file");
  long rows = 0, cols = 0, dim = 0;
  if (!std::getline(in, line)) throw Error("truncated factor file");
  std::istringstream(line) >> rows >> cols >> dim;
  if (rows < 0 || cols < 0 || dim < 1) throw Error("bad factor file header");
  LatentFactors f;
  f.X.resize(rows, dim);
  f.Y.resize(cols, dim);
  auto load = [&](Matrix& M) {
    for (Eigen::Index r = 0; r < M.rows(); ++r) {
      if (!std::getline(in, line)) throw Error("truncated factor file");
      auto parts = split_escaped(line, ',');
      if (static_cast<long>(parts.size()) != dim) throw Error("bad factor row width");
      for (long c = 0; c < dim; ++c) M(r, c) = parse_double(parts[c]);
    }
  };
  load(f.X);
  load(f.Y);
  return f;
}

std::string to_string(LossMode mode) { return mode == LossMode::confidence ? "confidence" : "unit_weight"; }
std::string to_string(InnerSolver solver) { return solver == InnerSolver::direct ? "direct" : "cg"; }

LossMode parse_loss_mode(const std::string& s) {
  if (s == "confidence") return LossMode::confidence;
  if (s == "unit_weight") return LossMode::unit_weight;
  throw Error("unknown loss mode '" + s + "'");
}

InnerSolver parse_inner_solver(const std::string& s) {
  if (s == "direct") return InnerSolver::direct;
  if (s == "cg") return InnerSolver::cg;
  throw Error("unknown inner solver '" + s + "'");
}

}  // namespace aloha::csm
