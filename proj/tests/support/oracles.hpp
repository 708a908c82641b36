#pragma once

// Independent oracles used by the unit and acceptance suites. They share no
// code paths with the implementations they check beyond the data types.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <vector>

#include "aloha/ccm.hpp"
#include "aloha/csm.hpp"

namespace aloha::oracle {

using Dense = Eigen::MatrixXd;

inline Dense dense_matrix(const csm::InteractionMatrix& P) {
  Dense D = Dense::Zero(P.rows(), P.cols());
  for (auto [u, i] : P.positives()) D(u, i) = 1.0;
  return D;
}

/// Literal double sum over every cell plus the L2 term.
inline double objective(const Dense& P, const Dense& X, const Dense& Y, const csm::CsmConfig& cfg) {
  double total = 0.0;
  for (int u = 0; u < P.rows(); ++u) {
    for (int i = 0; i < P.cols(); ++i) {
      const double pred = X.row(u).dot(Y.row(i));
      double weight = 1.0, target = P(u, i);
      if (cfg.loss_mode == csm::LossMode::confidence) {
        weight = 1.0 + cfg.alpha * P(u, i);
      } else {
        target = cfg.alpha * P(u, i);
      }
      total += weight * (target - pred) * (target - pred);
    }
  }
  return total + cfg.lambda * (X.squaredNorm() + Y.squaredNorm());
}

inline void gradient(const Dense& P, const Dense& X, const Dense& Y, const csm::CsmConfig& cfg, Dense& gX, Dense& gY) {
  Dense W(P.rows(), P.cols()), T(P.rows(), P.cols());
  for (int u = 0; u < P.rows(); ++u) {
    for (int i = 0; i < P.cols(); ++i) {
      if (cfg.loss_mode == csm::LossMode::confidence) {
        W(u, i) = 1.0 + cfg.alpha * P(u, i);
        T(u, i) = P(u, i);
      } else {
        W(u, i) = 1.0;
        T(u, i) = cfg.alpha * P(u, i);
      }
    }
  }
  const Dense R = W.cwiseProduct(X * Y.transpose() - T);
  gX = 2.0 * R * Y + 2.0 * cfg.lambda * X;
  gY = 2.0 * R.transpose() * X + 2.0 * cfg.lambda * Y;
}

/// Full-batch gradient descent with Armijo backtracking, started from the
/// given factors and run until the gradient norm falls below `tol`.
inline double gradient_descent_minimum(const csm::InteractionMatrix& Pm, const csm::CsmConfig& cfg, Dense X, Dense Y,
                                       double tol = 1e-10, int max_iter = 2'000'000) {
  const Dense P = dense_matrix(Pm);
  Dense gX, gY;
  double f = objective(P, X, Y, cfg);
  double step = 1e-2;
  for (int it = 0; it < max_iter; ++it) {
    gradient(P, X, Y, cfg, gX, gY);
    const double g2 = gX.squaredNorm() + gY.squaredNorm();
    if (std::sqrt(g2) < tol) break;
    step *= 2.0;
    while (true) {
      Dense Xn = X - step * gX, Yn = Y - step * gY;
      const double fn = objective(P, Xn, Yn, cfg);
      if (fn <= f - 0.5 * step * g2) {
        X = std::move(Xn);
        Y = std::move(Yn);
        f = fn;
        break;
      }
      step *= 0.5;
      if (step < 1e-20) return f;
    }
  }
  return f;
}

inline csm::InteractionMatrix random_matrix(int rows, int cols, double density, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution on(density);
  std::vector<std::pair<int, int>> pos;
  for (int u = 0; u < rows; ++u) {
    for (int i = 0; i < cols; ++i) {
      if (on(rng)) pos.emplace_back(u, i);
    }
  }
  return csm::InteractionMatrix(rows, cols, std::move(pos));
}

/// Literal three-step community definition over an explicit similarity table.
inline ccm::Community community(const csm::LatentFactors& f, CharacterId target, const ccm::CommunityConfig& cfg,
                                const std::vector<CharacterId>& dialogue) {
  const int n = static_cast<int>(f.X.rows());
  std::vector<std::vector<double>> sim(n, std::vector<double>(n));
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) sim[a][b] = csm::character_similarity(f, a, b);
  }
  auto ranking = [&](int anchor) {
    std::vector<int> ids;
    for (int u = 0; u < n; ++u) {
      if (u != anchor && u != target) ids.push_back(u);
    }
    std::sort(ids.begin(), ids.end(), [&](int a, int b) {
      if (sim[anchor][a] != sim[anchor][b]) return sim[anchor][a] > sim[anchor][b];
      return a < b;
    });
    return ids;
  };
  ccm::Community c;
  c.target = target;
  auto first = ranking(target);
  const auto fl = static_cast<std::size_t>(std::ceil(cfg.first_level_fraction * (n - 1) - 1e-9));
  first.resize(std::min(first.size(), fl));
  c.first_level = first;
  std::map<int, int> counts;
  for (int s : first) {
    auto second = ranking(s);
    second.resize(std::min<std::size_t>(second.size(), static_cast<std::size_t>(cfg.second_level_k)));
    for (int m : second) ++counts[m];
  }
  c.second_level_counts = counts;
  for (auto [m, k] : counts) {
    if (k >= cfg.min_frequency) c.positive.insert(m);
  }
  for (int d : dialogue) {
    if (d != target && !c.positive.count(d)) c.negative.insert(d);
  }
  return c;
}

/// Seeded Gaussian factors with planted clusters around random centers.
inline csm::LatentFactors clustered_factors(int n, int dim, int clusters, double spread, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Dense centers(clusters, dim);
  for (int k = 0; k < centers.size(); ++k) centers.data()[k] = g(rng);
  csm::LatentFactors f;
  f.X.resize(n, dim);
  f.Y = csm::Matrix::Zero(1, dim);
  for (int u = 0; u < n; ++u) {
    for (int d = 0; d < dim; ++d) f.X(u, d) = centers(u % clusters, d) + spread * g(rng);
  }
  return f;
}

}  // namespace aloha::oracle
