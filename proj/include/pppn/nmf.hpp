#pragma once

// Non-negative matrix factorization F ~ E P with Lee-Seung multiplicative
// updates for the squared Frobenius objective.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "pppn/types.hpp"

namespace pppn {

struct NMFConfig {
  std::size_t k = 3;
  std::size_t max_iter = 200;
  double rel_tol = 1e-4;
  std::uint64_t seed = 0;
  double epsilon_guard = 1e-12;
};

struct NMFResult {
  Matrix E;  // rows x k
  Matrix P;  // k x D
  /// error_trace[0] is the objective at initialization, error_trace[t] after update t.
  std::vector<double> error_trace;
  std::size_t iterations_run = 0;
  bool converged = false;
};

class NMFError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Squared Frobenius reconstruction error.
inline double nmf_objective(const Matrix& F, const Matrix& E, const Matrix& P) {
  return (F - E * P).squaredNorm();
}

/// Uniform draw on (0, 1] from the top 53 bits of a 64-bit word; independent of the
/// standard library's distribution implementations.
inline double unit_open_closed(std::mt19937_64& gen) {
  return (static_cast<double>(gen() >> 11) + 1.0) * 0x1.0p-53;
}

/// One multiplicative step: P first, then E against the updated P.
inline void multiplicative_update(Matrix& E, Matrix& P, const Matrix& F, double eps = 1e-12) {
  if (E.rows() != F.rows() || P.cols() != F.cols() || E.cols() != P.rows())
    throw NMFError("multiplicative_update: shape mismatch (E " + std::to_string(E.rows()) + "x" +
                   std::to_string(E.cols()) + ", P " + std::to_string(P.rows()) + "x" +
                   std::to_string(P.cols()) + ", F " + std::to_string(F.rows()) + "x" +
                   std::to_string(F.cols()) + ")");
  {
    const Matrix numer = E.transpose() * F;
    const Matrix denom = (E.transpose() * E) * P;
    P = P.cwiseProduct(numer).cwiseQuotient((denom.array() + eps).matrix());
  }
  {
    const Matrix numer = F * P.transpose();
    const Matrix denom = E * (P * P.transpose());
    E = E.cwiseProduct(numer).cwiseQuotient((denom.array() + eps).matrix());
  }
}

inline NMFResult nmf_factorize(const Matrix& F, const NMFConfig& cfg) {
  const auto rows = static_cast<std::size_t>(F.rows());
  const auto cols = static_cast<std::size_t>(F.cols());
  if (cfg.k < 1 || cfg.k > std::min(rows, cols))
    throw NMFError("nmf: k=" + std::to_string(cfg.k) + " outside [1, min(" +
                   std::to_string(rows) + ", " + std::to_string(cols) + ")]");
  if (!(cfg.rel_tol > 0)) throw NMFError("nmf: rel_tol must be positive");
  if (!F.allFinite()) throw NMFError("nmf: non-finite input");
  if ((F.array() < 0).any()) throw NMFError("nmf: input has negative entries (clamp first)");

  const auto k = static_cast<Eigen::Index>(cfg.k);
  const double scale = std::sqrt(F.mean() / static_cast<double>(cfg.k));
  std::mt19937_64 gen(cfg.seed);
  NMFResult res;
  res.E.resize(F.rows(), k);
  res.P.resize(k, F.cols());
  for (Eigen::Index i = 0; i < res.E.size(); ++i) res.E.data()[i] = scale * unit_open_closed(gen);
  for (Eigen::Index i = 0; i < res.P.size(); ++i) res.P.data()[i] = scale * unit_open_closed(gen);

  const double err0 = nmf_objective(F, res.E, res.P);
  res.error_trace.push_back(err0);
  if (err0 == 0.0) {
    res.converged = true;
    return res;
  }
  double prev = err0;
  for (std::size_t t = 1; t <= cfg.max_iter; ++t) {
    multiplicative_update(res.E, res.P, F, cfg.epsilon_guard);
    const double err = nmf_objective(F, res.E, res.P);
    res.error_trace.push_back(err);
    res.iterations_run = t;
    if ((prev - err) / err0 < cfg.rel_tol) {
      res.converged = true;
      break;
    }
    prev = err;
  }
  return res;
}

}  // namespace pppn
