#pragma once

// Decomposition of a class head vector v into k part-prototypes whose sum is v:
//   NMF prototypes P -> least-squares scales alpha -> residual R = v - alpha P
//   -> split R into parts r_i (naive or refined) -> p~_i = alpha_i p_i + r_i.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "pppn/dataset.hpp"
#include "pppn/nelder_mead.hpp"
#include "pppn/nmf.hpp"
#include "pppn/types.hpp"

namespace pppn {

class DecompositionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DegenerateCoefficients : public DecompositionError {
 public:
  DegenerateCoefficients() : DecompositionError("sum of scaling coefficients is zero") {}
};

struct RefineConfig {
  double tol = 1e-6;
  std::size_t max_iter = 100;
  double simplex_step = 0.05;
};

struct ClassDecomposition {
  int class_id = 0;
  std::size_t k = 0;
  Matrix P;          // k x D initial prototypes
  Vector alpha;      // k
  RowVector R;       // 1 x D residual
  Matrix r;          // k x D residual parts
  Matrix p_tilde;    // k x D refined prototypes
  RowVector v;       // 1 x D head row being decomposed
  RefineMode refinement_mode = RefineMode::dynamic;
  std::vector<double> nmf_trace;
  std::size_t nmf_iterations = 0;
  bool nmf_converged = false;
  std::vector<double> objective_trace;  // refinement objective, [0] at the naive start
  std::size_t refine_iterations = 0;
  bool uniform_fallback = false;   // naive split fell back to R/k
  bool min_norm_fallback = false;  // scaling used the minimum-norm solve

  double objective_initial() const { return objective_trace.empty() ? 0.0 : objective_trace.front(); }
  double objective_final() const { return objective_trace.empty() ? 0.0 : objective_trace.back(); }

  /// max-abs of v - sum_i p~_i
  double reconstruction_error() const {
    return (v - p_tilde.colwise().sum()).cwiseAbs().maxCoeff();
  }
};

struct ScaleResult {
  Vector alpha;
  bool min_norm = false;
};

/// Least-squares coefficients minimizing |v - sum_i alpha_i p_i|^2 via the normal equations,
/// with a minimum-norm solve when P P^T is singular.
inline ScaleResult scale_prototypes_ex(const RowVector& v, const Matrix& P) {
  if (P.cols() != v.size())
    throw DecompositionError("scale_prototypes: D mismatch (" + std::to_string(P.cols()) + " vs " +
                             std::to_string(v.size()) + ")");
  if (!v.allFinite() || !P.allFinite()) throw DecompositionError("scale_prototypes: non-finite input");
  ScaleResult out;
  const Matrix gram = P * P.transpose();
  const Vector rhs = P * v.transpose();
  Eigen::LDLT<Matrix> ldlt(gram);
  const auto pivots = ldlt.vectorD().cwiseAbs();
  const bool singular = ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
                        gram.diagonal().minCoeff() <= 0 || pivots.minCoeff() <= 1e-12 * pivots.maxCoeff() ||
                        ldlt.rcond() < 1e-12;
  if (singular) {
    out.alpha = P.transpose().completeOrthogonalDecomposition().solve(v.transpose());
    out.min_norm = true;
    return out;
  }
  out.alpha = ldlt.solve(rhs);
  // One step of iterative refinement against the true residual.
  const RowVector resid = v - out.alpha.transpose() * P;
  out.alpha += ldlt.solve(P * resid.transpose());
  return out;
}

inline Vector scale_prototypes(const RowVector& v, const Matrix& P) {
  return scale_prototypes_ex(v, P).alpha;
}

inline RowVector compute_residual(const RowVector& v, const Matrix& P, const Vector& alpha) {
  if (P.cols() != v.size() || P.rows() != alpha.size())
    throw DecompositionError("compute_residual: shape mismatch");
  return v - alpha.transpose() * P;
}

/// r_i = alpha_i R / sum_j alpha_j. Throws DegenerateCoefficients when the sum vanishes.
inline Matrix naive_distribute(const RowVector& R, const Vector& alpha) {
  const double sum = alpha.sum();
  if (sum == 0.0 || std::abs(sum) <= 1e-12 * alpha.cwiseAbs().sum()) throw DegenerateCoefficients();
  Matrix r(alpha.size(), R.size());
  for (Eigen::Index i = 0; i < alpha.size(); ++i) r.row(i) = (alpha[i] / sum) * R;
  return r;
}

inline Matrix uniform_distribute(const RowVector& R, std::size_t k) {
  Matrix r(static_cast<Eigen::Index>(k), R.size());
  for (Eigen::Index i = 0; i < r.rows(); ++i) r.row(i) = R / static_cast<double>(k);
  return r;
}

inline constexpr double kNormEpsilon = 1e-8;

/// Min-max normalization over the whole column: (h - min) / (max - min + 1e-8).
inline Vector spatial_norm(const Vector& h) {
  if (h.size() == 0) return h;
  const double lo = h.minCoeff();
  const double hi = h.maxCoeff();
  return (h.array() - lo) / (hi - lo + kNormEpsilon);
}

/// Evaluates sum_i |Norm(F p_i^T) - Norm(F r_i^T)|^2 for a full set of k parts.
class RefineObjective {
 public:
  RefineObjective(const Matrix& F, const Matrix& P, const RowVector& R) : F_(F), R_(R) {
    targets_ = F * P.transpose();
    for (Eigen::Index i = 0; i < targets_.cols(); ++i) targets_.col(i) = spatial_norm(targets_.col(i));
  }

  std::size_t k() const { return static_cast<std::size_t>(targets_.cols()); }

  double operator()(const Matrix& parts) const {
    const Eigen::MatrixXd act = F_ * parts.transpose();
    double total = 0;
    for (Eigen::Index i = 0; i < act.cols(); ++i)
      total += (targets_.col(i) - spatial_norm(act.col(i))).squaredNorm();
    return total;
  }

  /// Parts from the (k-1)*D free variables; the last part is R minus the others.
  Matrix expand(const Vector& free) const {
    const auto D = R_.size();
    const auto kk = static_cast<Eigen::Index>(k());
    Matrix parts(kk, D);
    RowVector acc = RowVector::Zero(D);
    for (Eigen::Index i = 0; i + 1 < kk; ++i) {
      parts.row(i) = free.segment(i * D, D).transpose();
      acc += parts.row(i);
    }
    parts.row(kk - 1) = R_ - acc;
    return parts;
  }

  Vector flatten_free(const Matrix& parts) const {
    const auto D = R_.size();
    Vector free((parts.rows() - 1) * D);
    for (Eigen::Index i = 0; i + 1 < parts.rows(); ++i) free.segment(i * D, D) = parts.row(i).transpose();
    return free;
  }

 private:
  const Matrix& F_;
  RowVector R_;
  Eigen::MatrixXd targets_;
};

struct RefineResult {
  Matrix r;
  std::vector<double> objective_trace;
  std::size_t iterations = 0;
  bool converged = false;
};

/// Minimizes the normalized-heatmap mismatch over r_1..r_{k-1}, with r_k = R - sum_{i<k} r_i,
/// starting from `init` (the naive split).
inline RefineResult refine_prototypes(const Matrix& F, const Matrix& P, const RowVector& R,
                                      const Matrix& init, const RefineConfig& cfg) {
  if (P.rows() == 0) throw DecompositionError("refine_prototypes: k = 0");
  if (P.cols() != F.cols() || R.size() != F.cols() || init.rows() != P.rows() ||
      init.cols() != F.cols())
    throw DecompositionError("refine_prototypes: shape mismatch");
  RefineObjective obj(F, P, R);
  RefineResult out;
  if (P.rows() == 1) {
    out.r = R;
    out.objective_trace.push_back(obj(out.r));
    out.converged = true;
    return out;
  }
  NelderMeadOptions opt;
  opt.xatol = cfg.tol;
  opt.fatol = cfg.tol;
  opt.max_iter = cfg.max_iter;
  opt.step_frac = cfg.simplex_step;
  const Vector x0 = obj.flatten_free(init);
  NelderMeadResult nm;
  try {
    nm = nelder_mead([&](const Vector& x) { return obj(obj.expand(x)); }, x0, opt);
  } catch (const NonFiniteObjective& e) {
    throw DecompositionError(std::string("refine_prototypes: ") + e.what());
  }
  out.r = (cfg.max_iter == 0) ? init : obj.expand(nm.x);
  out.objective_trace = std::move(nm.trace);
  out.iterations = nm.iterations;
  out.converged = nm.converged;
  return out;
}

/// Convenience overload that starts from the naive split.
inline RefineResult refine_prototypes(const Matrix& F, const Matrix& P, const Vector& alpha,
                                      const RowVector& R, const RefineConfig& cfg) {
  return refine_prototypes(F, P, R, naive_distribute(R, alpha), cfg);
}

inline double refine_objective(const Matrix& F, const Matrix& P, const RowVector& R, const Matrix& r) {
  return RefineObjective(F, P, R)(r);
}

/// p~_i = alpha_i p_i + r_i
inline Matrix assemble(const Matrix& P, const Vector& alpha, const Matrix& r) {
  if (P.rows() != alpha.size() || r.rows() != P.rows() || r.cols() != P.cols())
    throw DecompositionError("assemble: shape mismatch");
  return alpha.asDiagonal() * P + r;
}

inline ClassDecomposition decompose_class(const Matrix& F, const RowVector& v, std::size_t k,
                                          const NMFConfig& nmf_cfg, const RefineConfig& refine_cfg,
                                          RefineMode mode, int class_id = 0) {
  if (F.cols() != v.size())
    throw DecompositionError("decompose_class: feature D=" + std::to_string(F.cols()) +
                             " but head D=" + std::to_string(v.size()));
  if (!v.allFinite()) throw DecompositionError("decompose_class: non-finite head row");
  ClassDecomposition d;
  d.class_id = class_id;
  d.k = k;
  d.v = v;
  d.refinement_mode = mode;

  NMFConfig cfg = nmf_cfg;
  cfg.k = k;
  auto nmf = nmf_factorize(F, cfg);
  d.P = std::move(nmf.P);
  d.nmf_trace = std::move(nmf.error_trace);
  d.nmf_iterations = nmf.iterations_run;
  d.nmf_converged = nmf.converged;

  auto scaled = scale_prototypes_ex(v, d.P);
  d.alpha = std::move(scaled.alpha);
  d.min_norm_fallback = scaled.min_norm;
  d.R = compute_residual(v, d.P, d.alpha);

  Matrix init;
  try {
    init = naive_distribute(d.R, d.alpha);
  } catch (const DegenerateCoefficients&) {
    init = uniform_distribute(d.R, k);
    d.uniform_fallback = true;
  }

  if (mode == RefineMode::naive) {
    d.r = std::move(init);
    d.objective_trace.push_back(refine_objective(F, d.P, d.R, d.r));
  } else {
    auto refined = refine_prototypes(F, d.P, d.R, init, refine_cfg);
    d.r = std::move(refined.r);
    d.objective_trace = std::move(refined.objective_trace);
    d.refine_iterations = refined.iterations;
  }
  d.p_tilde = assemble(d.P, d.alpha, d.r);
  return d;
}

inline ClassDecomposition decompose_class(const FeatureStack& fs, const RowVector& v, std::size_t k,
                                          const NMFConfig& nmf_cfg, const RefineConfig& refine_cfg,
                                          RefineMode mode) {
  return decompose_class(fs.data, v, k, nmf_cfg, refine_cfg, mode, fs.class_id);
}

struct ClassFailure {
  int class_id = 0;
  std::string message;
};

struct HeadDecomposition {
  std::vector<ClassDecomposition> classes;  // ordered as in the manifest
  std::vector<ClassFailure> failures;
};

struct DecomposeOptions {
  std::size_t k = 3;
  NMFConfig nmf;
  RefineConfig refine;
  RefineMode mode = RefineMode::dynamic;
  bool clamp = true;
  unsigned threads = 0;  // 0: hardware concurrency
};

/// Decomposes every manifest class against head row `class_id`. Classes are independent;
/// a failing class is recorded and the others proceed.
inline HeadDecomposition decompose_head(const DatasetManifest& manifest, const ClassHead& head,
                                        const DecomposeOptions& opt) {
  const std::size_t C = manifest.classes.size();
  std::vector<std::optional<ClassDecomposition>> done(C);
  std::vector<std::optional<std::string>> errors(C);
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (std::size_t i = next++; i < C; i = next++) {
      const auto& entry = manifest.classes[i];
      try {
        if (static_cast<std::size_t>(entry.class_id) >= head.C())
          throw DataError(DataErrc::unknown_class, "class_id " + std::to_string(entry.class_id) +
                                                       " has no head row (C=" +
                                                       std::to_string(head.C()) + ")");
        const auto fs = load_feature_stack(manifest, entry.class_id, opt.clamp);
        done[i] = decompose_class(fs, head.rows.row(entry.class_id), opt.k, opt.nmf, opt.refine,
                                  opt.mode);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };

  unsigned threads = opt.threads ? opt.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(C, 1)));
  {
    std::vector<std::jthread> pool;
    for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
  }

  HeadDecomposition out;
  for (std::size_t i = 0; i < C; ++i) {
    if (done[i])
      out.classes.push_back(std::move(*done[i]));
    else
      out.failures.push_back({manifest.classes[i].class_id, errors[i].value_or("unknown error")});
  }
  return out;
}

}  // namespace pppn
