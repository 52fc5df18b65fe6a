#pragma once

// Derivative-free Nelder-Mead simplex minimizer (non-adaptive coefficients:
// reflection 1, expansion 2, contraction 0.5, shrink 0.5).

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "pppn/types.hpp"

namespace pppn {

struct NelderMeadOptions {
  double xatol = 1e-6;  // max |x_j - x_best| over the simplex
  double fatol = 1e-6;  // max |f_j - f_best| over the simplex
  std::size_t max_iter = 100;
  /// Initial simplex vertex j is x0 + step_frac * (1 + |x0_j|) * e_j.
  double step_frac = 0.05;
};

struct NelderMeadResult {
  Vector x;
  double fun = 0;
  std::size_t iterations = 0;
  std::size_t evaluations = 0;
  bool converged = false;
  /// trace[0] = f(x0); trace[t] = best value after iteration t.
  std::vector<double> trace;
};

class NonFiniteObjective : public std::runtime_error {
 public:
  NonFiniteObjective(std::size_t iteration)
      : std::runtime_error("non-finite objective at iteration " + std::to_string(iteration)),
        iteration_(iteration) {}
  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

template <typename Objective>
NelderMeadResult nelder_mead(Objective&& f, const Vector& x0, const NelderMeadOptions& opt = {}) {
  constexpr double rho = 1.0, chi = 2.0, psi = 0.5, sigma = 0.5;
  const Eigen::Index N = x0.size();

  NelderMeadResult res;
  std::size_t iter = 0;
  auto eval = [&](const Vector& x) {
    const double y = f(x);
    ++res.evaluations;
    if (!std::isfinite(y)) throw NonFiniteObjective(iter);
    return y;
  };

  const double f0 = eval(x0);
  res.trace.push_back(f0);
  if (N == 0 || opt.max_iter == 0) {
    res.x = x0;
    res.fun = f0;
    res.converged = N == 0;
    return res;
  }

  std::vector<Vector> sim(static_cast<std::size_t>(N) + 1, x0);
  std::vector<double> fsim(sim.size());
  fsim[0] = f0;
  for (Eigen::Index j = 0; j < N; ++j) {
    auto& v = sim[static_cast<std::size_t>(j) + 1];
    v[j] += opt.step_frac * (1.0 + std::abs(x0[j]));
    fsim[static_cast<std::size_t>(j) + 1] = eval(v);
  }

  std::vector<std::size_t> order(sim.size());
  auto sort_simplex = [&] {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return fsim[a] < fsim[b]; });
    std::vector<Vector> s2;
    std::vector<double> f2;
    s2.reserve(sim.size());
    f2.reserve(sim.size());
    for (auto i : order) {
      s2.push_back(std::move(sim[i]));
      f2.push_back(fsim[i]);
    }
    sim = std::move(s2);
    fsim = std::move(f2);
  };
  sort_simplex();

  const std::size_t last = sim.size() - 1;
  Vector xbar(N);
  while (iter < opt.max_iter) {
    double xspread = 0, fspread = 0;
    for (std::size_t j = 1; j <= last; ++j) {
      xspread = std::max(xspread, (sim[j] - sim[0]).cwiseAbs().maxCoeff());
      fspread = std::max(fspread, std::abs(fsim[j] - fsim[0]));
    }
    if (xspread <= opt.xatol && fspread <= opt.fatol) {
      res.converged = true;
      break;
    }
    ++iter;

    xbar.setZero();
    for (std::size_t j = 0; j < last; ++j) xbar += sim[j];
    xbar /= static_cast<double>(N);

    const Vector xr = (1 + rho) * xbar - rho * sim[last];
    const double fxr = eval(xr);
    bool shrink = false;
    if (fxr < fsim[0]) {
      Vector xe = (1 + rho * chi) * xbar - rho * chi * sim[last];
      const double fxe = eval(xe);
      if (fxe < fxr) {
        sim[last] = std::move(xe);
        fsim[last] = fxe;
      } else {
        sim[last] = xr;
        fsim[last] = fxr;
      }
    } else if (fxr < fsim[last - 1]) {
      sim[last] = xr;
      fsim[last] = fxr;
    } else if (fxr < fsim[last]) {
      Vector xc = (1 + psi * rho) * xbar - psi * rho * sim[last];
      const double fxc = eval(xc);
      if (fxc <= fxr) {
        sim[last] = std::move(xc);
        fsim[last] = fxc;
      } else {
        shrink = true;
      }
    } else {
      Vector xcc = (1 - psi) * xbar + psi * sim[last];
      const double fxcc = eval(xcc);
      if (fxcc < fsim[last]) {
        sim[last] = std::move(xcc);
        fsim[last] = fxcc;
      } else {
        shrink = true;
      }
    }
    if (shrink) {
      for (std::size_t j = 1; j <= last; ++j) {
        sim[j] = sim[0] + sigma * (sim[j] - sim[0]);
        fsim[j] = eval(sim[j]);
      }
    }
    sort_simplex();
    res.trace.push_back(fsim[0]);
  }

  res.iterations = iter;
  // The start point is a simplex vertex, so fsim[0] <= f0 always holds.
  res.x = sim[0];
  res.fun = fsim[0];
  return res;
}

}  // namespace pppn
