#include <random>

#include <gtest/gtest.h>

#include "pppn/nmf.hpp"
#include "test_util.hpp"

using namespace pppn;

TEST(Nmf, RankOnePlantedReachesExactFactorization) {
  std::mt19937_64 g(3);
  const Matrix e = testutil::random_matrix(g, 20, 1, 0.1, 1.0);
  const Matrix p = testutil::random_matrix(g, 1, 8, 0.1, 1.0);
  const Matrix F = e * p;  // oracle: the planted outer product
  NMFConfig cfg;
  cfg.k = 1;
  cfg.seed = 5;
  const auto res = nmf_factorize(F, cfg);
  const double rel = (F - res.E * res.P).norm() / F.norm();
  EXPECT_LE(rel, 1e-6);
}

TEST(Nmf, ZeroMatrixConvergesImmediately) {
  const Matrix F = Matrix::Zero(6, 4);
  NMFConfig cfg;
  cfg.k = 2;
  const auto res = nmf_factorize(F, cfg);
  ASSERT_EQ(res.error_trace.size(), 1u);
  EXPECT_EQ(res.error_trace[0], 0.0);
  EXPECT_TRUE(res.converged);
  EXPECT_EQ(res.iterations_run, 0u);
}

TEST(Nmf, DeterministicAndMonotone) {
  std::mt19937_64 g(11);
  const Matrix F = testutil::random_matrix(g, 20, 8, 0.0, 1.0);
  NMFConfig cfg;
  cfg.k = 3;
  cfg.seed = 99;
  const auto a = nmf_factorize(F, cfg);
  const auto b = nmf_factorize(F, cfg);
  EXPECT_EQ(a.error_trace, b.error_trace);
  EXPECT_EQ(a.E, b.E);
  EXPECT_EQ(a.P, b.P);
  for (std::size_t t = 1; t < a.error_trace.size(); ++t)
    EXPECT_LE(a.error_trace[t], a.error_trace[t - 1] * (1 + 1e-12)) << "t=" << t;
  EXPECT_GE(a.E.minCoeff(), 0.0);
  EXPECT_GE(a.P.minCoeff(), 0.0);
}

TEST(Nmf, DifferentSeedsDiffer) {
  std::mt19937_64 g(11);
  const Matrix F = testutil::random_matrix(g, 10, 6, 0.0, 1.0);
  NMFConfig a, b;
  a.k = b.k = 2;
  a.seed = 1;
  b.seed = 2;
  EXPECT_NE(nmf_factorize(F, a).error_trace[0], nmf_factorize(F, b).error_trace[0]);
}

TEST(Nmf, StoppingRuleFiresAtFirstQualifyingIteration) {
  std::mt19937_64 g(17);
  const Matrix F = testutil::random_matrix(g, 30, 12, 0.0, 1.0);
  NMFConfig cfg;
  cfg.k = 4;
  cfg.seed = 3;
  const auto res = nmf_factorize(F, cfg);
  const auto& tr = res.error_trace;
  ASSERT_EQ(tr.size(), res.iterations_run + 1);
  // No earlier iteration met the rule; the last one did (or hit the cap).
  for (std::size_t t = 1; t < res.iterations_run; ++t) EXPECT_GE((tr[t - 1] - tr[t]) / tr[0], cfg.rel_tol);
  if (res.converged)
    EXPECT_LT((tr[res.iterations_run - 1] - tr[res.iterations_run]) / tr[0], cfg.rel_tol);
  else
    EXPECT_EQ(res.iterations_run, cfg.max_iter);
}

TEST(Nmf, IterationCapIsRespected) {
  std::mt19937_64 g(17);
  const Matrix F = testutil::random_matrix(g, 30, 12, 0.0, 1.0);
  NMFConfig cfg;
  cfg.k = 4;
  cfg.max_iter = 5;
  cfg.rel_tol = 1e-300;
  const auto res = nmf_factorize(F, cfg);
  EXPECT_EQ(res.iterations_run, 5u);
  EXPECT_FALSE(res.converged);

  cfg.max_iter = 0;
  const auto none = nmf_factorize(F, cfg);
  EXPECT_EQ(none.iterations_run, 0u);
  EXPECT_EQ(none.error_trace.size(), 1u);
}

TEST(Nmf, FullRankCapacityReachesLowError) {
  std::mt19937_64 g(23);
  const Matrix F = testutil::random_matrix(g, 12, 4, 0.0, 1.0);
  NMFConfig cfg;
  cfg.k = 4;  // min(rows, cols)
  cfg.rel_tol = 1e-12;
  cfg.max_iter = 5000;
  cfg.seed = 4;
  const auto res = nmf_factorize(F, cfg);
  NMFConfig low = cfg;
  low.k = 1;
  const auto rank1 = nmf_factorize(F, low);
  const double rel = (F - res.E * res.P).norm() / F.norm();
  EXPECT_LE(rel, 1e-2);
  EXPECT_LT(rel, 0.1 * (F - rank1.E * rank1.P).norm() / F.norm());
}

TEST(Nmf, RejectsBadInput) {
  const Matrix F = Matrix::Ones(4, 3);
  NMFConfig cfg;
  cfg.k = 0;
  EXPECT_THROW(nmf_factorize(F, cfg), NMFError);
  cfg.k = 4;
  EXPECT_THROW(nmf_factorize(F, cfg), NMFError);
  cfg.k = 1;
  Matrix bad = F;
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(nmf_factorize(bad, cfg), NMFError);
  bad(0, 0) = -1;
  EXPECT_THROW(nmf_factorize(bad, cfg), NMFError);
  cfg.rel_tol = 0;
  EXPECT_THROW(nmf_factorize(F, cfg), NMFError);
}

TEST(MultiplicativeUpdate, FixedPointIsStationary) {
  std::mt19937_64 g(8);
  const Matrix E = testutil::random_matrix(g, 6, 2, 0.5, 1.5);
  const Matrix P = testutil::random_matrix(g, 2, 4, 0.5, 1.5);
  const Matrix F = E * P;
  Matrix E2 = E, P2 = P;
  multiplicative_update(E2, P2, F);
  EXPECT_LE((E2 - E).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LE((P2 - P).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(MultiplicativeUpdate, GuardKeepsZeroDenominatorsFinite) {
  // A zero column in E makes the corresponding P row's denominator zero.
  Matrix E(3, 2);
  E << 1, 0, 2, 0, 3, 0;
  Matrix P = Matrix::Ones(2, 2);
  const Matrix F = Matrix::Ones(3, 2);
  multiplicative_update(E, P, F, 1e-12);
  EXPECT_TRUE(E.allFinite());
  EXPECT_TRUE(P.allFinite());
}

TEST(MultiplicativeUpdate, SingleStepDoesNotIncreaseObjective) {
  std::mt19937_64 g(31);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix F = testutil::random_matrix(g, 6, 4, 0.0, 1.0);
    Matrix E = testutil::random_matrix(g, 6, 2, 0.01, 1.0);
    Matrix P = testutil::random_matrix(g, 2, 4, 0.01, 1.0);
    const double before = (F - E * P).squaredNorm();  // direct evaluation
    multiplicative_update(E, P, F);
    const double after = (F - E * P).squaredNorm();
    EXPECT_LE(after, before * (1 + 1e-12));
    EXPECT_GE(E.minCoeff(), 0.0);
    EXPECT_GE(P.minCoeff(), 0.0);
  }
}

TEST(MultiplicativeUpdate, ShapeMismatchThrows) {
  Matrix E = Matrix::Ones(3, 2), P = Matrix::Ones(2, 4);
  const Matrix F = Matrix::Ones(3, 5);
  EXPECT_THROW(multiplicative_update(E, P, F), NMFError);
}
