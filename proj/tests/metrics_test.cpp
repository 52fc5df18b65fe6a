#include <gtest/gtest.h>

#include "pppn/metrics.hpp"
#include "pppn/synthetic.hpp"
#include "test_util.hpp"

using namespace pppn;

namespace {

MetricErrc metric_error(auto&& fn) {
  try {
    fn();
  } catch (const MetricError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no MetricError thrown";
  return MetricErrc::bad_config;
}

ClassDecomposition with_prototypes(int class_id, const Matrix& p) {
  ClassDecomposition d;
  d.class_id = class_id;
  d.k = static_cast<std::size_t>(p.rows());
  d.p_tilde = p;
  return d;
}

SyntheticDataset small_planted(double perturb_sigma = 0.0) {
  SyntheticSpec s;
  s.classes = 2;
  s.images = 12;
  s.H = s.W = 5;
  s.D = 24;
  s.parts = 3;
  s.perturb_sigma = perturb_sigma;
  s.seed = 3;
  return make_synthetic(s);
}

// Counts consistent prototypes with explicit loops over pixels and keypoints.
double recount_consistency(const Matrix& protos, const FeatureStack& fs,
                           const std::vector<KeypointAnnotation>& anns, const MetricConfig& cfg) {
  std::size_t consistent = 0;
  for (Eigen::Index p = 0; p < protos.rows(); ++p) {
    std::map<int, std::size_t> hits;
    std::size_t evaluated = 0;
    for (std::size_t i = 0; i < fs.n; ++i) {
      const auto& ann = anns[i];
      Grid h{fs.H, fs.W, std::vector<double>(fs.H * fs.W)};
      for (std::size_t j = 0; j < fs.H * fs.W; ++j) {
        double dot = 0;
        for (std::size_t d = 0; d < fs.D; ++d)
          dot += fs.data(Eigen::Index(i * fs.H * fs.W + j), Eigen::Index(d)) * protos(p, Eigen::Index(d));
        h.values[j] = dot;
      }
      const auto up = upsample_bilinear(h, std::size_t(ann.image_height), std::size_t(ann.image_width));
      double mx = up.values[0];
      for (double v : up.values) mx = std::max(mx, v);
      if (mx <= 0) continue;
      bool any = false;
      for (double v : up.values) any = any || v >= cfg.threshold_frac * mx;
      if (!any) continue;
      ++evaluated;
      std::set<int> seen;
      for (const auto& kp : ann.keypoints) {
        if (!kp.visible) continue;
        const auto r = std::min<std::size_t>(std::size_t(kp.y), std::size_t(ann.image_height - 1));
        const auto c = std::min<std::size_t>(std::size_t(kp.x), std::size_t(ann.image_width - 1));
        if (up(r, c) >= cfg.threshold_frac * mx) seen.insert(kp.part_id);
      }
      for (int s : seen) ++hits[s];
    }
    std::size_t best = 0;
    for (const auto& [part, n] : hits) best = std::max(best, n);
    if (evaluated > 0 && double(best) >= cfg.tau_share * double(evaluated) - 1e-9) ++consistent;
  }
  return 100.0 * double(consistent) / double(protos.rows());
}

}  // namespace

TEST(ActivationRegion, Examples) {
  const Grid g{1, 4, {0, 1, 2, 4}};
  const auto m = activation_region(g, 0.5);
  EXPECT_EQ(m.inside, (std::vector<bool>{false, false, true, true}));

  const Grid flat{2, 2, {3, 3, 3, 3}};
  EXPECT_EQ(activation_region(flat, 0.5).inside, std::vector<bool>(4, true));

  const Grid neg{1, 3, {-3, -1, -2}};
  EXPECT_TRUE(activation_region(neg, 0.5).empty());
  EXPECT_TRUE(activation_region(Grid{1, 2, {0, 0}}, 0.5).empty());

  EXPECT_EQ(metric_error([&] { (void)activation_region(g, 0.0); }), MetricErrc::bad_config);
  EXPECT_EQ(metric_error([&] { (void)activation_region(g, 1.0); }), MetricErrc::bad_config);
  EXPECT_EQ(metric_error([&] { (void)activation_region(Grid{}, 0.5); }), MetricErrc::empty_map);
}

TEST(ActivationRegion, InvariantUnderPositiveRescaling) {
  std::mt19937_64 g(1);
  std::uniform_real_distribution<> u(-1, 2);
  for (int t = 0; t < 50; ++t) {
    Grid a{4, 5, {}};
    for (int i = 0; i < 20; ++i) a.values.push_back(u(g));
    Grid b = a;
    const double s = std::ldexp(1.0, int(g() % 20) - 10);  // exact power of two
    for (auto& v : b.values) v *= s;
    EXPECT_EQ(activation_region(a, 0.5).inside, activation_region(b, 0.5).inside);
  }
}

TEST(ActivationRegion, ShrinksAsThresholdRises) {
  std::mt19937_64 g(2);
  std::uniform_real_distribution<> u(0, 1);
  Grid a{6, 6, {}};
  for (int i = 0; i < 36; ++i) a.values.push_back(u(g));
  std::size_t prev = 37;
  for (double f : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    const auto m = activation_region(a, f);
    const auto n = std::size_t(std::count(m.inside.begin(), m.inside.end(), true));
    EXPECT_LE(n, prev);
    prev = n;
  }
}

TEST(PartPresence, VisibleKeypointsInsideRegion) {
  RegionMask m{2, 3, {false, true, false, false, false, true}};
  KeypointAnnotation ann{"i", 3, 2,
                         {{0, 1.5, 0.2, true}, {1, 2.9, 1.9, false}, {2, 0.0, 0.0, true}, {3, 3.0, 2.0, true}}};
  const auto p = part_presence(m, ann, 4);
  EXPECT_EQ(p.present_parts, (std::set<int>{0, 3}));  // x == width lands on the last pixel
  EXPECT_EQ(p.prototype_index, 4u);
  KeypointAnnotation wrong{"i", 4, 2, {}};
  EXPECT_EQ(metric_error([&] { (void)part_presence(m, wrong); }), MetricErrc::size_mismatch);
}

TEST(Consistency, PlantedSignaturesAreConsistentAndMatchRecount) {
  const auto ds = small_planted();
  const MetricConfig cfg;
  for (const auto& sc : ds.classes) {
    const auto d = with_prototypes(sc.class_id, sc.signatures);
    const auto idx = index_annotations(sc.annotations);
    const auto v = consistency_verdicts(d, sc.clean, idx, cfg);
    ASSERT_EQ(v.size(), 3u);
    for (std::size_t p = 0; p < 3; ++p) {
      EXPECT_TRUE(v[p].consistent);
      EXPECT_EQ(v[p].dominant_part, int(p));
      EXPECT_EQ(v[p].evaluated_images, sc.clean.n);
    }
    EXPECT_DOUBLE_EQ(consistency_score(d, sc.clean, sc.annotations, cfg), 100.0);
    EXPECT_DOUBLE_EQ(recount_consistency(sc.signatures, sc.clean, sc.annotations, cfg), 100.0);
  }
}

TEST(Consistency, MixedPrototypesMatchRecount) {
  const auto ds = small_planted();
  std::mt19937_64 g(4);
  const MetricConfig cfg;
  for (const auto& sc : ds.classes) {
    // Random non-negative mixtures of the signatures light up several parts at once.
    const Matrix mix = testutil::random_matrix(g, 4, 3, 0.0, 1.0);
    const Matrix protos = mix * sc.signatures;
    const auto d = with_prototypes(sc.class_id, protos);
    EXPECT_DOUBLE_EQ(consistency_score(d, sc.clean, sc.annotations, cfg),
                     recount_consistency(protos, sc.clean, sc.annotations, cfg));
  }
}

TEST(Consistency, ScoreInvariantUnderPrototypeRescaling) {
  const auto ds = small_planted();
  const auto& sc = ds.classes[0];
  std::mt19937_64 g(5);
  const Matrix protos = testutil::random_matrix(g, 3, 3, 0.0, 1.0) * sc.signatures;
  const auto a = consistency_score(with_prototypes(0, protos), sc.clean, sc.annotations);
  const auto b = consistency_score(with_prototypes(0, 4.0 * protos), sc.clean, sc.annotations);
  EXPECT_EQ(a, b);
}

TEST(Consistency, ScoreDoesNotRiseWithStricterShare) {
  const auto ds = small_planted();
  const auto& sc = ds.classes[1];
  std::mt19937_64 g(6);
  const auto d = with_prototypes(1, testutil::random_matrix(g, 5, 3, 0.0, 1.0) * sc.signatures);
  double prev = 101;
  for (double tau : {0.2, 0.4, 0.6, 0.8, 1.0}) {
    MetricConfig cfg;
    cfg.tau_share = tau;
    const double s = consistency_score(d, sc.clean, sc.annotations, cfg);
    EXPECT_LE(s, prev);
    prev = s;
  }
}

TEST(Consistency, EmptyRegionsAreLeftOut) {
  const auto ds = small_planted();
  const auto& sc = ds.classes[0];
  Matrix protos = sc.signatures;
  protos.row(1) *= -1;  // heatmap negative everywhere
  const auto v = consistency_verdicts(with_prototypes(0, protos), sc.clean, index_annotations(sc.annotations), {});
  EXPECT_EQ(v[1].evaluated_images, 0u);
  EXPECT_FALSE(v[1].consistent);
  EXPECT_FALSE(v[1].dominant_part.has_value());
  EXPECT_TRUE(v[0].consistent);
}

TEST(Consistency, NoAnnotatedImagesIsAnError) {
  const auto ds = small_planted();
  const auto& sc = ds.classes[0];
  EXPECT_EQ(metric_error([&] { (void)consistency_score(with_prototypes(0, sc.signatures), sc.clean, {}); }),
            MetricErrc::no_data);
}

TEST(Stability, IdenticalCopyIsFullyStable) {
  const auto ds = small_planted();
  for (const auto& sc : ds.classes)
    EXPECT_DOUBLE_EQ(stability_score(with_prototypes(sc.class_id, sc.signatures), sc.clean, sc.perturbed,
                                     sc.annotations),
                     100.0);
}

TEST(Stability, ScrambledCopyIsUnstable) {
  const auto ds = small_planted();
  const auto& sc = ds.classes[0];
  // Perturbed image i is clean image i+1: parts sit in different cells.
  FeatureStack shifted = sc.clean;
  const auto HW = Eigen::Index(sc.clean.H * sc.clean.W);
  for (std::size_t i = 0; i < sc.clean.n; ++i)
    shifted.data.middleRows(Eigen::Index(i) * HW, HW) =
        sc.clean.data.middleRows(Eigen::Index((i + 1) % sc.clean.n) * HW, HW);
  const auto s = stability_score(with_prototypes(0, sc.signatures), sc.clean, shifted, sc.annotations);
  EXPECT_LT(s, 100.0);
}

TEST(Stability, MissingPerturbedAndShapeMismatch) {
  const auto ds = small_planted();
  const auto& sc = ds.classes[0];
  const auto d = with_prototypes(0, sc.signatures);
  EXPECT_EQ(metric_error([&] { (void)stability_score(d, sc.clean, std::nullopt, sc.annotations); }),
            MetricErrc::missing_perturbed);
  FeatureStack fewer = sc.perturbed;
  fewer.n -= 1;
  EXPECT_EQ(metric_error([&] { (void)stability_score(d, sc.clean, fewer, sc.annotations); }),
            MetricErrc::size_mismatch);
}

TEST(Report, AggregatesMeanOverClassesAndSkipsUnannotated) {
  const auto ds = small_planted();
  const auto d0 = with_prototypes(0, ds.classes[0].signatures);
  Matrix half = ds.classes[1].signatures;
  half.row(0) *= -1;
  const auto d1 = with_prototypes(1, half);
  const std::vector<KeypointAnnotation> none;
  const auto rep = evaluate_metrics({{&d0, &ds.classes[0].clean, &ds.classes[0].perturbed, &ds.classes[0].annotations},
                                     {&d1, &ds.classes[1].clean, &ds.classes[1].perturbed, &ds.classes[1].annotations}},
                                    {});
  ASSERT_EQ(rep.per_class.size(), 2u);
  EXPECT_DOUBLE_EQ(rep.per_class[0].consistency, 100.0);
  EXPECT_NEAR(rep.per_class[1].consistency, 200.0 / 3, 1e-12);
  EXPECT_NEAR(rep.consistency, (100.0 + 200.0 / 3) / 2, 1e-12);
  ASSERT_TRUE(rep.stability.has_value());

  const auto partial = evaluate_metrics({{&d0, &ds.classes[0].clean, nullptr, &ds.classes[0].annotations},
                                         {&d1, &ds.classes[1].clean, nullptr, &none}},
                                        {});
  EXPECT_EQ(partial.per_class.size(), 1u);
  EXPECT_EQ(partial.skipped.size(), 1u);
  EXPECT_FALSE(partial.stability.has_value());

  const auto j = to_json(rep);
  EXPECT_EQ(j["prototypes"].size(), 6u);
  const auto csv = to_csv(rep);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);

  EXPECT_EQ(metric_error([&] { (void)evaluate_metrics({{&d1, &ds.classes[1].clean, nullptr, &none}}, {}); }),
            MetricErrc::no_data);
}
