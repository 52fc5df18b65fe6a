#pragma once

// Interpretability scores over a decomposition, computed from keypoint annotations.
//
// For every (image, prototype) the heatmap is upsampled to the image size and
// thresholded at threshold_frac * max; a part is present when one of its
// visible keypoints falls inside that region. Images where the region is empty
// are left out of the prototype's denominator.
//   consistent: one part is present in >= tau_share of the evaluated images
//   stable:     clean and perturbed part sets agree on >= tau_match of the images

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "pppn/dataset.hpp"
#include "pppn/decomposition.hpp"
#include "pppn/explain.hpp"

namespace pppn {

enum class MetricErrc { bad_config, empty_map, size_mismatch, no_data, missing_perturbed };

class MetricError : public std::runtime_error {
 public:
  MetricError(MetricErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  MetricErrc code() const noexcept { return code_; }

 private:
  MetricErrc code_;
};

struct MetricConfig {
  double threshold_frac = 0.5;
  double tau_share = 0.8;
  double tau_match = 0.8;
};

struct RegionMask {
  std::size_t rows = 0, cols = 0;
  std::vector<bool> inside;

  bool operator()(std::size_t r, std::size_t c) const { return inside[r * cols + c]; }
  bool empty() const { return std::none_of(inside.begin(), inside.end(), [](bool b) { return b; }); }
};

/// mask[j] = value[j] >= threshold_frac * max(value). A map with no positive value has
/// an empty region.
inline RegionMask activation_region(const Grid& map, double threshold_frac) {
  if (!(threshold_frac > 0 && threshold_frac < 1))
    throw MetricError(MetricErrc::bad_config, "threshold_frac must lie in (0, 1)");
  if (map.values.empty()) throw MetricError(MetricErrc::empty_map, "activation_region: empty map");
  RegionMask m{map.rows, map.cols, std::vector<bool>(map.values.size(), false)};
  const double hi = *std::max_element(map.values.begin(), map.values.end());
  if (!(hi > 0)) return m;
  const double cut = threshold_frac * hi;
  for (std::size_t j = 0; j < map.values.size(); ++j) m.inside[j] = map.values[j] >= cut;
  return m;
}

struct PartPresence {
  std::string image_id;
  std::size_t prototype_index = 0;
  std::set<int> present_parts;
};

/// Pixel holding coordinate x in an image of `extent` pixels; x == extent maps to the last pixel.
inline std::size_t pixel_index(double x, int extent) {
  const auto i = static_cast<std::size_t>(std::floor(std::max(0.0, x)));
  return std::min(i, static_cast<std::size_t>(extent - 1));
}

inline PartPresence part_presence(const RegionMask& mask, const KeypointAnnotation& ann,
                                  std::size_t prototype_index = 0) {
  if (mask.rows != static_cast<std::size_t>(ann.image_height) ||
      mask.cols != static_cast<std::size_t>(ann.image_width))
    throw MetricError(MetricErrc::size_mismatch,
                      "part_presence: mask " + std::to_string(mask.cols) + "x" +
                          std::to_string(mask.rows) + " vs image " + std::to_string(ann.image_width) +
                          "x" + std::to_string(ann.image_height));
  PartPresence out{ann.image_id, prototype_index, {}};
  for (const auto& kp : ann.keypoints) {
    if (!kp.visible) continue;
    if (mask(pixel_index(kp.y, ann.image_height), pixel_index(kp.x, ann.image_width)))
      out.present_parts.insert(kp.part_id);
  }
  return out;
}

/// Part presence for one prototype on one image, or nullopt when the region is empty.
inline std::optional<std::set<int>> presence_for(const FeatureMap& x, const RowVector& prototype,
                                                 const KeypointAnnotation& ann, double threshold_frac) {
  const auto h = heatmap(x, prototype);
  const auto up = upsample_bilinear(h.grid(), static_cast<std::size_t>(ann.image_height),
                                    static_cast<std::size_t>(ann.image_width));
  const auto region = activation_region(up, threshold_frac);
  if (region.empty()) return std::nullopt;
  return part_presence(region, ann).present_parts;
}

using AnnotationIndex = std::unordered_map<std::string, KeypointAnnotation>;

inline AnnotationIndex index_annotations(const std::vector<KeypointAnnotation>& anns) {
  AnnotationIndex idx;
  for (const auto& a : anns) idx.emplace(a.image_id, a);
  return idx;
}

namespace detail {
inline bool meets_share(std::size_t count, std::size_t total, double tau) {
  return total > 0 && static_cast<double>(count) >= tau * static_cast<double>(total) * (1 - 1e-12);
}
}  // namespace detail

struct PrototypeVerdict {
  int class_id = 0;
  std::size_t prototype_index = 0;
  std::size_t evaluated_images = 0;  // annotated images with a non-empty region
  std::optional<int> dominant_part;
  double share = 0;  // fraction of evaluated images containing the dominant part
  bool consistent = false;
  std::optional<std::size_t> stability_images;
  std::optional<double> match_fraction;
  std::optional<bool> stable;
};

struct ClassScores {
  int class_id = 0;
  double consistency = 0;
  std::optional<double> stability;
};

/// Consistency verdicts for every prototype of one class.
inline std::vector<PrototypeVerdict> consistency_verdicts(const ClassDecomposition& d,
                                                          const FeatureStack& stack,
                                                          const AnnotationIndex& anns,
                                                          const MetricConfig& cfg) {
  std::vector<std::size_t> annotated;
  for (std::size_t i = 0; i < stack.n; ++i)
    if (anns.count(stack.image_ids[i])) annotated.push_back(i);
  if (annotated.empty())
    throw MetricError(MetricErrc::no_data,
                      "class " + std::to_string(d.class_id) + ": no annotated images");

  std::vector<PrototypeVerdict> out;
  for (Eigen::Index p = 0; p < d.p_tilde.rows(); ++p) {
    PrototypeVerdict v;
    v.class_id = d.class_id;
    v.prototype_index = static_cast<std::size_t>(p);
    std::map<int, std::size_t> counts;
    for (auto i : annotated) {
      const auto parts =
          presence_for(feature_map(stack, i), d.p_tilde.row(p), anns.at(stack.image_ids[i]), cfg.threshold_frac);
      if (!parts) continue;
      ++v.evaluated_images;
      for (int part : *parts) ++counts[part];
    }
    std::size_t best = 0;
    for (const auto& [part, n] : counts)
      if (n > best) {
        best = n;
        v.dominant_part = part;
      }
    if (v.evaluated_images > 0) v.share = static_cast<double>(best) / static_cast<double>(v.evaluated_images);
    v.consistent = detail::meets_share(best, v.evaluated_images, cfg.tau_share);
    out.push_back(v);
  }
  return out;
}

/// Adds stability fields to the verdicts of one class.
inline void stability_verdicts(const ClassDecomposition& d, const FeatureStack& clean,
                               const FeatureStack& perturbed, const AnnotationIndex& anns,
                               const MetricConfig& cfg, std::vector<PrototypeVerdict>& verdicts) {
  if (perturbed.n != clean.n || perturbed.H != clean.H || perturbed.W != clean.W ||
      perturbed.D != clean.D)
    throw MetricError(MetricErrc::size_mismatch,
                      "class " + std::to_string(d.class_id) + ": perturbed stack shape differs from clean");
  for (auto& v : verdicts) {
    const auto proto = d.p_tilde.row(static_cast<Eigen::Index>(v.prototype_index));
    std::size_t evaluated = 0, matched = 0;
    for (std::size_t i = 0; i < clean.n; ++i) {
      const auto it = anns.find(clean.image_ids[i]);
      if (it == anns.end()) continue;
      const auto a = presence_for(feature_map(clean, i), proto, it->second, cfg.threshold_frac);
      if (!a) continue;
      ++evaluated;
      const auto b = presence_for(feature_map(perturbed, i), proto, it->second, cfg.threshold_frac);
      if (b && *a == *b) ++matched;
    }
    v.stability_images = evaluated;
    v.match_fraction = evaluated ? static_cast<double>(matched) / static_cast<double>(evaluated) : 0.0;
    v.stable = detail::meets_share(matched, evaluated, cfg.tau_match);
  }
}

inline double percent_of(const std::vector<PrototypeVerdict>& v, bool PrototypeVerdict::*flag) {
  if (v.empty()) return 0;
  std::size_t n = 0;
  for (const auto& x : v) n += (x.*flag) ? 1 : 0;
  return 100.0 * static_cast<double>(n) / static_cast<double>(v.size());
}

/// Percentage of prototypes of one class that are consistent.
inline double consistency_score(const ClassDecomposition& d, const FeatureStack& stack,
                                const std::vector<KeypointAnnotation>& anns, const MetricConfig& cfg = {}) {
  return percent_of(consistency_verdicts(d, stack, index_annotations(anns), cfg), &PrototypeVerdict::consistent);
}

/// Percentage of prototypes of one class that are stable.
inline double stability_score(const ClassDecomposition& d, const FeatureStack& clean,
                              const std::optional<FeatureStack>& perturbed,
                              const std::vector<KeypointAnnotation>& anns, const MetricConfig& cfg = {}) {
  if (!perturbed)
    throw MetricError(MetricErrc::missing_perturbed,
                      "class " + std::to_string(d.class_id) + ": no perturbed feature stack");
  std::vector<PrototypeVerdict> verdicts;
  for (Eigen::Index p = 0; p < d.p_tilde.rows(); ++p) {
    PrototypeVerdict v;
    v.class_id = d.class_id;
    v.prototype_index = static_cast<std::size_t>(p);
    verdicts.push_back(v);
  }
  stability_verdicts(d, clean, *perturbed, index_annotations(anns), cfg, verdicts);
  std::size_t n = 0;
  for (const auto& v : verdicts) n += *v.stable ? 1 : 0;
  return verdicts.empty() ? 0.0 : 100.0 * static_cast<double>(n) / static_cast<double>(verdicts.size());
}

struct MetricReport {
  MetricConfig config;
  std::vector<ClassScores> per_class;
  double consistency = 0;  // mean over classes
  std::optional<double> stability;
  std::vector<PrototypeVerdict> verdicts;
  std::vector<ClassFailure> skipped;  // classes with no data
};

struct ClassMetricInput {
  const ClassDecomposition* decomposition = nullptr;
  const FeatureStack* clean = nullptr;
  const FeatureStack* perturbed = nullptr;  // optional
  const std::vector<KeypointAnnotation>* annotations = nullptr;
};

/// Scores every class. Stability is reported only when every scored class has a perturbed stack.
inline MetricReport evaluate_metrics(const std::vector<ClassMetricInput>& inputs, const MetricConfig& cfg) {
  MetricReport rep;
  rep.config = cfg;
  bool all_perturbed = true;
  for (const auto& in : inputs) all_perturbed = all_perturbed && in.perturbed != nullptr;
  double con_sum = 0, sta_sum = 0;
  for (const auto& in : inputs) {
    const auto idx = index_annotations(*in.annotations);
    std::vector<PrototypeVerdict> v;
    try {
      v = consistency_verdicts(*in.decomposition, *in.clean, idx, cfg);
    } catch (const MetricError& e) {
      if (e.code() != MetricErrc::no_data) throw;
      rep.skipped.push_back({in.decomposition->class_id, e.what()});
      continue;
    }
    ClassScores s;
    s.class_id = in.decomposition->class_id;
    s.consistency = percent_of(v, &PrototypeVerdict::consistent);
    if (all_perturbed) {
      stability_verdicts(*in.decomposition, *in.clean, *in.perturbed, idx, cfg, v);
      std::size_t n = 0;
      for (const auto& x : v) n += *x.stable ? 1 : 0;
      s.stability = v.empty() ? 0.0 : 100.0 * static_cast<double>(n) / static_cast<double>(v.size());
      sta_sum += *s.stability;
    }
    con_sum += s.consistency;
    rep.per_class.push_back(s);
    rep.verdicts.insert(rep.verdicts.end(), v.begin(), v.end());
  }
  if (rep.per_class.empty()) throw MetricError(MetricErrc::no_data, "no class has annotated images");
  const auto nc = static_cast<double>(rep.per_class.size());
  rep.consistency = con_sum / nc;
  if (all_perturbed) rep.stability = sta_sum / nc;
  return rep;
}

/// Loads stacks and keypoints from the manifest for every decomposed class.
inline MetricReport evaluate_metrics(const std::vector<ClassDecomposition>& decomps,
                                     const DatasetManifest& manifest, const MetricConfig& cfg,
                                     bool clamp = true) {
  std::vector<FeatureStack> clean, perturbed;
  std::vector<std::vector<KeypointAnnotation>> anns;
  std::vector<const ClassDecomposition*> used;
  std::vector<ClassFailure> skipped;
  clean.reserve(decomps.size());
  perturbed.reserve(decomps.size());
  anns.reserve(decomps.size());
  bool all_perturbed = true;
  for (const auto& d : decomps) {
    const auto& e = manifest.entry(d.class_id);
    if (!e.keypoint_file) {
      skipped.push_back({d.class_id, "no keypoint_file"});
      continue;
    }
    used.push_back(&d);
    clean.push_back(load_feature_stack(manifest, d.class_id, clamp));
    anns.push_back(load_keypoints(manifest, d.class_id));
    if (e.perturbed_feature_file)
      perturbed.push_back(load_perturbed_stack(manifest, d.class_id, clamp));
    else
      all_perturbed = false;
  }
  std::vector<ClassMetricInput> inputs;
  for (std::size_t i = 0; i < used.size(); ++i)
    inputs.push_back({used[i], &clean[i], all_perturbed ? &perturbed[i] : nullptr, &anns[i]});
  auto rep = evaluate_metrics(inputs, cfg);
  rep.skipped.insert(rep.skipped.begin(), skipped.begin(), skipped.end());
  return rep;
}

inline nlohmann::json to_json(const MetricReport& r) {
  using nlohmann::json;
  json per_class = json::array();
  for (const auto& c : r.per_class)
    per_class.push_back({{"class_id", c.class_id},
                         {"consistency", c.consistency},
                         {"stability", c.stability ? json(*c.stability) : json(nullptr)}});
  json verdicts = json::array();
  for (const auto& v : r.verdicts) {
    json o = {{"class_id", v.class_id},
              {"prototype_index", v.prototype_index},
              {"evaluated_images", v.evaluated_images},
              {"dominant_part", v.dominant_part ? json(*v.dominant_part) : json(nullptr)},
              {"share", v.share},
              {"consistent", v.consistent}};
    if (v.stable) {
      o["stability_images"] = *v.stability_images;
      o["match_fraction"] = *v.match_fraction;
      o["stable"] = *v.stable;
    }
    verdicts.push_back(std::move(o));
  }
  json skipped = json::array();
  for (const auto& s : r.skipped) skipped.push_back({{"class_id", s.class_id}, {"reason", s.message}});
  return {{"config",
           {{"threshold_frac", r.config.threshold_frac},
            {"tau_share", r.config.tau_share},
            {"tau_match", r.config.tau_match}}},
          {"consistency", r.consistency},
          {"stability", r.stability ? json(*r.stability) : json(nullptr)},
          {"per_class", per_class},
          {"prototypes", verdicts},
          {"skipped", skipped}};
}

/// One row per (class, prototype).
inline std::string to_csv(const MetricReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "class_id,prototype_index,evaluated_images,dominant_part,share,consistent,"
        "stability_images,match_fraction,stable\n";
  for (const auto& v : r.verdicts) {
    os << v.class_id << ',' << v.prototype_index << ',' << v.evaluated_images << ',';
    if (v.dominant_part) os << *v.dominant_part;
    os << ',' << v.share << ',' << (v.consistent ? 1 : 0) << ',';
    if (v.stable) os << *v.stability_images << ',' << *v.match_fraction << ',' << (*v.stable ? 1 : 0);
    else os << ",,";
    os << '\n';
  }
  return os.str();
}

}  // namespace pppn
