#pragma once

// Synthetic datasets with planted parts, for demos and tests.
//
// Each class owns `parts` disjoint channel blocks (its part signatures). In every
// image each part lights up one distinct spatial cell with its signature; all
// other entries carry small uniform background noise. A keypoint is annotated
// at the image pixel nearest to the part's cell under corner-aligned upsampling.
// The head row of a class is a positive combination of its signatures plus an
// optional component outside their span.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pppn/dataset.hpp"
#include "pppn/nmf.hpp"
#include "pppn/tensor_io.hpp"

namespace pppn {

struct SyntheticSpec {
  std::size_t classes = 5;
  std::size_t images = 50;
  std::size_t H = 7, W = 7;
  std::size_t D = 64;
  std::size_t parts = 3;
  std::size_t cell_px = 8;        // image pixels per feature cell
  double background = 0.05;       // uniform background noise amplitude
  double off_span = 0.1;          // scale of the head component outside the signature span
  double perturb_sigma = 0.0;     // additive noise on the perturbed copy (0: identical copy)
  std::uint64_t seed = 7;
};

struct SyntheticClass {
  int class_id = 0;
  FeatureStack clean;
  FeatureStack perturbed;
  std::vector<KeypointAnnotation> annotations;
  Matrix signatures;   // parts x D, non-negative, disjoint supports
  Vector weights;      // head = weights^T signatures + off-span term
  std::vector<std::vector<std::size_t>> cells;  // [image][part] -> flat spatial index
};

struct SyntheticDataset {
  SyntheticSpec spec;
  std::vector<SyntheticClass> classes;
  ClassHead head;
  std::vector<PartName> part_vocabulary;

  std::size_t image_width() const { return spec.W * spec.cell_px; }
  std::size_t image_height() const { return spec.H * spec.cell_px; }
};

namespace detail {
inline double uniform(std::mt19937_64& g, double lo, double hi) {
  return lo + (hi - lo) * unit_open_closed(g);
}
inline double normal(std::mt19937_64& g) {
  const double u1 = unit_open_closed(g), u2 = unit_open_closed(g);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}
/// Pixel nearest to source cell `cell` under corner-aligned upsampling of n cells to px pixels.
inline std::size_t nearest_pixel(std::size_t cell, std::size_t n, std::size_t px) {
  if (n == 1 || px == 1) return 0;
  return static_cast<std::size_t>(std::lround(static_cast<double>(cell) * static_cast<double>(px - 1) /
                                              static_cast<double>(n - 1)));
}
}  // namespace detail

inline SyntheticDataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes * spec.parts > spec.D)
    throw std::invalid_argument("synthetic: need D >= classes * parts for disjoint part blocks");
  if (spec.parts > spec.H * spec.W) throw std::invalid_argument("synthetic: more parts than cells");
  std::mt19937_64 gen(spec.seed);
  SyntheticDataset ds;
  ds.spec = spec;
  for (std::size_t j = 0; j < spec.parts; ++j)
    ds.part_vocabulary.push_back({static_cast<int>(j), "part_" + std::to_string(j)});

  const std::size_t block = spec.D / (spec.classes * spec.parts);
  const std::size_t HW = spec.H * spec.W;
  const auto D = static_cast<Eigen::Index>(spec.D);
  const int img_w = static_cast<int>(spec.W * spec.cell_px);
  const int img_h = static_cast<int>(spec.H * spec.cell_px);
  ds.head.rows.resize(static_cast<Eigen::Index>(spec.classes), D);

  for (std::size_t c = 0; c < spec.classes; ++c) {
    SyntheticClass sc;
    sc.class_id = static_cast<int>(c);
    sc.signatures = Matrix::Zero(static_cast<Eigen::Index>(spec.parts), D);
    for (std::size_t j = 0; j < spec.parts; ++j) {
      const std::size_t start = (c * spec.parts + j) * block;
      for (std::size_t d = start; d < start + block; ++d)
        sc.signatures(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(d)) = detail::uniform(gen, 0.5, 1.5);
    }
    sc.weights.resize(static_cast<Eigen::Index>(spec.parts));
    for (auto& w : sc.weights) w = detail::uniform(gen, 0.5, 2.0);

    RowVector v = sc.weights.transpose() * sc.signatures;
    RowVector extra(D);
    for (auto& e : extra) e = detail::normal(gen);
    // Remove the part of `extra` inside the signature span (blocks are disjoint, so per-row).
    for (Eigen::Index j = 0; j < sc.signatures.rows(); ++j) {
      const auto s = sc.signatures.row(j);
      extra -= (extra.dot(s) / s.squaredNorm()) * s;
    }
    if (extra.norm() > 0) v += spec.off_span * v.norm() / extra.norm() * extra;
    ds.head.rows.row(static_cast<Eigen::Index>(c)) = v;
    ds.head.class_labels.push_back("class_" + std::to_string(c));

    FeatureStack& fs = sc.clean;
    fs.class_id = sc.class_id;
    fs.n = spec.images;
    fs.H = spec.H;
    fs.W = spec.W;
    fs.D = spec.D;
    fs.data.resize(static_cast<Eigen::Index>(spec.images * HW), D);
    for (Eigen::Index i = 0; i < fs.data.size(); ++i) fs.data.data()[i] = detail::uniform(gen, 0.0, spec.background);

    for (std::size_t img = 0; img < spec.images; ++img) {
      const std::string id = "c" + std::to_string(c) + "_" + std::to_string(img);
      fs.image_ids.push_back(id);
      // Distinct cells by partial Fisher-Yates.
      std::vector<std::size_t> cells(HW);
      for (std::size_t q = 0; q < HW; ++q) cells[q] = q;
      for (std::size_t j = 0; j < spec.parts; ++j) {
        const auto offset = static_cast<std::size_t>(unit_open_closed(gen) * static_cast<double>(HW - j));
        std::swap(cells[j], cells[j + std::min(offset, HW - j - 1)]);
      }
      cells.resize(spec.parts);
      KeypointAnnotation ann{id, img_w, img_h, {}};
      for (std::size_t j = 0; j < spec.parts; ++j) {
        const double intensity = detail::uniform(gen, 0.8, 1.2);
        const auto row = static_cast<Eigen::Index>(img * HW + cells[j]);
        fs.data.row(row) += intensity * sc.signatures.row(static_cast<Eigen::Index>(j));
        const auto cy = cells[j] / spec.W, cx = cells[j] % spec.W;
        ann.keypoints.push_back({static_cast<int>(j),
                                 static_cast<double>(detail::nearest_pixel(cx, spec.W, static_cast<std::size_t>(img_w))) + 0.5,
                                 static_cast<double>(detail::nearest_pixel(cy, spec.H, static_cast<std::size_t>(img_h))) + 0.5,
                                 true});
      }
      sc.cells.push_back(std::move(cells));
      sc.annotations.push_back(std::move(ann));
    }

    sc.perturbed = fs;
    if (spec.perturb_sigma > 0)
      for (Eigen::Index i = 0; i < sc.perturbed.data.size(); ++i)
        sc.perturbed.data.data()[i] = std::max(0.0, sc.perturbed.data.data()[i] + spec.perturb_sigma * detail::normal(gen));
    ds.classes.push_back(std::move(sc));
  }
  return ds;
}

/// Writes tensors, keypoints, manifest.json and head.pptn under `dir`; returns the manifest path.
inline std::filesystem::path write_synthetic(const SyntheticDataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  DatasetManifest m;
  m.name = "synthetic";
  m.part_vocabulary = ds.part_vocabulary;
  for (const auto& sc : ds.classes) {
    const std::string stem = "class_" + std::to_string(sc.class_id);
    write_tensor(feature_stack_to_tensor(sc.clean), dir / (stem + "_features.pptn"));
    write_tensor(feature_stack_to_tensor(sc.perturbed), dir / (stem + "_perturbed.pptn"));
    {
      std::ofstream out(dir / (stem + "_keypoints.json"), std::ios::trunc);
      out << nlohmann::json(sc.annotations).dump(1) << '\n';
    }
    ClassEntry e;
    e.class_id = sc.class_id;
    e.label = ds.head.class_labels[static_cast<std::size_t>(sc.class_id)];
    e.feature_file = stem + "_features.pptn";
    e.perturbed_feature_file = stem + "_perturbed.pptn";
    e.keypoint_file = stem + "_keypoints.json";
    for (const auto& id : sc.clean.image_ids) e.images.push_back({id, {}});
    m.classes.push_back(std::move(e));
  }
  write_tensor(matrix_to_tensor(ds.head.rows, DType::f32), dir / "head.pptn");
  const auto path = dir / "manifest.json";
  std::ofstream out(path, std::ios::trunc);
  out << manifest_to_json(m).dump(2) << '\n';
  return path;
}

}  // namespace pppn
