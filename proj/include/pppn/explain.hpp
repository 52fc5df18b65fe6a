#pragma once

// Inference-time explanation. The class logit is the spatial average of x v^T;
// with v = sum_i p~_i it splits exactly into per-prototype contributions
// Avg(x p~_i^T), each of which has a heatmap x p~_i^T.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pppn/dataset.hpp"
#include "pppn/decomposition.hpp"
#include "pppn/types.hpp"

namespace pppn {

class ExplainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct FeatureMap {
  std::string image_id;
  std::size_t H = 0, W = 0, D = 0;
  Matrix x;  // (H*W) x D
};

/// Feature map of image i of a stack.
inline FeatureMap feature_map(const FeatureStack& fs, std::size_t i) {
  if (i >= fs.n) throw ExplainError("image index " + std::to_string(i) + " out of range");
  return {fs.image_ids[i], fs.H, fs.W, fs.D, fs.image(i)};
}

/// Row-major scalar grid.
struct Grid {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;

  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
};

struct Heatmap {
  std::string image_id;
  std::size_t prototype_index = 0;
  std::size_t H = 0, W = 0;
  std::vector<double> values;  // H*W, row-major
  std::optional<Grid> upsampled;

  Grid grid() const { return {H, W, values}; }
};

namespace detail {
inline void check_dim(const FeatureMap& x, Eigen::Index D, const char* who) {
  if (x.x.cols() != D)
    throw ExplainError(std::string(who) + ": feature D=" + std::to_string(x.x.cols()) +
                       " but vector D=" + std::to_string(D));
  if (x.x.rows() == 0) throw ExplainError(std::string(who) + ": empty feature map");
}
}  // namespace detail

/// Avg over spatial positions of x_j . v
inline double class_logit(const FeatureMap& x, const RowVector& v) {
  detail::check_dim(x, v.size(), "class_logit");
  return (x.x * v.transpose()).mean();
}

/// c_i = Avg(x p~_i^T) for every prototype of the decomposition.
inline Vector contributions(const FeatureMap& x, const ClassDecomposition& d) {
  detail::check_dim(x, d.p_tilde.cols(), "contributions");
  return (x.x * d.p_tilde.transpose()).colwise().mean().transpose();
}

inline Heatmap heatmap(const FeatureMap& x, const RowVector& p, std::size_t prototype_index = 0) {
  detail::check_dim(x, p.size(), "heatmap");
  Heatmap h;
  h.image_id = x.image_id;
  h.prototype_index = prototype_index;
  h.H = x.H;
  h.W = x.W;
  const Vector vals = x.x * p.transpose();
  h.values.assign(vals.data(), vals.data() + vals.size());
  return h;
}

inline std::vector<Heatmap> heatmaps(const FeatureMap& x, const ClassDecomposition& d) {
  std::vector<Heatmap> out;
  for (Eigen::Index i = 0; i < d.p_tilde.rows(); ++i)
    out.push_back(heatmap(x, d.p_tilde.row(i), static_cast<std::size_t>(i)));
  return out;
}

/// Corner-aligned bilinear resampling: output corners coincide with input corners.
inline Grid upsample_bilinear(const Grid& in, std::size_t out_rows, std::size_t out_cols) {
  if (out_rows == 0 || out_cols == 0) throw ExplainError("upsample_bilinear: zero target size");
  if (in.rows == 0 || in.cols == 0 || in.values.size() != in.rows * in.cols)
    throw ExplainError("upsample_bilinear: malformed input grid");
  Grid out{out_rows, out_cols, std::vector<double>(out_rows * out_cols)};
  auto src_coord = [](std::size_t i, std::size_t n_out, std::size_t n_in) {
    if (n_out == 1 || n_in == 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1);
  };
  for (std::size_t r = 0; r < out_rows; ++r) {
    const double sy = src_coord(r, out_rows, in.rows);
    const auto y0 = std::min(static_cast<std::size_t>(sy), in.rows - 1);
    const auto y1 = std::min(y0 + 1, in.rows - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t c = 0; c < out_cols; ++c) {
      const double sx = src_coord(c, out_cols, in.cols);
      const auto x0 = std::min(static_cast<std::size_t>(sx), in.cols - 1);
      const auto x1 = std::min(x0 + 1, in.cols - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = in(y0, x0) + fx * (in(y0, x1) - in(y0, x0));
      const double bot = in(y1, x0) + fx * (in(y1, x1) - in(y1, x0));
      out(r, c) = top + fy * (bot - top);
    }
  }
  return out;
}

struct Explanation {
  std::string image_id;
  std::vector<int> class_ids;
  std::vector<double> logits;                      // per class
  std::vector<std::vector<double>> contributions;  // per class, per prototype
  std::vector<std::vector<bool>> mask;             // same shape as contributions
  int predicted_class = -1;
};

namespace detail {
inline void finish_explanation(Explanation& e) {
  e.logits.assign(e.contributions.size(), 0.0);
  for (std::size_t c = 0; c < e.contributions.size(); ++c)
    for (std::size_t i = 0; i < e.contributions[c].size(); ++i)
      if (e.mask[c][i]) e.logits[c] += e.contributions[c][i];
  std::size_t best = 0;
  for (std::size_t c = 1; c < e.logits.size(); ++c) {
    if (e.logits[c] > e.logits[best] ||
        (e.logits[c] == e.logits[best] && e.class_ids[c] < e.class_ids[best]))
      best = c;
  }
  e.predicted_class = e.class_ids[best];
}
}  // namespace detail

/// Logits as contribution sums for every class; argmax ties go to the lowest class_id.
inline Explanation predict(const FeatureMap& x, const std::vector<ClassDecomposition>& decomps) {
  if (decomps.empty()) throw ExplainError("predict: no decompositions");
  Explanation e;
  e.image_id = x.image_id;
  for (const auto& d : decomps) {
    const Vector c = contributions(x, d);
    e.class_ids.push_back(d.class_id);
    e.contributions.emplace_back(c.data(), c.data() + c.size());
    e.mask.emplace_back(static_cast<std::size_t>(c.size()), true);
  }
  detail::finish_explanation(e);
  return e;
}

/// Recomputes logits with masked-out contributions removed. The input is not modified.
inline Explanation intervene(const Explanation& in, const std::vector<std::vector<bool>>& mask) {
  if (mask.size() != in.contributions.size())
    throw ExplainError("intervene: mask has " + std::to_string(mask.size()) + " classes, expected " +
                       std::to_string(in.contributions.size()));
  for (std::size_t c = 0; c < mask.size(); ++c)
    if (mask[c].size() != in.contributions[c].size())
      throw ExplainError("intervene: mask row " + std::to_string(c) + " has " +
                         std::to_string(mask[c].size()) + " entries, expected " +
                         std::to_string(in.contributions[c].size()));
  Explanation out = in;
  out.mask = mask;
  detail::finish_explanation(out);
  return out;
}

inline nlohmann::json to_json(const Explanation& e) {
  return {{"image_id", e.image_id},
          {"class_ids", e.class_ids},
          {"logits", e.logits},
          {"contributions", e.contributions},
          {"mask", e.mask},
          {"predicted_class", e.predicted_class}};
}

/// 8-bit grayscale binary PGM (P5), min-max scaled; a constant grid maps to 0.
inline std::vector<char> encode_pgm(const Grid& g) {
  std::string header = "P5\n" + std::to_string(g.cols) + " " + std::to_string(g.rows) + "\n255\n";
  std::vector<char> out(header.begin(), header.end());
  const auto [lo_it, hi_it] = std::minmax_element(g.values.begin(), g.values.end());
  const double lo = g.values.empty() ? 0 : *lo_it;
  const double span = g.values.empty() ? 0 : *hi_it - lo;
  for (double v : g.values) {
    const double s = span > 0 ? (v - lo) / span : 0.0;
    out.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(s * 255.0))));
  }
  return out;
}

inline void write_pgm(const Grid& g, const std::filesystem::path& path) {
  const auto bytes = encode_pgm(g);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Tensor grid_to_tensor(const Grid& g) {
  return Tensor({g.rows, g.cols}, std::vector<float>(g.values.begin(), g.values.end()));
}

}  // namespace pppn
