#pragma once

// Dataset manifests, class feature stacks, classification heads, and keypoint
// annotations. Manifest paths are resolved relative to the manifest file.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pppn/tensor_io.hpp"
#include "pppn/types.hpp"

namespace pppn {

enum class DataErrc {
  malformed,
  duplicate_class,
  unknown_class,
  missing_file,
  rank_mismatch,
  shape_mismatch,
  out_of_bounds,
  non_finite,
};

class DataError : public std::runtime_error {
 public:
  DataError(DataErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  DataErrc code() const noexcept { return code_; }

 private:
  DataErrc code_;
};

struct ImageEntry {
  std::string id;
  std::string file;  // optional, UI overlay only
};

struct ClassEntry {
  int class_id = 0;
  std::string label;
  std::filesystem::path feature_file;
  std::optional<std::filesystem::path> perturbed_feature_file;
  std::vector<ImageEntry> images;
  std::optional<std::filesystem::path> keypoint_file;
};

struct PartName {
  int id = 0;
  std::string name;
};

struct DatasetManifest {
  std::string name;
  std::filesystem::path path;  // the manifest file itself, empty if built in memory
  std::vector<ClassEntry> classes;
  std::vector<PartName> part_vocabulary;

  const ClassEntry& entry(int class_id) const {
    for (const auto& c : classes)
      if (c.class_id == class_id) return c;
    throw DataError(DataErrc::unknown_class, "class_id " + std::to_string(class_id) +
                                                 " not in manifest");
  }

  bool has_part(int part_id) const {
    if (part_vocabulary.empty()) return true;
    return std::any_of(part_vocabulary.begin(), part_vocabulary.end(),
                       [&](const PartName& p) { return p.id == part_id; });
  }
};

/// Features of n images of one class, flattened to (n*H*W) x D.
struct FeatureStack {
  int class_id = 0;
  std::size_t n = 0, H = 0, W = 0, D = 0;
  Matrix data;
  std::vector<std::string> image_ids;

  std::size_t rows_per_image() const { return H * W; }
  /// Rows of image i as an (H*W) x D block.
  auto image(std::size_t i) const {
    return data.middleRows(static_cast<Eigen::Index>(i * H * W), static_cast<Eigen::Index>(H * W));
  }
};

struct ClassHead {
  Matrix rows;  // C x D
  std::vector<std::string> class_labels;

  std::size_t C() const { return static_cast<std::size_t>(rows.rows()); }
  std::size_t D() const { return static_cast<std::size_t>(rows.cols()); }
};

struct Keypoint {
  int part_id = 0;
  double x = 0, y = 0;
  bool visible = true;
};

struct KeypointAnnotation {
  std::string image_id;
  int image_width = 0, image_height = 0;
  std::vector<Keypoint> keypoints;
};

// JSON mapping -------------------------------------------------------------

inline void to_json(nlohmann::json& j, const Keypoint& k) {
  j = {{"part_id", k.part_id}, {"x", k.x}, {"y", k.y}, {"visible", k.visible}};
}
inline void from_json(const nlohmann::json& j, Keypoint& k) {
  j.at("part_id").get_to(k.part_id);
  j.at("x").get_to(k.x);
  j.at("y").get_to(k.y);
  k.visible = j.value("visible", true);
}
inline void to_json(nlohmann::json& j, const KeypointAnnotation& a) {
  j = {{"image_id", a.image_id},
       {"image_width", a.image_width},
       {"image_height", a.image_height},
       {"keypoints", a.keypoints}};
}
inline void from_json(const nlohmann::json& j, KeypointAnnotation& a) {
  j.at("image_id").get_to(a.image_id);
  j.at("image_width").get_to(a.image_width);
  j.at("image_height").get_to(a.image_height);
  a.keypoints = j.value("keypoints", std::vector<Keypoint>{});
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  using nlohmann::json;
  json classes = json::array();
  for (const auto& c : m.classes) {
    json e = {{"class_id", c.class_id}, {"label", c.label}, {"feature_file", c.feature_file.generic_string()}};
    if (c.perturbed_feature_file) e["perturbed_feature_file"] = c.perturbed_feature_file->generic_string();
    if (c.keypoint_file) e["keypoint_file"] = c.keypoint_file->generic_string();
    if (!c.images.empty()) {
      json imgs = json::array();
      for (const auto& im : c.images) {
        json o = {{"id", im.id}};
        if (!im.file.empty()) o["file"] = im.file;
        imgs.push_back(std::move(o));
      }
      e["images"] = std::move(imgs);
    }
    classes.push_back(std::move(e));
  }
  json parts = json::array();
  for (const auto& p : m.part_vocabulary) parts.push_back({{"id", p.id}, {"name", p.name}});
  return {{"name", m.name}, {"classes", classes}, {"part_vocabulary", parts}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j,
                                          const std::filesystem::path& origin = {}) {
  DatasetManifest m;
  m.path = origin;
  try {
    m.name = j.value("name", std::string{});
    for (const auto& p : j.value("part_vocabulary", nlohmann::json::array())) {
      if (p.is_number_integer())
        m.part_vocabulary.push_back({p.get<int>(), std::to_string(p.get<int>())});
      else
        m.part_vocabulary.push_back({p.at("id").get<int>(), p.value("name", std::string{})});
    }
    std::set<int> seen;
    for (const auto& e : j.at("classes")) {
      ClassEntry c;
      c.class_id = e.at("class_id").get<int>();
      c.label = e.value("label", "class_" + std::to_string(c.class_id));
      c.feature_file = e.at("feature_file").get<std::string>();
      if (e.contains("perturbed_feature_file") && !e["perturbed_feature_file"].is_null())
        c.perturbed_feature_file = e["perturbed_feature_file"].get<std::string>();
      if (e.contains("keypoint_file") && !e["keypoint_file"].is_null())
        c.keypoint_file = e["keypoint_file"].get<std::string>();
      for (const auto& im : e.value("images", nlohmann::json::array())) {
        if (im.is_string())
          c.images.push_back({im.get<std::string>(), {}});
        else
          c.images.push_back({im.at("id").get<std::string>(), im.value("file", std::string{})});
      }
      if (c.class_id < 0)
        throw DataError(DataErrc::malformed, "negative class_id " + std::to_string(c.class_id));
      if (!seen.insert(c.class_id).second)
        throw DataError(DataErrc::duplicate_class,
                        "duplicate class_id " + std::to_string(c.class_id));
      m.classes.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrc::malformed, std::string("manifest: ") + e.what());
  }
  return m;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(DataErrc::missing_file, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrc::malformed, path.string() + ": " + e.what());
  }
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  return manifest_from_json(read_json_file(path), path);
}

/// Resolves a manifest-relative path.
inline std::filesystem::path resolve(const DatasetManifest& m, const std::filesystem::path& p) {
  if (p.is_absolute() || m.path.empty()) return p;
  return m.path.parent_path() / p;
}

/// Checks that every referenced file exists and parses. Returns one message per problem.
inline std::vector<std::string> validate_manifest(const DatasetManifest& m) {
  std::vector<std::string> problems;
  auto check_tensor = [&](const std::filesystem::path& p) {
    try {
      (void)read_tensor(resolve(m, p));
    } catch (const std::exception& e) {
      problems.push_back(p.string() + ": " + e.what());
    }
  };
  for (const auto& c : m.classes) {
    check_tensor(c.feature_file);
    if (c.perturbed_feature_file) check_tensor(*c.perturbed_feature_file);
    if (c.keypoint_file) {
      try {
        (void)read_json_file(resolve(m, *c.keypoint_file));
      } catch (const std::exception& e) {
        problems.push_back(e.what());
      }
    }
  }
  return problems;
}

/// Builds a feature stack from an [n,H,W,D] tensor; negative entries are zeroed when clamp is set.
inline FeatureStack feature_stack_from_tensor(const Tensor& t, int class_id, bool clamp,
                                              std::vector<std::string> image_ids = {}) {
  if (t.rank() != 4)
    throw DataError(DataErrc::rank_mismatch,
                    "feature tensor must have rank 4 [n,H,W,D], got rank " + std::to_string(t.rank()));
  FeatureStack fs;
  fs.class_id = class_id;
  fs.n = t.shape()[0];
  fs.H = t.shape()[1];
  fs.W = t.shape()[2];
  fs.D = t.shape()[3];
  const auto rows = static_cast<Eigen::Index>(fs.n * fs.H * fs.W);
  const auto cols = static_cast<Eigen::Index>(fs.D);
  fs.data.resize(rows, cols);
  const auto values = t.to_f64();
  for (Eigen::Index i = 0; i < rows * cols; ++i) {
    double x = values[static_cast<std::size_t>(i)];
    if (!std::isfinite(x)) throw DataError(DataErrc::non_finite, "non-finite feature value");
    fs.data.data()[i] = (clamp && x < 0.0) ? 0.0 : x;
  }
  if (image_ids.empty()) {
    for (std::size_t i = 0; i < fs.n; ++i)
      image_ids.push_back("c" + std::to_string(class_id) + "_" + std::to_string(i));
  } else if (image_ids.size() != fs.n) {
    throw DataError(DataErrc::shape_mismatch, "manifest lists " + std::to_string(image_ids.size()) +
                                                  " images but tensor holds " + std::to_string(fs.n));
  }
  fs.image_ids = std::move(image_ids);
  return fs;
}

inline std::vector<std::string> image_ids_of(const ClassEntry& e) {
  std::vector<std::string> ids;
  for (const auto& im : e.images) ids.push_back(im.id);
  return ids;
}

inline FeatureStack load_feature_stack(const DatasetManifest& m, int class_id, bool clamp = true) {
  const auto& e = m.entry(class_id);
  return feature_stack_from_tensor(read_tensor(resolve(m, e.feature_file)), class_id, clamp,
                                   image_ids_of(e));
}

inline FeatureStack load_perturbed_stack(const DatasetManifest& m, int class_id, bool clamp = true) {
  const auto& e = m.entry(class_id);
  if (!e.perturbed_feature_file)
    throw DataError(DataErrc::missing_file,
                    "class " + std::to_string(class_id) + " has no perturbed_feature_file");
  return feature_stack_from_tensor(read_tensor(resolve(m, *e.perturbed_feature_file)), class_id,
                                   clamp, image_ids_of(e));
}

inline Tensor feature_stack_to_tensor(const FeatureStack& fs, DType dtype = DType::f32) {
  std::vector<std::uint64_t> shape{fs.n, fs.H, fs.W, fs.D};
  const auto* p = fs.data.data();
  const auto count = static_cast<std::size_t>(fs.data.size());
  if (dtype == DType::f64) return Tensor(shape, std::vector<double>(p, p + count));
  return Tensor(shape, std::vector<float>(p, p + count));
}

/// Head tensor is C x D; row r belongs to class_id r.
inline ClassHead head_from_tensor(const Tensor& t, std::vector<std::string> labels = {}) {
  if (t.rank() != 2)
    throw DataError(DataErrc::rank_mismatch,
                    "head tensor must have rank 2 [C,D], got rank " + std::to_string(t.rank()));
  ClassHead h;
  h.rows.resize(static_cast<Eigen::Index>(t.shape()[0]), static_cast<Eigen::Index>(t.shape()[1]));
  const auto values = t.to_f64();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) throw DataError(DataErrc::non_finite, "non-finite head weight");
    h.rows.data()[i] = values[i];
  }
  labels.resize(h.C());
  for (std::size_t c = 0; c < h.C(); ++c)
    if (labels[c].empty()) labels[c] = "class_" + std::to_string(c);
  h.class_labels = std::move(labels);
  return h;
}

inline ClassHead load_head(const std::filesystem::path& path, const DatasetManifest* m = nullptr) {
  auto t = read_tensor(path);
  std::vector<std::string> labels;
  if (m && t.rank() == 2) {
    labels.resize(t.shape()[0]);
    for (const auto& c : m->classes)
      if (static_cast<std::size_t>(c.class_id) < labels.size()) labels[c.class_id] = c.label;
  }
  return head_from_tensor(t, std::move(labels));
}

inline Tensor matrix_to_tensor(const Matrix& m, DType dtype = DType::f64) {
  std::vector<std::uint64_t> shape{static_cast<std::uint64_t>(m.rows()),
                                   static_cast<std::uint64_t>(m.cols())};
  const auto* p = m.data();
  const auto count = static_cast<std::size_t>(m.size());
  if (dtype == DType::f32) return Tensor(shape, std::vector<float>(p, p + count));
  return Tensor(shape, std::vector<double>(p, p + count));
}

inline Matrix tensor_to_matrix(const Tensor& t) {
  if (t.rank() != 2)
    throw DataError(DataErrc::rank_mismatch, "expected rank-2 tensor, got rank " + std::to_string(t.rank()));
  Matrix m(static_cast<Eigen::Index>(t.shape()[0]), static_cast<Eigen::Index>(t.shape()[1]));
  const auto v = t.to_f64();
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

inline void validate_annotation(const KeypointAnnotation& a, const DatasetManifest* m) {
  if (a.image_width <= 0 || a.image_height <= 0)
    throw DataError(DataErrc::malformed, a.image_id + ": image size must be positive");
  for (const auto& k : a.keypoints) {
    if (!std::isfinite(k.x) || !std::isfinite(k.y))
      throw DataError(DataErrc::malformed, a.image_id + ": non-finite keypoint");
    if (k.x < 0 || k.x > a.image_width || k.y < 0 || k.y > a.image_height)
      throw DataError(DataErrc::out_of_bounds,
                      a.image_id + ": keypoint (" + std::to_string(k.x) + ", " +
                          std::to_string(k.y) + ") outside " + std::to_string(a.image_width) +
                          "x" + std::to_string(a.image_height));
    if (m && !m->has_part(k.part_id))
      throw DataError(DataErrc::malformed,
                      a.image_id + ": part_id " + std::to_string(k.part_id) + " not in vocabulary");
  }
}

inline std::vector<KeypointAnnotation> parse_keypoints(const nlohmann::json& j,
                                                       const DatasetManifest* m = nullptr) {
  std::vector<KeypointAnnotation> out;
  if (!j.is_array()) throw DataError(DataErrc::malformed, "keypoints: expected a JSON array");
  for (const auto& rec : j) {
    KeypointAnnotation a;
    try {
      a = rec.get<KeypointAnnotation>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(DataErrc::malformed, std::string("keypoint record: ") + e.what());
    }
    validate_annotation(a, m);
    out.push_back(std::move(a));
  }
  return out;
}

inline std::vector<KeypointAnnotation> load_keypoints(const DatasetManifest& m, int class_id) {
  const auto& e = m.entry(class_id);
  if (!e.keypoint_file)
    throw DataError(DataErrc::missing_file,
                    "class " + std::to_string(class_id) + " has no keypoint_file");
  return parse_keypoints(read_json_file(resolve(m, *e.keypoint_file)), &m);
}

}  // namespace pppn
