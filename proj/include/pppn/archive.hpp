#pragma once

// Decomposition archive on disk:
//   DIR/decomposition.json          run config, per-class alpha / traces / flags
//   DIR/class_<id>/<field>.pptn     P, alpha, R, r, p_tilde, v as f64 tensors

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pppn/dataset.hpp"
#include "pppn/decomposition.hpp"
#include "pppn/tensor_io.hpp"

namespace pppn {

inline constexpr const char* kArchiveFormat = "pppn-archive/1";

struct Archive {
  std::string manifest;  // as recorded at decompose time
  std::string head;
  DecomposeOptions options;
  std::vector<ClassDecomposition> classes;
  std::vector<std::string> labels;  // parallel to classes
  std::vector<ClassFailure> failures;

  const ClassDecomposition* find(int class_id) const {
    for (const auto& c : classes)
      if (c.class_id == class_id) return &c;
    return nullptr;
  }
};

inline std::string class_dir_name(int class_id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "class_%03d", class_id);
  return buf;
}

inline nlohmann::json options_to_json(const DecomposeOptions& o) {
  return {{"k", o.k},
          {"mode", to_string(o.mode)},
          {"clamp", o.clamp},
          {"nmf",
           {{"seed", o.nmf.seed},
            {"max_iter", o.nmf.max_iter},
            {"rel_tol", o.nmf.rel_tol},
            {"epsilon_guard", o.nmf.epsilon_guard}}},
          {"refine",
           {{"tol", o.refine.tol},
            {"max_iter", o.refine.max_iter},
            {"simplex_step", o.refine.simplex_step}}}};
}

inline DecomposeOptions options_from_json(const nlohmann::json& j) {
  DecomposeOptions o;
  o.k = j.at("k").get<std::size_t>();
  o.mode = j.at("mode").get<std::string>() == "naive" ? RefineMode::naive : RefineMode::dynamic;
  o.clamp = j.value("clamp", true);
  const auto& n = j.at("nmf");
  o.nmf.seed = n.at("seed").get<std::uint64_t>();
  o.nmf.max_iter = n.at("max_iter").get<std::size_t>();
  o.nmf.rel_tol = n.at("rel_tol").get<double>();
  o.nmf.epsilon_guard = n.at("epsilon_guard").get<double>();
  const auto& r = j.at("refine");
  o.refine.tol = r.at("tol").get<double>();
  o.refine.max_iter = r.at("max_iter").get<std::size_t>();
  o.refine.simplex_step = r.at("simplex_step").get<double>();
  return o;
}

inline Tensor vector_tensor(const Eigen::Ref<const Eigen::VectorXd>& v) {
  return Tensor({static_cast<std::uint64_t>(v.size())}, std::vector<double>(v.data(), v.data() + v.size()));
}

inline void write_archive(const Archive& a, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t i = 0; i < a.classes.size(); ++i) {
    const auto& d = a.classes[i];
    const auto sub = class_dir_name(d.class_id);
    fs::create_directories(dir / sub);
    write_tensor(matrix_to_tensor(d.P), dir / sub / "P.pptn");
    write_tensor(vector_tensor(d.alpha), dir / sub / "alpha.pptn");
    write_tensor(vector_tensor(d.R.transpose()), dir / sub / "R.pptn");
    write_tensor(matrix_to_tensor(d.r), dir / sub / "r.pptn");
    write_tensor(matrix_to_tensor(d.p_tilde), dir / sub / "p_tilde.pptn");
    write_tensor(vector_tensor(d.v.transpose()), dir / sub / "v.pptn");
    classes.push_back({{"class_id", d.class_id},
                       {"label", i < a.labels.size() ? a.labels[i] : std::string{}},
                       {"dir", sub},
                       {"k", d.k},
                       {"mode", to_string(d.refinement_mode)},
                       {"alpha", std::vector<double>(d.alpha.data(), d.alpha.data() + d.alpha.size())},
                       {"nmf_trace", d.nmf_trace},
                       {"nmf_iterations", d.nmf_iterations},
                       {"nmf_converged", d.nmf_converged},
                       {"objective_trace", d.objective_trace},
                       {"refine_iterations", d.refine_iterations},
                       {"uniform_fallback", d.uniform_fallback},
                       {"min_norm_fallback", d.min_norm_fallback},
                       {"reconstruction_error", d.reconstruction_error()}});
  }
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& f : a.failures) failures.push_back({{"class_id", f.class_id}, {"message", f.message}});
  nlohmann::json root = {{"format", kArchiveFormat},
                         {"manifest", a.manifest},
                         {"head", a.head},
                         {"config", options_to_json(a.options)},
                         {"classes", classes},
                         {"failures", failures}};
  std::ofstream out(dir / "decomposition.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + (dir / "decomposition.json").string());
  out << root.dump(2) << '\n';
}

inline Archive read_archive(const std::filesystem::path& dir) {
  const auto root = read_json_file(dir / "decomposition.json");
  if (root.value("format", std::string{}) != kArchiveFormat)
    throw DataError(DataErrc::malformed, (dir / "decomposition.json").string() + ": not a " +
                                             kArchiveFormat + " archive");
  Archive a;
  try {
    a.manifest = root.value("manifest", std::string{});
    a.head = root.value("head", std::string{});
    a.options = options_from_json(root.at("config"));
    for (const auto& c : root.at("classes")) {
      ClassDecomposition d;
      d.class_id = c.at("class_id").get<int>();
      d.k = c.at("k").get<std::size_t>();
      d.refinement_mode = c.at("mode").get<std::string>() == "naive" ? RefineMode::naive : RefineMode::dynamic;
      d.nmf_trace = c.at("nmf_trace").get<std::vector<double>>();
      d.nmf_iterations = c.at("nmf_iterations").get<std::size_t>();
      d.nmf_converged = c.at("nmf_converged").get<bool>();
      d.objective_trace = c.at("objective_trace").get<std::vector<double>>();
      d.refine_iterations = c.at("refine_iterations").get<std::size_t>();
      d.uniform_fallback = c.at("uniform_fallback").get<bool>();
      d.min_norm_fallback = c.at("min_norm_fallback").get<bool>();
      const auto sub = dir / c.at("dir").get<std::string>();
      d.P = tensor_to_matrix(read_tensor(sub / "P.pptn"));
      const auto alpha = read_tensor(sub / "alpha.pptn").to_f64();
      d.alpha = Eigen::Map<const Vector>(alpha.data(), static_cast<Eigen::Index>(alpha.size()));
      const auto R = read_tensor(sub / "R.pptn").to_f64();
      d.R = Eigen::Map<const RowVector>(R.data(), static_cast<Eigen::Index>(R.size()));
      d.r = tensor_to_matrix(read_tensor(sub / "r.pptn"));
      d.p_tilde = tensor_to_matrix(read_tensor(sub / "p_tilde.pptn"));
      const auto v = read_tensor(sub / "v.pptn").to_f64();
      d.v = Eigen::Map<const RowVector>(v.data(), static_cast<Eigen::Index>(v.size()));
      if (d.p_tilde.rows() != static_cast<Eigen::Index>(d.k) || d.p_tilde.cols() != d.v.size())
        throw DataError(DataErrc::shape_mismatch, sub.string() + ": p_tilde shape disagrees with k/D");
      a.labels.push_back(c.value("label", std::string{}));
      a.classes.push_back(std::move(d));
    }
    for (const auto& f : root.value("failures", nlohmann::json::array()))
      a.failures.push_back({f.at("class_id").get<int>(), f.at("message").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrc::malformed, std::string("decomposition.json: ") + e.what());
  }
  return a;
}

}  // namespace pppn
