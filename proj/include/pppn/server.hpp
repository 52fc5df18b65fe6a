#pragma once

// Read-only JSON API over a decomposition archive. Intervention masks travel
// with each request; the server holds no per-client state.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pppn/archive.hpp"
#include "pppn/dataset.hpp"
#include "pppn/explain.hpp"

// After Eigen: <resolv.h>, pulled in by httplib, defines a `_res` macro.
#include <httplib.h>

namespace pppn {

class ServerState {
 public:
  struct ImageRef {
    std::size_t stack = 0;
    std::size_t index = 0;
  };

  ServerState(Archive archive, const DatasetManifest& manifest, std::optional<nlohmann::json> report = {})
      : archive_(std::move(archive)), report_(std::move(report)) {
    for (const auto& d : archive_.classes) {
      stacks_.push_back(load_feature_stack(manifest, d.class_id, archive_.options.clamp));
      const auto& fs = stacks_.back();
      for (std::size_t i = 0; i < fs.n; ++i) {
        if (!images_.emplace(fs.image_ids[i], ImageRef{stacks_.size() - 1, i}).second)
          throw DataError(DataErrc::malformed, "duplicate image id " + fs.image_ids[i]);
        image_order_.push_back(fs.image_ids[i]);
      }
    }
  }

  const Archive& archive() const { return archive_; }

  const ImageRef* image(const std::string& id) const {
    auto it = images_.find(id);
    return it == images_.end() ? nullptr : &it->second;
  }

  FeatureMap feature(const ImageRef& ref) const { return feature_map(stacks_[ref.stack], ref.index); }

  nlohmann::json classes_json() const {
    auto out = nlohmann::json::array();
    for (std::size_t i = 0; i < archive_.classes.size(); ++i)
      out.push_back({{"class_id", archive_.classes[i].class_id},
                     {"label", archive_.labels[i]},
                     {"k", archive_.classes[i].k}});
    return out;
  }

  std::optional<nlohmann::json> prototypes_json(int class_id) const {
    const auto* d = archive_.find(class_id);
    if (!d) return std::nullopt;
    auto out = nlohmann::json::array();
    for (Eigen::Index i = 0; i < d->p_tilde.rows(); ++i) {
      nlohmann::json o = {{"index", i}, {"alpha", d->alpha[i]}, {"norm", d->p_tilde.row(i).norm()}};
      if (auto v = verdict(class_id, static_cast<std::size_t>(i))) o["consistent"] = *v;
      out.push_back(std::move(o));
    }
    return out;
  }

  nlohmann::json images_json() const {
    auto out = nlohmann::json::array();
    for (const auto& id : image_order_) {
      const auto& ref = images_.at(id);
      out.push_back({{"image_id", id},
                     {"class_id", archive_.classes[ref.stack].class_id},
                     {"label", archive_.labels[ref.stack]}});
    }
    return out;
  }

  /// Heatmaps of every prototype of `class_id` (the image's own class when unset).
  std::optional<nlohmann::json> heatmaps_json(const std::string& image_id, std::optional<int> class_id) const {
    const auto* ref = image(image_id);
    if (!ref) return std::nullopt;
    const int c = class_id.value_or(archive_.classes[ref->stack].class_id);
    const auto* d = archive_.find(c);
    if (!d) return std::nullopt;
    const auto x = feature(*ref);
    auto maps = nlohmann::json::array();
    for (const auto& h : heatmaps(x, *d))
      maps.push_back({{"prototype_index", h.prototype_index}, {"values", h.values}});
    return nlohmann::json{{"image_id", image_id}, {"class_id", c}, {"H", x.H}, {"W", x.W}, {"heatmaps", maps}};
  }

  Explanation explain(const std::string& image_id) const {
    const auto* ref = image(image_id);
    if (!ref) throw ExplainError("unknown image " + image_id);
    return predict(feature(*ref), archive_.classes);
  }

 private:
  std::optional<bool> verdict(int class_id, std::size_t index) const {
    if (!report_ || !report_->contains("prototypes")) return std::nullopt;
    for (const auto& v : (*report_)["prototypes"])
      if (v.value("class_id", -1) == class_id && v.value("prototype_index", std::size_t(-1)) == index)
        return v.value("consistent", false);
    return std::nullopt;
  }

  Archive archive_;
  std::optional<nlohmann::json> report_;
  std::vector<FeatureStack> stacks_;
  std::map<std::string, ImageRef> images_;
  std::vector<std::string> image_order_;
};

namespace detail {
inline void send_json(httplib::Response& res, const nlohmann::json& j, int status = 200) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}
inline void send_error(httplib::Response& res, int status, const std::string& msg) {
  send_json(res, {{"error", msg}}, status);
}
}  // namespace detail

/// Registers the /api routes, plus static files from `static_dir` when given.
inline void install_routes(httplib::Server& srv, const ServerState& state,
                           const std::optional<std::filesystem::path>& static_dir = {}) {
  using detail::send_error;
  using detail::send_json;

  srv.Get("/api/classes", [&state](const httplib::Request&, httplib::Response& res) {
    send_json(res, state.classes_json());
  });

  srv.Get(R"(/api/classes/(-?\d+)/prototypes)", [&state](const httplib::Request& req, httplib::Response& res) {
    const int c = std::stoi(req.matches[1].str());
    if (auto j = state.prototypes_json(c)) return send_json(res, *j);
    send_error(res, 404, "unknown class " + std::to_string(c));
  });

  srv.Get("/api/images", [&state](const httplib::Request&, httplib::Response& res) {
    send_json(res, state.images_json());
  });

  srv.Get(R"(/api/images/([^/]+)/heatmaps)", [&state](const httplib::Request& req, httplib::Response& res) {
    std::optional<int> c;
    if (req.has_param("class")) {
      try {
        c = std::stoi(req.get_param_value("class"));
      } catch (const std::exception&) {
        return send_error(res, 400, "class must be an integer");
      }
    }
    if (auto j = state.heatmaps_json(req.matches[1].str(), c)) return send_json(res, *j);
    send_error(res, 404, "unknown image or class");
  });

  srv.Post("/api/predict", [&state](const httplib::Request& req, httplib::Response& res) {
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception&) {
      return send_error(res, 400, "body must be JSON");
    }
    if (!body.is_object() || !body.contains("image_id") || !body["image_id"].is_string())
      return send_error(res, 400, "image_id (string) required");
    const auto id = body["image_id"].get<std::string>();
    if (!state.image(id)) return send_error(res, 404, "unknown image " + id);
    try {
      auto e = state.explain(id);
      if (body.contains("mask") && !body["mask"].is_null())
        e = intervene(e, body["mask"].get<std::vector<std::vector<bool>>>());
      send_json(res, to_json(e));
    } catch (const nlohmann::json::exception&) {
      send_error(res, 400, "mask must be an array of boolean arrays");
    } catch (const ExplainError& err) {
      send_error(res, 400, err.what());
    }
  });

  if (static_dir) {
    srv.set_mount_point("/", static_dir->string());
  } else {
    srv.Get("/", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(
          "<!doctype html><title>pppn</title><p>API: <code>/api/classes</code>, "
          "<code>/api/images</code>, <code>POST /api/predict</code></p>",
          "text/html");
    });
  }
}

}  // namespace pppn
