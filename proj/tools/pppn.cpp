// pppn: decompose a linear classification head into part-prototypes, explain
// predictions, score interpretability, and serve the intervention API.
//
// Exit codes: 0 ok, 2 input/validation error, 3 some classes failed.

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

#include "pppn/pppn.hpp"
#include "pppn/server.hpp"
#include "pppn/synthetic.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kInputError = 2;
constexpr int kPartialFailure = 3;

void init_logging() {
  spdlog::set_pattern("[%l] %v");
  if (const char* lvl = std::getenv("PPPN_LOG")) spdlog::set_level(spdlog::level::from_str(lvl));
}

struct DecomposeArgs {
  std::string manifest, head, out;
  std::size_t k = 3;
  std::uint64_t seed = 0;
  std::string mode = "dynamic";
  double tol = 1e-6;
  std::size_t max_iter = 100;
  double nmf_tol = 1e-4;
  std::size_t nmf_max_iter = 200;
  bool no_clamp = false;
  unsigned threads = 0;
};

int run_decompose(const DecomposeArgs& a) {
  pppn::DatasetManifest manifest;
  pppn::ClassHead head;
  try {
    manifest = pppn::load_manifest(a.manifest);
  } catch (const std::exception& e) {
    spdlog::error("manifest {}: {}", a.manifest, e.what());
    return kInputError;
  }
  try {
    head = pppn::load_head(a.head, &manifest);
  } catch (const std::exception& e) {
    spdlog::error("head {}: {}", a.head, e.what());
    return kInputError;
  }
  if (a.k < 1) {
    spdlog::error("--k must be >= 1");
    return kInputError;
  }

  pppn::DecomposeOptions opt;
  opt.k = a.k;
  opt.mode = a.mode == "naive" ? pppn::RefineMode::naive : pppn::RefineMode::dynamic;
  opt.clamp = !a.no_clamp;
  opt.threads = a.threads;
  opt.nmf.seed = a.seed;
  opt.nmf.rel_tol = a.nmf_tol;
  opt.nmf.max_iter = a.nmf_max_iter;
  opt.refine.tol = a.tol;
  opt.refine.max_iter = a.max_iter;

  auto result = pppn::decompose_head(manifest, head, opt);

  pppn::Archive archive;
  archive.manifest = a.manifest;
  archive.head = a.head;
  archive.options = opt;
  for (const auto& d : result.classes) archive.labels.push_back(manifest.entry(d.class_id).label);
  archive.classes = std::move(result.classes);
  archive.failures = std::move(result.failures);
  try {
    pppn::write_archive(archive, a.out);
  } catch (const std::exception& e) {
    spdlog::error("writing archive {}: {}", a.out, e.what());
    return kInputError;
  }

  std::cout << "class_id  recon_err      objective_init  objective_final  nmf_iters\n";
  for (const auto& d : archive.classes) {
    std::printf("%8d  %.3e  %14.6g  %15.6g  %9zu\n", d.class_id, d.reconstruction_error(),
                d.objective_initial(), d.objective_final(), d.nmf_iterations);
  }
  for (const auto& f : archive.failures) std::cout << "FAILED class " << f.class_id << ": " << f.message << '\n';
  std::cout << "archive: " << a.out << '\n';
  return archive.failures.empty() ? kOk : kPartialFailure;
}

pppn::DatasetManifest manifest_for(const pppn::Archive& archive, const std::string& override_path) {
  return pppn::load_manifest(override_path.empty() ? archive.manifest : override_path);
}

struct ExplainArgs {
  std::string archive, image, out, manifest;
  std::optional<int> cls;
  std::size_t upsample = 1;
};

int run_explain(const ExplainArgs& a) {
  pppn::Archive archive;
  pppn::DatasetManifest manifest;
  try {
    archive = pppn::read_archive(a.archive);
    manifest = manifest_for(archive, a.manifest);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kInputError;
  }

  std::optional<pppn::FeatureMap> x;
  for (const auto& d : archive.classes) {
    try {
      const auto stack = pppn::load_feature_stack(manifest, d.class_id, archive.options.clamp);
      for (std::size_t i = 0; i < stack.n; ++i)
        if (stack.image_ids[i] == a.image) x = pppn::feature_map(stack, i);
    } catch (const std::exception& e) {
      spdlog::warn("class {}: {}", d.class_id, e.what());
    }
    if (x) break;
  }
  if (!x) {
    spdlog::error("image {} not found in any decomposed class", a.image);
    return kInputError;
  }

  const auto expl = pppn::predict(*x, archive.classes);
  const int target = a.cls.value_or(expl.predicted_class);
  const auto* d = archive.find(target);
  if (!d) {
    spdlog::error("class {} is not in the archive", target);
    return kInputError;
  }

  fs::create_directories(a.out);
  {
    std::ofstream out(fs::path(a.out) / "explanation.json", std::ios::trunc);
    out << pppn::to_json(expl).dump(2) << '\n';
  }
  for (const auto& h : pppn::heatmaps(*x, *d)) {
    const std::string stem = "class_" + std::to_string(target) + "_proto_" + std::to_string(h.prototype_index);
    pppn::write_tensor(pppn::grid_to_tensor(h.grid()), fs::path(a.out) / (stem + ".pptn"));
    const auto grid = a.upsample > 1 ? pppn::upsample_bilinear(h.grid(), h.H * a.upsample, h.W * a.upsample)
                                     : h.grid();
    pppn::write_pgm(grid, fs::path(a.out) / (stem + ".pgm"));
  }
  std::cout << "image " << a.image << " predicted class " << expl.predicted_class << '\n';
  for (std::size_t c = 0; c < expl.class_ids.size(); ++c) {
    std::cout << "  class " << expl.class_ids[c] << " logit " << expl.logits[c] << " =";
    for (double v : expl.contributions[c]) std::cout << ' ' << v;
    std::cout << '\n';
  }
  return kOk;
}

struct MetricsArgs {
  std::string archive, manifest, out;
  double threshold = 0.5, tau = 0.8;
};

int run_metrics(const MetricsArgs& a) {
  pppn::Archive archive;
  pppn::DatasetManifest manifest;
  try {
    archive = pppn::read_archive(a.archive);
    manifest = manifest_for(archive, a.manifest);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kInputError;
  }
  pppn::MetricConfig cfg{a.threshold, a.tau, a.tau};
  pppn::MetricReport report;
  try {
    report = pppn::evaluate_metrics(archive.classes, manifest, cfg, archive.options.clamp);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kInputError;
  }
  fs::create_directories(a.out);
  {
    std::ofstream out(fs::path(a.out) / "report.json", std::ios::trunc);
    out << pppn::to_json(report).dump(2) << '\n';
  }
  {
    std::ofstream out(fs::path(a.out) / "report.csv", std::ios::trunc);
    out << pppn::to_csv(report);
  }
  std::printf("consistency %.2f%%\n", report.consistency);
  if (report.stability)
    std::printf("stability   %.2f%%\n", *report.stability);
  else
    std::printf("stability   n/a (no perturbed stacks)\n");
  for (const auto& s : report.skipped) spdlog::warn("skipped class {}: {}", s.class_id, s.message);
  return kOk;
}

struct ServeArgs {
  std::string archive, manifest, report, static_dir, host = "127.0.0.1";
  int port = 8080;
};

int run_serve(const ServeArgs& a) {
  std::optional<pppn::ServerState> state;
  try {
    auto archive = pppn::read_archive(a.archive);
    auto manifest = manifest_for(archive, a.manifest);
    std::optional<nlohmann::json> report;
    fs::path report_path = a.report.empty() ? fs::path(a.archive) / "report.json" : fs::path(a.report);
    if (fs::exists(report_path)) report = pppn::read_json_file(report_path);
    state.emplace(std::move(archive), manifest, std::move(report));
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kInputError;
  }

  httplib::Server srv;
  std::optional<fs::path> static_dir;
  if (!a.static_dir.empty()) static_dir = a.static_dir;
  pppn::install_routes(srv, *state, static_dir);

  // Stop on SIGINT/SIGTERM from a dedicated thread rather than inside a handler.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);
  std::thread stopper([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    spdlog::info("signal {}, shutting down", sig);
    srv.stop();
  });

  spdlog::info("serving {} on http://{}:{}", a.archive, a.host, a.port);
  const bool ok = srv.listen(a.host, a.port);
  if (!ok) {
    spdlog::error("cannot listen on {}:{}", a.host, a.port);
    pthread_kill(stopper.native_handle(), SIGTERM);
  }
  stopper.join();
  return ok ? kOk : kInputError;
}

struct SynthArgs {
  std::string out;
  pppn::SyntheticSpec spec;
};

int run_synth(const SynthArgs& a) {
  try {
    const auto ds = pppn::make_synthetic(a.spec);
    const auto path = pppn::write_synthetic(ds, a.out);
    std::cout << "manifest: " << path.string() << "\nhead: " << (fs::path(a.out) / "head.pptn").string() << '\n';
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kInputError;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  init_logging();
  CLI::App app{"Post-hoc part-prototype decomposition of classification heads"};
  app.require_subcommand(1);

  DecomposeArgs dec;
  auto* c_dec = app.add_subcommand("decompose", "Decompose every class head into k part-prototypes");
  c_dec->add_option("--manifest", dec.manifest, "Dataset manifest (JSON)")->required();
  c_dec->add_option("--head", dec.head, "Head weights, PPTN1 tensor [C,D]")->required();
  c_dec->add_option("--k", dec.k, "Prototypes per class")->capture_default_str();
  c_dec->add_option("--seed", dec.seed, "NMF initialization seed")->capture_default_str();
  c_dec->add_option("--mode", dec.mode, "Residual distribution")
      ->check(CLI::IsMember({"dynamic", "naive"}))
      ->capture_default_str();
  c_dec->add_option("--out", dec.out, "Archive directory")->required();
  c_dec->add_option("--tol", dec.tol, "Refinement tolerance")->capture_default_str();
  c_dec->add_option("--max-iter", dec.max_iter, "Refinement iteration cap")->capture_default_str();
  c_dec->add_option("--nmf-tol", dec.nmf_tol, "NMF relative stopping tolerance")->capture_default_str();
  c_dec->add_option("--nmf-max-iter", dec.nmf_max_iter, "NMF iteration cap")->capture_default_str();
  c_dec->add_flag("--no-clamp", dec.no_clamp, "Keep negative features");
  c_dec->add_option("--threads", dec.threads, "Worker threads (0: all cores)");

  ExplainArgs exp;
  auto* c_exp = app.add_subcommand("explain", "Logits, contributions and heatmaps for one image");
  c_exp->add_option("--archive", exp.archive)->required();
  c_exp->add_option("--image", exp.image, "Image id")->required();
  c_exp->add_option("--class", exp.cls, "Class whose prototypes to render (default: predicted)");
  c_exp->add_option("--out", exp.out)->required();
  c_exp->add_option("--manifest", exp.manifest, "Override the manifest recorded in the archive");
  c_exp->add_option("--upsample", exp.upsample, "Integer upsampling factor for PGM output")
      ->check(CLI::PositiveNumber);

  MetricsArgs met;
  auto* c_met = app.add_subcommand("metrics", "Consistency and stability scores");
  c_met->add_option("--archive", met.archive)->required();
  c_met->add_option("--manifest", met.manifest, "Dataset manifest (default: recorded in archive)");
  c_met->add_option("--out", met.out)->required();
  c_met->add_option("--threshold", met.threshold, "Region threshold as a fraction of the max")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  c_met->add_option("--tau", met.tau, "Share required for consistency and stability")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();

  ServeArgs srv;
  auto* c_srv = app.add_subcommand("serve", "JSON API for interactive intervention");
  c_srv->add_option("--archive", srv.archive)->required();
  c_srv->add_option("--manifest", srv.manifest, "Dataset manifest (default: recorded in archive)");
  c_srv->add_option("--port", srv.port)->check(CLI::Range(1, 65535))->capture_default_str();
  c_srv->add_option("--host", srv.host)->capture_default_str();
  c_srv->add_option("--report", srv.report, "report.json with prototype verdicts");
  c_srv->add_option("--static", srv.static_dir, "Directory of UI assets served at /");

  SynthArgs syn;
  auto* c_syn = app.add_subcommand("synth", "Write a synthetic planted-parts dataset");
  c_syn->add_option("--out", syn.out)->required();
  c_syn->add_option("--classes", syn.spec.classes)->capture_default_str();
  c_syn->add_option("--images", syn.spec.images)->capture_default_str();
  c_syn->add_option("--size", syn.spec.H, "Feature map height and width")->capture_default_str();
  c_syn->add_option("--channels", syn.spec.D)->capture_default_str();
  c_syn->add_option("--parts", syn.spec.parts)->capture_default_str();
  c_syn->add_option("--perturb", syn.spec.perturb_sigma, "Noise sigma of the perturbed copy")->capture_default_str();
  c_syn->add_option("--seed", syn.spec.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kInputError;
  }

  if (c_dec->parsed()) return run_decompose(dec);
  if (c_exp->parsed()) return run_explain(exp);
  if (c_met->parsed()) return run_metrics(met);
  if (c_srv->parsed()) return run_serve(srv);
  syn.spec.W = syn.spec.H;
  return run_synth(syn);
}
