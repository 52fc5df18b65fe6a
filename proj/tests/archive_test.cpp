#include <gtest/gtest.h>

#include "pppn/archive.hpp"
#include "pppn/synthetic.hpp"
#include "test_util.hpp"

using namespace pppn;

namespace {

Archive run(const std::filesystem::path& manifest_path, const std::filesystem::path& head_path, RefineMode mode) {
  const auto m = load_manifest(manifest_path);
  const auto head = load_head(head_path, &m);
  DecomposeOptions opt;
  opt.k = 2;
  opt.mode = mode;
  opt.refine.max_iter = 20;
  opt.threads = 2;
  auto hd = decompose_head(m, head, opt);
  Archive a;
  a.manifest = manifest_path.string();
  a.head = head_path.string();
  a.options = opt;
  a.classes = std::move(hd.classes);
  for (const auto& c : a.classes) a.labels.push_back(m.entry(c.class_id).label);
  a.failures = std::move(hd.failures);
  return a;
}

SyntheticSpec tiny() {
  SyntheticSpec s;
  s.classes = 3;
  s.images = 4;
  s.H = s.W = 3;
  s.D = 12;
  s.parts = 2;
  return s;
}

}  // namespace

TEST(Archive, RoundTripPreservesEverything) {
  testutil::TempDir dir;
  const auto mpath = write_synthetic(make_synthetic(tiny()), dir.path() / "data");
  const auto a = run(mpath, dir.path() / "data" / "head.pptn", RefineMode::dynamic);
  ASSERT_EQ(a.classes.size(), 3u);
  write_archive(a, dir.path() / "arch");
  const auto b = read_archive(dir.path() / "arch");
  EXPECT_EQ(b.manifest, a.manifest);
  EXPECT_EQ(b.options.k, 2u);
  EXPECT_EQ(b.options.mode, RefineMode::dynamic);
  EXPECT_EQ(b.options.refine.max_iter, 20u);
  ASSERT_EQ(b.classes.size(), a.classes.size());
  for (std::size_t i = 0; i < a.classes.size(); ++i) {
    const auto &x = a.classes[i], &y = b.classes[i];
    EXPECT_EQ(x.class_id, y.class_id);
    EXPECT_EQ(x.P, y.P);
    EXPECT_EQ(x.alpha, y.alpha);
    EXPECT_EQ(x.R, y.R);
    EXPECT_EQ(x.r, y.r);
    EXPECT_EQ(x.p_tilde, y.p_tilde);
    EXPECT_EQ(x.v, y.v);
    EXPECT_EQ(x.nmf_trace, y.nmf_trace);
    EXPECT_EQ(x.objective_trace, y.objective_trace);
    EXPECT_EQ(b.labels[i], "class_" + std::to_string(x.class_id));
  }
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "arch" / "class_001" / "p_tilde.pptn"));
}

TEST(Archive, ByteIdenticalAcrossRuns) {
  testutil::TempDir dir;
  const auto mpath = write_synthetic(make_synthetic(tiny()), dir.path() / "data");
  const auto head = dir.path() / "data" / "head.pptn";
  write_archive(run(mpath, head, RefineMode::dynamic), dir.path() / "a");
  write_archive(run(mpath, head, RefineMode::dynamic), dir.path() / "b");
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir.path() / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), dir.path() / "a");
    EXPECT_EQ(testutil::read_bytes(e.path()), testutil::read_bytes(dir.path() / "b" / rel)) << rel;
  }
}

TEST(Archive, FailuresAreRecorded) {
  testutil::TempDir dir;
  const auto mpath = write_synthetic(make_synthetic(tiny()), dir.path() / "data");
  // A head with two rows leaves class 2 without weights.
  const auto m = load_manifest(mpath);
  auto head = load_head(dir.path() / "data" / "head.pptn", &m);
  head.rows.conservativeResize(2, head.rows.cols());
  DecomposeOptions opt;
  opt.k = 2;
  opt.mode = RefineMode::naive;
  auto hd = decompose_head(m, head, opt);
  ASSERT_EQ(hd.failures.size(), 1u);
  EXPECT_EQ(hd.failures[0].class_id, 2);
  Archive a;
  a.options = opt;
  a.classes = hd.classes;
  a.labels = {"class_0", "class_1"};
  a.failures = hd.failures;
  write_archive(a, dir.path() / "arch");
  const auto b = read_archive(dir.path() / "arch");
  ASSERT_EQ(b.failures.size(), 1u);
  EXPECT_NE(b.failures[0].message.find("head row"), std::string::npos);
  EXPECT_EQ(b.find(1)->class_id, 1);
  EXPECT_EQ(b.find(2), nullptr);
}

TEST(Archive, RejectsForeignJson) {
  testutil::TempDir dir;
  testutil::write_text(dir.path() / "decomposition.json", R"({"format": "other"})");
  EXPECT_THROW(read_archive(dir.path()), DataError);
  EXPECT_THROW(read_archive(dir.path() / "missing"), DataError);
}
