#include <gtest/gtest.h>

#include "chestnut/pipeline.hpp"
#include "support.hpp"

using namespace chestnut;
using testsupport::fixture;

namespace {

PipelineConfig config(const std::string& name, const testsupport::TempDir& tmp) {
  PipelineConfig cfg;
  cfg.target = fixture(name);
  cfg.out_dir = tmp / "out";
  cfg.search_paths = {CHESTNUT_FIXTURE_DIR};
  cfg.use_environment_paths = false;
  cfg.launcher = CHESTNUT_CLI;
  cfg.installer = fs::path(CHESTNUT_INSTALLER);
  return cfg;
}

std::set<std::string> names(const std::vector<fs::path>& paths, const fs::path& base) {
  std::set<std::string> out;
  for (const auto& p : paths) out.insert(fs::relative(p, base).string());
  return out;
}

}  // namespace

TEST(Pipeline, StaticProgramArtifacts) {
  testsupport::TempDir tmp;
  auto cfg = config("hello", tmp);
  auto s = run_pipeline(cfg);
  EXPECT_EQ(s.kind, to_string(ImageKind::ExecutableStatic));
  EXPECT_EQ(s.static_set, (SyscallSet{1, 60, 231}));
  EXPECT_EQ(s.final_set, s.static_set);
  EXPECT_EQ(s.blocked, 349u - 3u);
  EXPECT_TRUE(s.exec_blocked);
  EXPECT_TRUE(s.mprotect_blocked);
  EXPECT_FALSE(s.observed);
  EXPECT_EQ(names(s.artifacts, cfg.out_dir),
            (std::set<std::string>{"extract.json", "merge.json", "allowlist.json", "filter.bpf",
                                   "launch.sh", "summary.json"}));
  for (const auto& p : s.artifacts) EXPECT_TRUE(fs::exists(p)) << p;

  auto list = load_allowlist(cfg.out_dir / "allowlist.json");
  EXPECT_EQ(list.numbers, s.final_set);
  auto raw = detail::read_file(cfg.out_dir / "filter.bpf");
  EXPECT_EQ(decode_program(raw), build_filter(list).instructions);

  auto summary = read_json_file(cfg.out_dir / "summary.json");
  EXPECT_EQ(summary.at("exec_blocked"), true);

  auto run = testsupport::run_capture((cfg.out_dir / "launch.sh").string());
  EXPECT_EQ(run.status, 0);
  EXPECT_EQ(run.out, "hi\n");
}

TEST(Pipeline, ExecIsReportedAllowed) {
  testsupport::TempDir tmp;
  auto s = run_pipeline(config("execer", tmp));
  EXPECT_TRUE(s.final_set.contains(59));
  EXPECT_FALSE(s.exec_blocked);
  EXPECT_TRUE(s.mprotect_blocked);
  bool warned = false;
  for (const auto& w : s.warnings) warned |= w.find("exec") != std::string::npos;
  EXPECT_TRUE(warned);
}

TEST(Pipeline, TraceRefinement) {
  testsupport::TempDir tmp;
  auto cfg = config("hello", tmp);
  cfg.with_trace = true;
  auto s = run_pipeline(cfg);
  ASSERT_TRUE(s.observed);
  EXPECT_EQ(*s.observed, (SyscallSet{1, 231}));
  EXPECT_DOUBLE_EQ(*s.overapproximation, 1.0 / 3.0);
  EXPECT_EQ(s.final_set, (SyscallSet{1, 60, 231}));
  EXPECT_TRUE(fs::exists(cfg.out_dir / "trace.json"));
  EXPECT_TRUE(fs::exists(cfg.out_dir / "refine.json"));

  testsupport::TempDir tmp2;
  auto strict = config("hello", tmp2);
  strict.with_trace = true;
  strict.policy = RefinePolicy::AddAndRemove;
  EXPECT_EQ(run_pipeline(strict).final_set, (SyscallSet{1, 231}));
}

TEST(Pipeline, ForkedChildNeedsRefinement) {
  testsupport::TempDir before_dir, after_dir;
  auto before = run_pipeline(config("forker", before_dir));
  EXPECT_EQ(before.final_set, (SyscallSet{57, 61, 231}));
  auto r0 = testsupport::run_capture((before_dir / "out" / "launch.sh").string());
  EXPECT_NE(r0.status, 0);

  auto cfg = config("forker", after_dir);
  cfg.with_trace = true;
  auto after = run_pipeline(cfg);
  EXPECT_EQ(after.final_set, (SyscallSet{39, 57, 61, 231}));
  EXPECT_TRUE(after.observed->is_subset_of(after.final_set));
  EXPECT_DOUBLE_EQ(*after.overapproximation, 0.0);
  auto r1 = testsupport::run_capture((after_dir / "out" / "launch.sh").string());
  EXPECT_EQ(r1.status, 0);
}

TEST(Pipeline, DynamicProgramWithPatch) {
  testsupport::TempDir tmp;
  auto cfg = config("dynmain", tmp);
  cfg.patch = true;
  auto s = run_pipeline(cfg);
  EXPECT_EQ(s.libraries.front(), "libfx.so");
  for (std::uint32_t n : {1u, 39u, 231u}) EXPECT_TRUE(s.final_set.contains(n)) << n;
  EXPECT_TRUE(fs::exists(cfg.out_dir / "maps" / "libfx.so.map.json"));
  EXPECT_TRUE(fs::exists(cfg.out_dir / "maps" / "libfy.so.map.json"));

  auto patched = testsupport::run_capture((cfg.out_dir / "dynmain.chestnut").string());
  EXPECT_EQ(patched.status, 0);
  EXPECT_EQ(patched.out, "dyn\n");
  auto launched = testsupport::run_capture((cfg.out_dir / "launch.sh").string());
  EXPECT_EQ(launched.status, 0);

  // Reusing the written maps in strict mode reproduces the set.
  testsupport::TempDir again;
  auto reuse = config("dynmain", again);
  reuse.lib_map_dir = cfg.out_dir / "maps";
  EXPECT_EQ(run_pipeline(reuse).final_set, s.final_set);
}

TEST(Pipeline, FailureLeavesOnlyPartialArtifacts) {
  testsupport::TempDir tmp, empty;
  auto cfg = config("dynmain", tmp);
  cfg.search_paths = {empty.path()};
  cfg.use_builtin_paths = false;
  try {
    run_pipeline(cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingLibrary);
  }
  EXPECT_FALSE(fs::exists(cfg.out_dir / "extract.json"));
  EXPECT_TRUE(fs::exists(cfg.out_dir / "extract.json.partial"));
  EXPECT_FALSE(fs::exists(cfg.out_dir / "summary.json"));
}

TEST(Pipeline, RejectsNonElf) {
  testsupport::TempDir tmp;
  auto cfg = config("hello", tmp);
  cfg.target = fs::path(CHESTNUT_DATA_DIR) / "cve_samples.json";
  try {
    run_pipeline(cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NotElf);
  }
}
