#include <gtest/gtest.h>

#include <fstream>

#include <nlohmann/json.hpp>

#include "support.hpp"

namespace fs = std::filesystem;
using testsupport::fixture;
using testsupport::run_capture;

namespace {

std::string cli(const std::string& args) { return std::string(CHESTNUT_CLI) + " " + args; }

// stdout only, for output that must parse as JSON.
testsupport::Captured quiet(const std::string& args) {
  return run_capture("{ " + cli(args) + " 2>/dev/null; }");
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run_capture(cli("")).status, 2);
  EXPECT_EQ(run_capture(cli("frobnicate")).status, 2);
  EXPECT_EQ(run_capture(cli("extract")).status, 2);
  EXPECT_EQ(run_capture(cli("extract " + fixture("hello").string() + " --budget x")).status, 2);
  EXPECT_EQ(run_capture(cli("--version")).status, 0);
  EXPECT_EQ(run_capture(cli("--help")).status, 0);
}

TEST(Cli, ExtractJson) {
  auto r = quiet("--json extract " + q(fixture("chain31")) + " --budget 35");
  ASSERT_EQ(r.status, 0) << r.out;
  auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j.at("syscalls"), (std::vector<int>{39, 60}));
  auto d = quiet("--json extract " + q(fixture("chain31")));
  EXPECT_EQ(nlohmann::json::parse(d.out).at("syscalls"), (std::vector<int>{60}));
}

TEST(Cli, AnalysisErrorsExitThree) {
  testsupport::TempDir tmp;
  write_text(tmp / "text", "plain text\n");
  EXPECT_EQ(run_capture(cli("extract " + q(tmp / "text"))).status, 3);
  EXPECT_EQ(run_capture(cli("extract /nonexistent/file")).status, 3);
  EXPECT_EQ(run_capture(cli("--arch aarch64 extract " + q(fixture("hello")))).status, 3);
  EXPECT_EQ(run_capture(cli("--arch sparc extract " + q(fixture("hello")))).status, 2);
  write_text(tmp / "bad.json", R"({"arch": "x86_64", "numbers": [60, 1]})");
  EXPECT_EQ(run_capture(cli("genfilter --allowlist " + q(tmp / "bad.json"))).status, 3);
  EXPECT_EQ(run_capture(cli("merge --root " + q(fixture("dynmain")) +
                            " --no-default-paths --strict"))
                .status,
            3);
}

TEST(Cli, EnforcementErrorsExitFour) {
  testsupport::TempDir tmp;
  write_text(tmp / "a.json", R"({"arch": "x86_64", "numbers": [1, 60, 231]})");
  auto r = run_capture(cli("launch --allowlist " + q(tmp / "a.json") + " -- /nonexistent/prog"));
  EXPECT_EQ(r.status, 4) << r.out;
}

TEST(Cli, LaunchReturnsTargetStatus) {
  testsupport::TempDir tmp;
  write_text(tmp / "ok.json", R"({"arch": "x86_64", "numbers": [1, 60, 231]})");
  write_text(tmp / "nowrite.json", R"({"arch": "x86_64", "numbers": [60, 231]})");
  auto ok = run_capture(cli("launch --allowlist " + q(tmp / "ok.json") + " -- " + q(fixture("hello"))));
  EXPECT_EQ(ok.status, 0);
  EXPECT_EQ(ok.out, "hi\n");
  auto killed = run_capture(cli("launch --allowlist " + q(tmp / "nowrite.json") + " -- " +
                                q(fixture("hello"))));
  EXPECT_EQ(killed.status, 128 + 31);
  auto err = run_capture(cli("launch --mode enforce-errno --allowlist " + q(tmp / "nowrite.json") +
                             " -- " + q(fixture("hello"))));
  EXPECT_EQ(err.status, 1);
}

TEST(Cli, CallgraphDocuments) {
  testsupport::TempDir tmp;
  write_text(tmp / "a.cgdoc.json", R"js({"version": 1, "units": [{"name": "a.c", "functions": [
      {"name": "main", "signature": "int()", "direct_calls": ["w"], "syscalls": [231]},
      {"name": "w", "signature": "void()", "syscalls": [1]},
      {"name": "dead", "signature": "void()", "syscalls": [59]}]}]})js");
  auto r = quiet("--json callgraph " + q(tmp / "a.cgdoc.json") + " --entries main");
  ASSERT_EQ(r.status, 0) << r.out;
  EXPECT_EQ(nlohmann::json::parse(r.out).at("syscalls"), (std::vector<int>{1, 231}));
  EXPECT_EQ(run_capture(cli("callgraph " + q(tmp / "a.cgdoc.json") + " --entries nope")).status, 3);
}

TEST(Cli, PipelineSummaryFlags) {
  testsupport::TempDir tmp;
  auto h = quiet("--json pipeline --out-dir " + q(tmp / "h") + " " + q(fixture("hello")));
  ASSERT_EQ(h.status, 0) << h.out;
  auto hj = nlohmann::json::parse(h.out);
  EXPECT_EQ(hj.at("exec_blocked"), true);
  EXPECT_EQ(hj.at("mprotect_blocked"), true);

  auto e = quiet("--json pipeline --out-dir " + q(tmp / "e") + " " + q(fixture("execer")));
  ASSERT_EQ(e.status, 0) << e.out;
  EXPECT_EQ(nlohmann::json::parse(e.out).at("exec_blocked"), false);

  auto run = run_capture(q(tmp / "h" / "launch.sh"));
  EXPECT_EQ(run.status, 0);
}

TEST(Cli, MergeRefineEvaluateChain) {
  testsupport::TempDir tmp;
  auto m = quiet("--json merge --root " + q(fixture("forker")) + " --out " + q(tmp / "s.json"));
  ASSERT_EQ(m.status, 0) << m.out;
  auto t = quiet("--json trace --out " + q(tmp / "t.json") + " -- " + q(fixture("forker")));
  ASSERT_EQ(t.status, 0) << t.out;
  auto r = quiet("--json refine --static " + q(tmp / "s.json") + " --report " + q(tmp / "t.json") +
                 " --out " + q(tmp / "f.json"));
  ASSERT_EQ(r.status, 0) << r.out;
  auto fin = nlohmann::json::parse(std::ifstream(tmp / "f.json"));
  EXPECT_EQ(fin.at("numbers"), (std::vector<int>{39, 57, 61, 231}));

  auto ev = quiet("--json evaluate --allowlist " + q(tmp / "f.json") + " --samples " +
                  q(fs::path(CHESTNUT_DATA_DIR) / "cve_samples.json"));
  ASSERT_EQ(ev.status, 0) << ev.out;
  auto ej = nlohmann::json::parse(ev.out);
  const double fully = ej.at("fully_mitigated_pct"), sub = ej.at("subvariant_mitigated_pct");
  EXPECT_LE(fully, sub);
}
