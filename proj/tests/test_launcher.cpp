#include <gtest/gtest.h>

#include <csignal>

#include "chestnut/launcher.hpp"
#include "chestnut/merge.hpp"
#include "support.hpp"

using namespace chestnut;
using testsupport::fixture;

namespace {

Allowlist list_of(SyscallSet s) {
  Allowlist a;
  a.numbers = std::move(s);
  return a;
}

// Shell-style code for a launcher status, comparable with run_capture.
int shell_code(const ExitStatus& s) { return s.exited ? s.code : 128 + s.signal; }

SyscallSet merged_set(const std::string& name) {
  auto img = load_image(fixture(name));
  auto root = analyze_binary(img);
  auto c = resolve_dependencies(img, {CHESTNUT_FIXTURE_DIR}, Strictness::Permissive);
  return merge_sets(c, root.map.init, {}, Strictness::Permissive).syscalls;
}

}  // namespace

TEST(Launch, RunsUnderExactStaticSet) {
  auto r = launch(fixture("hello"), {}, list_of({1, 60, 231}), LaunchMode::EnforceKill);
  EXPECT_TRUE(r.status.exited);
  EXPECT_EQ(r.status.code, 0);
}

TEST(Launch, MissingWriteIsKilled) {
  auto r = launch(fixture("hello"), {}, list_of({60, 231}), LaunchMode::EnforceKill);
  EXPECT_FALSE(r.status.exited);
  EXPECT_EQ(r.status.signal, SIGSYS);
}

TEST(Launch, ErrnoModeFailsTheCall) {
  // hello exits 1 when write does not return 3.
  auto r = launch(fixture("hello"), {}, list_of({60, 231}), LaunchMode::EnforceErrno, EACCES);
  EXPECT_TRUE(r.status.exited);
  EXPECT_EQ(r.status.code, 1);
}

TEST(Launch, LogOnlyReportsAndRuns) {
  if (!seccomp_available()) GTEST_SKIP() << "seccomp unavailable";
  auto r = launch(fixture("hello"), {}, list_of({231}), LaunchMode::LogOnly);
  EXPECT_TRUE(r.status.exited);
  EXPECT_EQ(r.status.code, 0);
  EXPECT_EQ(r.violations, (SyscallSet{1}));
  EXPECT_TRUE(r.startup_violations.empty());
}

TEST(Launch, ExecBootstrapIsNotAGeneralExecAllowance) {
  // execer calls execve itself; without 59 in the list it is killed even
  // though the launcher's own execve went through.
  auto stat = merged_set("execer");
  ASSERT_TRUE(stat.contains(59));
  EXPECT_EQ(launch(fixture("execer"), {}, list_of(stat), LaunchMode::EnforceKill).status.code, 0);
  auto r = launch(fixture("execer"), {}, list_of(stat - SyscallSet{59}), LaunchMode::EnforceKill);
  EXPECT_EQ(r.status.signal, SIGSYS);
}

TEST(Launch, RejectsBadRequests) {
  auto kind_of = [](auto&& fn) -> std::optional<ErrorKind> {
    try {
      fn();
    } catch (const Error& e) {
      return e.kind();
    }
    return std::nullopt;
  };
  EXPECT_EQ(kind_of([] {
              launch("/nonexistent/chestnut-target", {}, list_of({60}), LaunchMode::EnforceKill);
            }),
            ErrorKind::TargetNotFound);
  EXPECT_EQ(kind_of([] { launch(fixture("hello"), {}, Allowlist{}, LaunchMode::EnforceKill); }),
            ErrorKind::InvalidAllowlist);
  Allowlist arm = list_of({1});
  arm.arch = Arch::aarch64;
  EXPECT_EQ(kind_of([&] { launch(fixture("hello"), {}, arm, LaunchMode::EnforceKill); }),
            ErrorKind::UnsupportedArch);
  EXPECT_THROW(parse_launch_mode("sometimes"), Error);
}

TEST(Patch, SameVerdictAsLauncher) {
  testsupport::TempDir tmp;
  const auto full = merged_set("dynmain");
  for (const auto& set : {full, full - SyscallSet{1}}) {
    auto out = patch(load_image(fixture("dynmain")), set, CHESTNUT_INSTALLER, tmp / "patched");
    auto patched = testsupport::run_capture(out.string());
    auto launched = launch(fixture("dynmain"), {}, list_of(set), LaunchMode::EnforceKill);
    EXPECT_EQ(patched.status, shell_code(launched.status)) << "set size " << set.size();
    if (set == full) {
      EXPECT_EQ(patched.status, 0);
      EXPECT_EQ(patched.out, "dyn\n");
    } else {
      EXPECT_EQ(patched.status, 128 + SIGSYS);
    }
  }
}

TEST(Patch, CarriesTheAllowlist) {
  testsupport::TempDir tmp;
  const SyscallSet set{1, 39, 60, 231};
  auto out = patch(load_image(fixture("dynmain")), set, CHESTNUT_INSTALLER, tmp / "p");
  auto img = load_image(out);
  auto note = read_annotation(img);
  ASSERT_TRUE(note);
  EXPECT_EQ(decode_syscall_list(note->payload), set);
  ASSERT_FALSE(img.dynamic.needed.empty());
  EXPECT_EQ(fs::path(img.dynamic.needed.front()).filename(), "libchestnut.so");
}

TEST(Patch, InstallerFailsClosedWithoutNote) {
  testsupport::TempDir tmp;
  auto out = inject_dependency(load_image(fixture("dynmain")), CHESTNUT_INSTALLER, tmp / "bare");
  auto run = testsupport::run_capture(out.string());
  EXPECT_EQ(run.status, 126);
  EXPECT_EQ(run.out.find("dyn\n"), std::string::npos);
}

TEST(Patch, RejectsStaticAndEmpty) {
  testsupport::TempDir tmp;
  try {
    patch(load_image(fixture("hello")), {1, 60, 231}, CHESTNUT_INSTALLER, tmp / "h");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::StaticBinary);
  }
  EXPECT_THROW(patch(load_image(fixture("dynmain")), {}, CHESTNUT_INSTALLER, tmp / "d"), Error);
}
