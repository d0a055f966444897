#include <gtest/gtest.h>

#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

#include <random>

#include "chestnut/filtergen.hpp"
#include "chestnut/syscall_table.hpp"

using namespace chestnut;

namespace {

Allowlist random_allowlist(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(0, 349);
  std::uniform_int_distribution<std::uint32_t> nr(0, kMaxSyscallNumber - 1);
  std::bernoulli_distribution dense(0.2);
  Allowlist a;
  if (dense(rng)) {
    // Contiguous runs stress the tree boundaries.
    std::uint32_t lo = nr(rng), hi = std::min(kMaxSyscallNumber - 1, lo + static_cast<std::uint32_t>(len(rng)));
    for (std::uint32_t n = lo; n <= hi; ++n) a.numbers.insert(n);
  } else {
    for (std::size_t k = len(rng); k > 0; --k) a.numbers.insert(nr(rng));
  }
  return a;
}

Allowlist full_table() {
  Allowlist a;
  for (std::uint32_t n = 0; n < kMaxSyscallNumber; ++n)
    if (is_known_syscall(n)) a.numbers.insert(n);
  return a;
}

}  // namespace

// Oracle: plain set membership.
TEST(FilterProperty, MembershipOn1000Allowlists) {
  std::mt19937_64 rng(31337);
  const Verdict deny = errno_action(1234);
  for (int round = 0; round < 1000; ++round) {
    const auto list = random_allowlist(rng);
    const auto f = build_filter(list, round % 2 ? deny : kill_process());
    for (std::uint32_t nr = 0; nr < kMaxSyscallNumber; ++nr) {
      const auto v = interpret(f, kAuditArchX86_64, nr);
      ASSERT_EQ(v.action == Action::Allow, list.numbers.contains(nr))
          << "round " << round << " nr " << nr;
      if (v.action != Action::Allow) {
        ASSERT_EQ(v, f.default_action);
      }
    }
    // Out-of-table numbers and the x32 bit never match.
    for (std::uint32_t nr : {512u, 0x40000000u, 0x40000001u, 0xffffffffu})
      ASSERT_EQ(interpret(f, kAuditArchX86_64, nr), f.default_action);
  }
}

TEST(FilterProperty, ForeignArchIsDenied) {
  std::mt19937_64 rng(8);
  for (int round = 0; round < 100; ++round) {
    const auto f = build_filter(random_allowlist(rng));
    for (std::uint32_t arch : {0x40000003u /* i386 */, 0xc00000b7u /* aarch64 */, 0u})
      for (std::uint32_t nr = 0; nr < kMaxSyscallNumber; nr += 7)
        ASSERT_EQ(interpret(f, arch, nr), f.default_action);
  }
}

TEST(Filter, FullTableFitsKernelLimit) {
  const auto list = full_table();
  ASSERT_EQ(list.numbers.size(), 349u);
  const auto f = build_filter(list);
  EXPECT_LE(f.instructions.size(), kMaxBpfInstructions);
  Allowlist all;
  for (std::uint32_t n = 0; n < kMaxSyscallNumber; ++n) all.numbers.insert(n);
  EXPECT_LE(build_filter(all).instructions.size(), kMaxBpfInstructions);
}

TEST(Filter, EmptyAllowlistDeniesEverything) {
  const auto f = build_filter(Allowlist{});
  for (std::uint32_t nr = 0; nr < kMaxSyscallNumber; ++nr)
    ASSERT_EQ(interpret(f, kAuditArchX86_64, nr).action, Action::KillProcess);
}

TEST(Filter, RejectsBadAllowlists) {
  Allowlist big;
  big.numbers.insert(kMaxSyscallNumber);
  EXPECT_THROW(build_filter(big), Error);
  Allowlist arm;
  arm.arch = Arch::aarch64;
  try {
    build_filter(arm);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::UnsupportedArch);
  }
}

TEST(Filter, PinnedRuleMatchesExactly) {
  Allowlist list;
  list.numbers = SyscallSet{60, 231};
  PinnedRule exec{59, 0x401000, {{0, 0xdeadbeef00000001ull}}};
  const auto f = build_filter(list, kill_process(), {exec});
  SeccompData d;
  d.nr = 59;
  d.instruction_pointer = 0x401000;
  d.args[0] = 0xdeadbeef00000001ull;
  EXPECT_EQ(interpret(f.instructions, d).action, Action::Allow);
  d.args[0] = 0x00000000'00000001ull;  // same low half
  EXPECT_EQ(interpret(f.instructions, d).action, Action::KillProcess);
  d.args[0] = 0xdeadbeef00000001ull;
  d.instruction_pointer = 0x401002;
  EXPECT_EQ(interpret(f.instructions, d).action, Action::KillProcess);
  // The allowlist itself is unchanged by the pinned prefix.
  for (std::uint32_t nr = 0; nr < kMaxSyscallNumber; ++nr)
    if (nr != 59) {
      EXPECT_EQ(interpret(f, kAuditArchX86_64, nr).action == Action::Allow,
                list.numbers.contains(nr));
    }
}

TEST(Filter, TooManyPinnedRules) {
  std::vector<PinnedRule> rules;
  for (std::uint32_t k = 0; k < 400; ++k) rules.push_back({k, 0x1000 + k, {{0, k}, {1, k}}});
  try {
    build_filter(full_table(), kill_process(), rules);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::TooManyRules);
  }
}

TEST(Filter, DefaultActionParsing) {
  EXPECT_EQ(parse_default_action("kill"), kill_process());
  EXPECT_EQ(parse_default_action("errno"), errno_action(EPERM));
  EXPECT_EQ(parse_default_action("errno:38"), errno_action(38));
  EXPECT_EQ(parse_default_action("trace").action, Action::Trace);
  EXPECT_THROW(parse_default_action("errno:99999"), Error);
  EXPECT_THROW(parse_default_action("allow"), Error);
}

// The kernel's verdict on denied numbers matches the interpreter. Denied
// calls never execute, so they are safe to issue; allowed numbers are
// checked only through getpid. Only table numbers are issued: some hosts
// trap unassigned numbers (335 raises SIGILL here) before seccomp runs.
TEST(Filter, KernelAgreesOnDeniedNumbers) {
  std::mt19937_64 rng(77);
  for (int round = 0; round < 20; ++round) {
    auto list = random_allowlist(rng);
    list.numbers.insert(39);
    list.numbers.insert(231);
    const std::uint16_t code = static_cast<std::uint16_t>(200 + round);
    const auto f = build_filter(list, errno_action(code));

    pid_t pid = ::fork();
    if (pid == 0) {
      ::prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0);
      sock_fprog fp{static_cast<unsigned short>(f.instructions.size()),
                    reinterpret_cast<sock_filter*>(const_cast<BpfInsn*>(f.instructions.data()))};
      if (::syscall(SYS_seccomp, SECCOMP_SET_MODE_FILTER, 0, &fp) != 0) ::syscall(SYS_exit_group, 2);
      int bad = 0;
      for (std::uint32_t n = 0; n < kMaxSyscallNumber; ++n) {
        if (list.numbers.contains(n) || !is_known_syscall(n)) continue;
        long rc = ::syscall(n, 0, 0, 0, 0, 0, 0);
        bad += !(rc == -1 && errno == code);
      }
      bad += ::syscall(SYS_getpid) <= 0;
      ::syscall(SYS_exit_group, bad ? 1 : 0);
    }
    int status = 0;
    ::waitpid(pid, &status, 0);
    ASSERT_TRUE(WIFEXITED(status)) << "round " << round << " signal " << WTERMSIG(status);
    EXPECT_EQ(WEXITSTATUS(status), 0) << "round " << round;
  }
}
