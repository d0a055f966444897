#pragma once

#include <sys/prctl.h>
#include <sys/syscall.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "chestnut/allowlist.hpp"
#include "chestnut/bpf.hpp"
#include "chestnut/error.hpp"

namespace chestnut {

inline Verdict kill_process() { return {Action::KillProcess, 0}; }
inline Verdict errno_action(std::uint16_t e = EPERM) { return {Action::Errno, e}; }
inline Verdict trace_action() { return {Action::Trace, 0}; }

// "kill", "errno", "errno:N", "trace", "log".
inline Verdict parse_default_action(const std::string& s) {
  if (s == "kill" || s == "kill-process") return kill_process();
  if (s == "errno") return errno_action();
  if (s.rfind("errno:", 0) == 0) {
    try {
      auto v = std::stoul(s.substr(6));
      if (v <= 0xFFFF) return errno_action(static_cast<std::uint16_t>(v));
    } catch (const std::exception&) {
    }
    throw Error(ErrorKind::InvalidFilter, "bad errno action " + s);
  }
  if (s == "trace") return trace_action();
  if (s == "log") return {Action::Log, 0};
  throw Error(ErrorKind::InvalidFilter, "unknown default action " + s);
}

// Allows one syscall only when the instruction pointer and selected
// arguments match exactly (64-bit compares).
struct PinnedRule {
  std::uint32_t nr = 0;
  std::optional<std::uint64_t> instruction_pointer;
  std::vector<std::pair<unsigned, std::uint64_t>> args;
};

struct FilterProgram {
  std::vector<BpfInsn> instructions;
  Verdict default_action = kill_process();
  std::uint32_t arch_token = kAuditArchX86_64;
};

namespace detail {

inline constexpr std::size_t kLeafSize = 4;

inline void emit_pinned(BpfAssembler& as, const PinnedRule& r) {
  auto next = as.new_label();
  auto cmp64 = [&](std::uint32_t off, std::uint64_t v) {
    as.load_abs(off);
    as.jump(BPF_JEQ, static_cast<std::uint32_t>(v), std::nullopt, next);
    as.load_abs(off + 4);
    as.jump(BPF_JEQ, static_cast<std::uint32_t>(v >> 32), std::nullopt, next);
  };
  as.jump(BPF_JEQ, r.nr, std::nullopt, next);
  if (r.instruction_pointer) cmp64(kOffIp, *r.instruction_pointer);
  for (const auto& [idx, val] : r.args) {
    if (idx >= 6) throw Error(ErrorKind::InvalidFilter, "argument index out of range");
    cmp64(kOffArgs + 8 * idx, val);
  }
  as.ret(SECCOMP_RET_ALLOW);
  as.bind(next);
  as.load_abs(kOffNr);
}

// Balanced binary search: inner nodes split on the median with
// "jge pivot; ja right", leaves test up to kLeafSize numbers by equality.
inline void emit_tree(BpfAssembler& as, std::span<const std::uint32_t> nums,
                      std::uint32_t deflt) {
  if (nums.size() <= kLeafSize) {
    auto allow = as.new_label();
    for (auto n : nums) as.jump(BPF_JEQ, n, allow, std::nullopt);
    as.ret(deflt);
    if (!nums.empty()) {
      as.bind(allow);
      as.ret(SECCOMP_RET_ALLOW);
    }
    return;
  }
  const std::size_t mid = nums.size() / 2;
  auto left = as.new_label(), right = as.new_label();
  as.jump(BPF_JGE, nums[mid], std::nullopt, left);
  as.jump_always(right);
  as.bind(left);
  emit_tree(as, nums.subspan(0, mid), deflt);
  as.bind(right);
  emit_tree(as, nums.subspan(mid), deflt);
}

}  // namespace detail

// Program shape: arch check (mismatch -> default), optional pinned rules,
// then a binary search over the allowlist.
inline FilterProgram build_filter(const Allowlist& list, Verdict default_action = kill_process(),
                                  const std::vector<PinnedRule>& pinned = {}) {
  validate(list);
  FilterProgram fp;
  fp.default_action = default_action;
  const std::uint32_t deflt = seccomp_ret(default_action);
  BpfAssembler as;
  auto arch_ok = as.new_label();
  as.load_abs(kOffArch);
  as.jump(BPF_JEQ, fp.arch_token, arch_ok, std::nullopt);
  as.ret(deflt);
  as.bind(arch_ok);
  as.load_abs(kOffNr);
  for (const auto& r : pinned) detail::emit_pinned(as, r);
  detail::emit_tree(as, list.numbers.values(), deflt);
  fp.instructions = as.finish();
  if (fp.instructions.size() > kMaxBpfInstructions)
    throw Error(ErrorKind::TooManyRules, std::to_string(fp.instructions.size()) +
                                             " instructions exceed the kernel limit");
  validate_program(fp.instructions);
  return fp;
}

inline Verdict interpret(const FilterProgram& p, std::uint32_t arch, std::uint32_t nr) {
  return interpret(p.instructions, arch, nr);
}

// Sets no-new-privileges and loads the program for the calling thread.
inline void install_filter(const std::vector<BpfInsn>& prog) {
  validate_program(prog);
  if (::prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0)
    throw Error(ErrorKind::LoadRejected, std::string("PR_SET_NO_NEW_PRIVS: ") + std::strerror(errno));
  sock_fprog fprog{static_cast<unsigned short>(prog.size()),
                   reinterpret_cast<sock_filter*>(const_cast<BpfInsn*>(prog.data()))};
  if (::syscall(SYS_seccomp, SECCOMP_SET_MODE_FILTER, 0, &fprog) != 0)
    throw Error(ErrorKind::LoadRejected, std::string("seccomp: ") + std::strerror(errno));
}

}  // namespace chestnut
