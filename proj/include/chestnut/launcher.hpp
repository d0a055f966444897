#pragma once

#include <fcntl.h>
#include <sys/prctl.h>
#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "chestnut/allowlist.hpp"
#include "chestnut/elf.hpp"
#include "chestnut/filtergen.hpp"
#include "chestnut/process.hpp"
#include "chestnut/tracer.hpp"

// execve issued from one fixed instruction. The launcher's filter allows
// syscall 59 only from here and only for the target's path pointer, so the
// launcher can exec its target without the target inheriting a general
// exec permission.
extern "C" long chestnut_exec_trampoline(const char* path, char* const argv[],
                                         char* const envp[]);
extern "C" const char chestnut_exec_trampoline_ret[];

asm(R"(
  .pushsection .text.chestnut_exec_trampoline,"axG",@progbits,chestnut_exec_trampoline,comdat
  .globl chestnut_exec_trampoline
  .hidden chestnut_exec_trampoline
  .type chestnut_exec_trampoline,@function
  .globl chestnut_exec_trampoline_ret
  .hidden chestnut_exec_trampoline_ret
chestnut_exec_trampoline:
  movl $59, %eax
  syscall
chestnut_exec_trampoline_ret:
  ret
  .size chestnut_exec_trampoline, .-chestnut_exec_trampoline
  .popsection
)");

namespace chestnut {

inline constexpr const char* kEnvPrefix = "CHESTNUT_";
// Set in the environment of a patched binary, skips the installer. Never
// passed through by the launcher.
inline constexpr const char* kSkipInstallEnv = "CHESTNUT_SKIP_INSTALL";

enum class LaunchMode { EnforceKill, EnforceErrno, LogOnly };

inline LaunchMode parse_launch_mode(const std::string& s) {
  if (s == "enforce-kill" || s == "kill") return LaunchMode::EnforceKill;
  if (s == "enforce-errno" || s == "errno") return LaunchMode::EnforceErrno;
  if (s == "log-only" || s == "log") return LaunchMode::LogOnly;
  throw Error(ErrorKind::InvalidFilter, "unknown launch mode " + s);
}

struct LaunchResult {
  ExitStatus status;
  // Log-only mode: syscalls outside the allowlist, after and before entry.
  SyscallSet violations;
  SyscallSet startup_violations;
};

inline PinnedRule exec_bootstrap_rule(const char* path) {
  PinnedRule r;
  r.nr = 59;
  r.instruction_pointer = reinterpret_cast<std::uint64_t>(&chestnut_exec_trampoline_ret[0]);
  r.args.emplace_back(0, reinterpret_cast<std::uint64_t>(path));
  return r;
}

// Installs no-new-privileges and the filter in a child, then replaces the
// child with the target; waits for it. Log-only mode uses a TRACE default
// action with this process as tracer, so violations are reported and run.
inline LaunchResult launch(const fs::path& target, const std::vector<std::string>& args,
                           const Allowlist& list, LaunchMode mode,
                           std::uint16_t errno_value = EPERM) {
  validate(list);
  if (list.numbers.empty())
    throw Error(ErrorKind::InvalidAllowlist, "empty allowlist cannot launch anything");
  const fs::path exe = resolve_executable(target.string());
  LaunchResult res;

  if (mode == LaunchMode::LogOnly) {
    PtraceConfig cfg;
    cfg.target = exe;
    cfg.args = args;
    cfg.mechanism = TraceMechanism::Seccomp;
    cfg.filter = build_filter(list, trace_action()).instructions;
    cfg.drop_env_prefixes = {kEnvPrefix};
    TraceReport rep;
    try {
      rep = trace(cfg, {});
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::AttachFailed) throw Error(ErrorKind::LoadRejected, e.what());
      throw;
    }
    res.violations = rep.observed;
    res.startup_violations = rep.startup;
    if (rep.root_exit) res.status = *rep.root_exit;
    return res;
  }

  ExecArgs exec(exe, args, {kEnvPrefix});
  const Verdict deflt = mode == LaunchMode::EnforceKill ? kill_process() : errno_action(errno_value);
  const FilterProgram prog = build_filter(list, deflt, {exec_bootstrap_rule(exec.path())});
  const sock_fprog fprog{static_cast<unsigned short>(prog.instructions.size()),
                         reinterpret_cast<sock_filter*>(
                             const_cast<BpfInsn*>(prog.instructions.data()))};

  int fds[2];
  if (::pipe2(fds, O_CLOEXEC) != 0)
    throw Error(ErrorKind::Io, std::string("pipe: ") + std::strerror(errno));
  const pid_t pid = ::fork();
  if (pid < 0) throw Error(ErrorKind::Io, std::string("fork: ") + std::strerror(errno));
  if (pid == 0) {
    ::close(fds[0]);
    int report[2] = {0, 0};
    if (::prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0 ||
        ::syscall(SYS_seccomp, SECCOMP_SET_MODE_FILTER, 0, &fprog) != 0) {
      report[1] = errno;
      (void)!::write(fds[1], report, sizeof report);
      ::_exit(126);
    }
    long rc = chestnut_exec_trampoline(exec.path(), exec.argv(), exec.envp());
    report[0] = 1;
    report[1] = static_cast<int>(-rc);
    (void)!::write(fds[1], report, sizeof report);
    ::_exit(127);
  }
  ::close(fds[1]);
  int report[2] = {0, 0};
  ssize_t got;
  do {
    got = ::read(fds[0], report, sizeof report);
  } while (got < 0 && errno == EINTR);
  ::close(fds[0]);
  int st = 0;
  while (::waitpid(pid, &st, 0) < 0 && errno == EINTR) {
  }
  if (got == static_cast<ssize_t>(sizeof report)) {
    if (report[0] == 0)
      throw Error(ErrorKind::LoadRejected, std::string("seccomp: ") + std::strerror(report[1]));
    throw Error(ErrorKind::TargetNotFound, exe.string() + ": " + std::strerror(report[1]));
  }
  res.status = ExitStatus::from_wait(st);
  return res;
}

// Rewrites a dynamic executable so that the installer library loads first
// and the allowlist travels inside the binary as a note.
inline fs::path patch(const ElfImage& img, const SyscallSet& set, const fs::path& installer,
                      std::optional<fs::path> out = std::nullopt) {
  if (set.empty()) throw Error(ErrorKind::InvalidAllowlist, "empty allowlist");
  Allowlist a;
  a.numbers = set;
  validate(a);
  if (img.kind != ImageKind::ExecutableDynamic)
    throw Error(ErrorKind::StaticBinary,
                img.path.string() + " is not a dynamic executable; use the launcher");
  std::error_code ec;
  fs::path lib = fs::absolute(installer, ec);
  if (ec || !fs::is_regular_file(lib)) throw Error(ErrorKind::Io, "installer not found " + installer.string());
  const fs::path final_path = detail::default_output(img, out);
  fs::path partial = final_path;
  partial += ".partial";
  inject_dependency(img, lib.string(), partial);
  auto injected = load_image(partial);
  write_annotation(injected, {NoteType::SyscallList, encode_syscall_list(set)}, final_path);
  fs::remove(partial, ec);
  return final_path;
}

}  // namespace chestnut
