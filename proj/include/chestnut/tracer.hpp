#pragma once

#include <elf.h>
#include <fcntl.h>
#include <signal.h>
#include <sys/prctl.h>
#include <sys/ptrace.h>
#include <sys/user.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chestnut/allowlist.hpp"
#include "chestnut/filtergen.hpp"
#include "chestnut/process.hpp"
#include "chestnut/syscall_set.hpp"

namespace chestnut {

struct TraceEvent {
  enum class Kind { Syscall, Spawn, Exec, Entry, Exit };
  Kind kind = Kind::Syscall;
  int pid = 0;
  std::uint32_t nr = 0;  // Syscall
  int parent = 0;        // Spawn
  int status = 0;        // Exit, raw wait status

  static TraceEvent syscall(int pid, std::uint32_t nr) { return {Kind::Syscall, pid, nr, 0, 0}; }
  static TraceEvent spawn(int pid, int parent) { return {Kind::Spawn, pid, 0, parent, 0}; }
  static TraceEvent exec(int pid) { return {Kind::Exec, pid, 0, 0, 0}; }
  static TraceEvent entry(int pid) { return {Kind::Entry, pid, 0, 0, 0}; }
  static TraceEvent exit(int pid, int status) { return {Kind::Exit, pid, 0, 0, status}; }
};

// Where syscall notifications come from. The first event's pid is the root
// of the traced process tree.
class EventSource {
 public:
  virtual ~EventSource() = default;
  virtual void run(const std::function<void(const TraceEvent&)>& sink) = 0;
  virtual std::string mechanism() const = 0;
  // True when the root's syscalls before its first exec are the tracer's
  // own setup rather than the target's.
  virtual bool root_starts_before_exec() const { return false; }
};

class ScriptedEvents : public EventSource {
 public:
  explicit ScriptedEvents(std::vector<TraceEvent> events) : events_(std::move(events)) {}
  void run(const std::function<void(const TraceEvent&)>& sink) override {
    for (const auto& e : events_) sink(e);
  }
  std::string mechanism() const override { return "scripted"; }

 private:
  std::vector<TraceEvent> events_;
};

struct TraceReport {
  SyscallSet observed;
  std::map<int, SyscallSet> per_pid;
  std::map<std::uint32_t, std::pair<int, std::size_t>> first_seen;  // nr -> (pid, sequence)
  // Syscalls seen before a process reached its program entry point.
  SyscallSet startup;
  std::optional<ExitStatus> root_exit;
  std::string mechanism;
  std::size_t events = 0;
};

struct TraceOptions {
  bool include_startup = false;
};

// Folds an event stream into a report. A process is in startup until its
// image reaches the entry point; forked children inherit the parent's
// state and exec returns a process to startup.
inline TraceReport trace(EventSource& source, const TraceOptions& opts = {}) {
  TraceReport r;
  r.mechanism = source.mechanism();
  std::map<int, bool> past_entry;
  std::optional<int> root;
  bool root_execed = !source.root_starts_before_exec();
  std::size_t seq = 0;
  source.run([&](const TraceEvent& e) {
    if (!root) root = e.pid;
    ++r.events;
    switch (e.kind) {
      case TraceEvent::Kind::Spawn:
        past_entry[e.pid] = past_entry[e.parent];
        break;
      case TraceEvent::Kind::Exec:
        past_entry[e.pid] = false;
        if (e.pid == *root) root_execed = true;
        break;
      case TraceEvent::Kind::Entry:
        past_entry[e.pid] = true;
        break;
      case TraceEvent::Kind::Exit:
        if (e.pid == *root) r.root_exit = ExitStatus::from_wait(e.status);
        break;
      case TraceEvent::Kind::Syscall: {
        if (e.pid == *root && !root_execed) break;
        const std::size_t s = seq++;
        if (!past_entry[e.pid] && !opts.include_startup) {
          r.startup.insert(e.nr);
          break;
        }
        if (!past_entry[e.pid]) r.startup.insert(e.nr);
        r.observed.insert(e.nr);
        r.per_pid[e.pid].insert(e.nr);
        r.first_seen.emplace(e.nr, std::make_pair(e.pid, s));
        break;
      }
    }
  });
  return r;
}

// ---- ptrace-backed source ---------------------------------------------------

enum class TraceMechanism { Auto, Seccomp, SyscallStop };

struct PtraceConfig {
  fs::path target;
  std::vector<std::string> args;
  bool follow_children = true;
  TraceMechanism mechanism = TraceMechanism::Auto;
  // Seccomp mechanism only: the filter to install. Syscalls it answers with
  // SECCOMP_RET_TRACE are reported; default traces everything.
  std::optional<std::vector<BpfInsn>> filter;
  std::vector<std::string> drop_env_prefixes;
};

// True when this kernel accepts seccomp filters from an unprivileged
// process (checked once in a throwaway child).
inline bool seccomp_available() {
  static const bool ok = [] {
    pid_t pid = ::fork();
    if (pid < 0) return false;
    if (pid == 0) {
      std::vector<BpfInsn> allow{bpf_stmt(BPF_RET | BPF_K, SECCOMP_RET_ALLOW)};
      sock_fprog fp{1, reinterpret_cast<sock_filter*>(allow.data())};
      if (::prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0) ::_exit(1);
      ::_exit(::syscall(SYS_seccomp, SECCOMP_SET_MODE_FILTER, 0, &fp) == 0 ? 0 : 1);
    }
    int st = 0;
    ::waitpid(pid, &st, 0);
    return WIFEXITED(st) && WEXITSTATUS(st) == 0;
  }();
  return ok;
}

inline std::vector<BpfInsn> trace_all_filter() {
  return {bpf_stmt(BPF_RET | BPF_K, SECCOMP_RET_TRACE)};
}

class PtraceSource : public EventSource {
 public:
  explicit PtraceSource(PtraceConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.target = resolve_executable(cfg_.target.string());
    use_seccomp_ = cfg_.mechanism == TraceMechanism::Seccomp ||
                   (cfg_.mechanism == TraceMechanism::Auto && seccomp_available());
    // Without a tracer attached, SECCOMP_RET_TRACE fails the syscall with
    // ENOSYS; untraced children must therefore not inherit the filter.
    if (!cfg_.follow_children && cfg_.mechanism != TraceMechanism::Seccomp) use_seccomp_ = false;
    if (cfg_.filter && !use_seccomp_)
      throw Error(ErrorKind::AttachFailed, "a custom filter needs the seccomp mechanism");
  }

  std::string mechanism() const override { return use_seccomp_ ? "seccomp" : "syscall-stop"; }
  bool root_starts_before_exec() const override { return true; }

  void run(const std::function<void(const TraceEvent&)>& sink) override {
    ExecArgs exec(cfg_.target, cfg_.args, cfg_.drop_env_prefixes);
    std::vector<BpfInsn> filter = cfg_.filter.value_or(trace_all_filter());
    validate_program(filter);
    sock_fprog fprog{static_cast<unsigned short>(filter.size()),
                     reinterpret_cast<sock_filter*>(filter.data())};

    const pid_t child = ::fork();
    if (child < 0) throw Error(ErrorKind::AttachFailed, std::string("fork: ") + std::strerror(errno));
    if (child == 0) {
      if (::ptrace(PTRACE_TRACEME, 0, nullptr, nullptr) != 0) ::_exit(126);
      ::raise(SIGSTOP);
      if (use_seccomp_) {
        if (::prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0) ::_exit(126);
        if (::syscall(SYS_seccomp, SECCOMP_SET_MODE_FILTER, 0, &fprog) != 0) ::_exit(126);
      }
      ::execve(exec.path(), exec.argv(), exec.envp());
      ::_exit(127);
    }

    int st = 0;
    if (::waitpid(child, &st, 0) != child || !WIFSTOPPED(st))
      throw Error(ErrorKind::TraceeVanished, "tracee did not stop after attach");
    long opts = PTRACE_O_EXITKILL | PTRACE_O_TRACEEXEC;
    if (use_seccomp_) opts |= PTRACE_O_TRACESECCOMP;
    else opts |= PTRACE_O_TRACESYSGOOD;
    if (cfg_.follow_children) opts |= PTRACE_O_TRACEFORK | PTRACE_O_TRACEVFORK | PTRACE_O_TRACECLONE;
    if (::ptrace(PTRACE_SETOPTIONS, child, nullptr, opts) != 0) {
      ::kill(child, SIGKILL);
      ::waitpid(child, nullptr, 0);
      throw Error(ErrorKind::AttachFailed, std::string("PTRACE_SETOPTIONS: ") + std::strerror(errno));
    }
    sink(TraceEvent::spawn(child, 0));
    started_.insert(child);
    resume(child, 0);
    loop(child, sink);
  }

 private:
  struct Breakpoint {
    std::uint64_t addr;
    long original;
  };

  void resume(pid_t pid, int sig) {
    ::ptrace(use_seccomp_ ? PTRACE_CONT : PTRACE_SYSCALL, pid, nullptr,
             reinterpret_cast<void*>(static_cast<long>(sig)));
  }

  static std::optional<std::uint64_t> auxv_entry(pid_t pid) {
    std::ifstream in("/proc/" + std::to_string(pid) + "/auxv", std::ios::binary);
    Elf64_auxv_t a{};
    while (in.read(reinterpret_cast<char*>(&a), sizeof a)) {
      if (a.a_type == AT_NULL) break;
      if (a.a_type == AT_ENTRY) return a.a_un.a_val;
    }
    return std::nullopt;
  }

  void arm_entry_breakpoint(pid_t pid) {
    auto entry = auxv_entry(pid);
    if (!entry) return;
    errno = 0;
    long word = ::ptrace(PTRACE_PEEKTEXT, pid, reinterpret_cast<void*>(*entry), nullptr);
    if (errno) return;
    long patched = (word & ~0xFFL) | 0xCC;
    if (::ptrace(PTRACE_POKETEXT, pid, reinterpret_cast<void*>(*entry),
                 reinterpret_cast<void*>(patched)) != 0)
      return;
    breakpoints_[pid] = {*entry, word};
  }

  // True if the SIGTRAP was our entry breakpoint (now removed).
  bool hit_entry_breakpoint(pid_t pid) {
    auto it = breakpoints_.find(pid);
    if (it == breakpoints_.end()) return false;
    user_regs_struct regs{};
    if (::ptrace(PTRACE_GETREGS, pid, nullptr, &regs) != 0) return false;
    if (regs.rip != it->second.addr + 1) return false;
    ::ptrace(PTRACE_POKETEXT, pid, reinterpret_cast<void*>(it->second.addr),
             reinterpret_cast<void*>(it->second.original));
    regs.rip = it->second.addr;
    ::ptrace(PTRACE_SETREGS, pid, nullptr, &regs);
    breakpoints_.erase(it);
    return true;
  }

  void loop(pid_t root, const std::function<void(const TraceEvent&)>& sink) {
    (void)root;
    for (;;) {
      int st = 0;
      pid_t pid = ::waitpid(-1, &st, __WALL);
      if (pid < 0) {
        if (errno == EINTR) continue;
        break;  // ECHILD: every tracee is gone
      }
      if (WIFEXITED(st) || WIFSIGNALED(st)) {
        in_syscall_.erase(pid);
        breakpoints_.erase(pid);
        sink(TraceEvent::exit(pid, st));
        continue;
      }
      if (!WIFSTOPPED(st)) continue;
      const int sig = WSTOPSIG(st);
      const int event = st >> 16;

      if (sig == (SIGTRAP | 0x80)) {
        bool entering = !in_syscall_[pid];
        in_syscall_[pid] = entering;
        if (entering) {
          user_regs_struct regs{};
          if (::ptrace(PTRACE_GETREGS, pid, nullptr, &regs) == 0)
            sink(TraceEvent::syscall(pid, static_cast<std::uint32_t>(regs.orig_rax)));
        }
        resume(pid, 0);
        continue;
      }
      if (sig == SIGTRAP && event == PTRACE_EVENT_SECCOMP) {
        user_regs_struct regs{};
        if (::ptrace(PTRACE_GETREGS, pid, nullptr, &regs) == 0)
          sink(TraceEvent::syscall(pid, static_cast<std::uint32_t>(regs.orig_rax)));
        resume(pid, 0);
        continue;
      }
      if (sig == SIGTRAP &&
          (event == PTRACE_EVENT_FORK || event == PTRACE_EVENT_VFORK || event == PTRACE_EVENT_CLONE)) {
        unsigned long msg = 0;
        ::ptrace(PTRACE_GETEVENTMSG, pid, nullptr, &msg);
        const pid_t kid = static_cast<pid_t>(msg);
        sink(TraceEvent::spawn(kid, pid));
        // The child entered the syscall that created it only in the parent.
        if (!use_seccomp_) in_syscall_[kid] = false;
        if (pending_stop_.erase(kid)) {
          started_.insert(kid);
          resume(kid, 0);
        } else {
          started_.insert(kid);
          awaiting_stop_.insert(kid);
        }
        resume(pid, 0);
        continue;
      }
      if (sig == SIGTRAP && event == PTRACE_EVENT_EXEC) {
        sink(TraceEvent::exec(pid));
        arm_entry_breakpoint(pid);
        resume(pid, 0);
        continue;
      }
      if (sig == SIGTRAP && event == 0 && hit_entry_breakpoint(pid)) {
        sink(TraceEvent::entry(pid));
        resume(pid, 0);
        continue;
      }
      if (sig == SIGSTOP && awaiting_stop_.erase(pid)) {
        resume(pid, 0);  // initial stop of an auto-attached child
        continue;
      }
      if (sig == SIGSTOP && !started_.count(pid)) {
        pending_stop_.insert(pid);  // child stop arrived before the fork event
        continue;
      }
      resume(pid, sig);  // ordinary signal: deliver it
    }
  }

  PtraceConfig cfg_;
  bool use_seccomp_ = false;
  std::map<pid_t, bool> in_syscall_;
  std::map<pid_t, Breakpoint> breakpoints_;
  std::set<pid_t> started_, awaiting_stop_, pending_stop_;
};

inline TraceReport trace(const PtraceConfig& cfg, const TraceOptions& opts = {}) {
  PtraceSource src(cfg);
  return trace(src, opts);
}

// ---- refinement -------------------------------------------------------------

enum class RefinePolicy { AddOnly, AddAndRemove };

struct RefinementResult {
  SyscallSet added;
  SyscallSet removable;
  SyscallSet final_set;
};

inline RefinementResult refine(const SyscallSet& static_set, const SyscallSet& observed,
                               RefinePolicy policy = RefinePolicy::AddOnly) {
  RefinementResult r;
  r.added = observed - static_set;
  r.removable = static_set - observed;
  r.final_set = policy == RefinePolicy::AddOnly ? (static_set | r.added) : observed;
  return r;
}

inline RefinementResult refine(const Allowlist& static_list, const TraceReport& report,
                               RefinePolicy policy = RefinePolicy::AddOnly) {
  return refine(static_list.numbers, report.observed, policy);
}

// Fraction of statically allowed syscalls never executed in the trace.
inline double overapproximation(const SyscallSet& static_set, const SyscallSet& observed) {
  if (static_set.empty()) return 0.0;
  return static_cast<double>((static_set - observed).size()) /
         static_cast<double>(static_set.size());
}

// ---- report documents -------------------------------------------------------

inline nlohmann::json to_json(const TraceReport& r) {
  nlohmann::json j;
  j["mechanism"] = r.mechanism;
  j["observed"] = r.observed.vector();
  j["startup"] = r.startup.vector();
  j["per_pid"] = nlohmann::json::object();
  for (const auto& [pid, set] : r.per_pid) j["per_pid"][std::to_string(pid)] = set.vector();
  j["first_seen"] = nlohmann::json::object();
  for (const auto& [nr, at] : r.first_seen)
    j["first_seen"][std::to_string(nr)] = {at.first, at.second};
  if (r.root_exit) {
    j["exit"] = r.root_exit->exited ? nlohmann::json{{"code", r.root_exit->code}}
                                    : nlohmann::json{{"signal", r.root_exit->signal}};
  }
  return j;
}

inline TraceReport trace_report_from_json(const nlohmann::json& j) {
  TraceReport r;
  try {
    r.mechanism = j.value("mechanism", std::string{});
    r.observed = SyscallSet(j.at("observed").get<std::vector<std::uint32_t>>());
    r.startup = SyscallSet(j.value("startup", std::vector<std::uint32_t>{}));
    if (j.contains("per_pid"))
      for (const auto& [pid, arr] : j.at("per_pid").items())
        r.per_pid[std::stoi(pid)] = SyscallSet(arr.get<std::vector<std::uint32_t>>());
    if (j.contains("first_seen"))
      for (const auto& [nr, at] : j.at("first_seen").items())
        r.first_seen[static_cast<std::uint32_t>(std::stoul(nr))] = {at.at(0).get<int>(),
                                                                    at.at(1).get<std::size_t>()};
  } catch (const std::exception& e) {
    throw Error(ErrorKind::BadDocument, std::string("trace report: ") + e.what());
  }
  return r;
}

}  // namespace chestnut
