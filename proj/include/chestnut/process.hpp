#pragma once

#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "chestnut/error.hpp"

extern char** environ;

namespace chestnut {

namespace fs = std::filesystem;

struct ExitStatus {
  bool exited = false;
  int code = 0;    // valid when exited
  int signal = 0;  // valid when !exited

  static ExitStatus from_wait(int st) {
    ExitStatus e;
    if (WIFEXITED(st)) {
      e.exited = true;
      e.code = WEXITSTATUS(st);
    } else if (WIFSIGNALED(st)) {
      e.signal = WTERMSIG(st);
    }
    return e;
  }

  bool success() const { return exited && code == 0; }
  // Shell convention: 128 + signal for signal deaths.
  int shell_code() const { return exited ? code : 128 + signal; }

  friend bool operator==(const ExitStatus&, const ExitStatus&) = default;
};

inline std::string to_string(const ExitStatus& e) {
  if (e.exited) return "exit " + std::to_string(e.code);
  const char* name = ::strsignal(e.signal);
  return "signal " + std::to_string(e.signal) + (name ? std::string(" (") + name + ")" : "");
}

// Locates target the way execvp does; TargetNotFound if nothing executable.
inline fs::path resolve_executable(const std::string& target) {
  auto ok = [](const fs::path& p) {
    struct stat st{};
    return ::stat(p.c_str(), &st) == 0 && S_ISREG(st.st_mode) && ::access(p.c_str(), X_OK) == 0;
  };
  if (target.empty()) throw Error(ErrorKind::TargetNotFound, "empty target");
  if (target.find('/') != std::string::npos) {
    if (ok(target)) return target;
    throw Error(ErrorKind::TargetNotFound, target);
  }
  const char* path = std::getenv("PATH");
  std::string s = path ? path : "/usr/local/bin:/usr/bin:/bin";
  std::size_t pos = 0;
  while (pos <= s.size()) {
    auto next = s.find(':', pos);
    if (next == std::string::npos) next = s.size();
    fs::path dir = next > pos ? fs::path(s.substr(pos, next - pos)) : fs::path(".");
    if (ok(dir / target)) return dir / target;
    pos = next + 1;
  }
  throw Error(ErrorKind::TargetNotFound, target);
}

// Owns NUL-terminated argv/envp arrays for exec.
class ExecArgs {
 public:
  ExecArgs(const fs::path& target, const std::vector<std::string>& args,
           const std::vector<std::string>& drop_env_prefixes = {})
      : path_(target.string()) {
    strings_.push_back(target.string());
    for (const auto& a : args) strings_.push_back(a);
    argc_ = strings_.size();
    for (char** e = environ; e && *e; ++e) {
      std::string v(*e);
      bool drop = false;
      for (const auto& p : drop_env_prefixes) drop = drop || v.rfind(p, 0) == 0;
      if (!drop) strings_.push_back(std::move(v));
    }
    for (std::size_t i = 0; i < argc_; ++i) argv_.push_back(strings_[i].data());
    argv_.push_back(nullptr);
    for (std::size_t i = argc_; i < strings_.size(); ++i) envp_.push_back(strings_[i].data());
    envp_.push_back(nullptr);
  }

  ExecArgs(const ExecArgs&) = delete;
  ExecArgs& operator=(const ExecArgs&) = delete;

  const char* path() const { return path_.c_str(); }
  char* const* argv() const { return const_cast<char* const*>(argv_.data()); }
  char* const* envp() const { return const_cast<char* const*>(envp_.data()); }

 private:
  std::string path_;
  std::vector<std::string> strings_;
  std::size_t argc_ = 0;
  std::vector<char*> argv_, envp_;
};

}  // namespace chestnut
