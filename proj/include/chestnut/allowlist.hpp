#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chestnut/elf.hpp"
#include "chestnut/error.hpp"
#include "chestnut/syscall_set.hpp"

namespace chestnut {

inline constexpr std::uint32_t kMaxSyscallNumber = 512;  // exclusive

struct Allowlist {
  Arch arch = Arch::x86_64;
  SyscallSet numbers;

  friend bool operator==(const Allowlist&, const Allowlist&) = default;
};

inline void validate(const Allowlist& a) {
  if (a.arch != Arch::x86_64)
    throw Error(ErrorKind::UnsupportedArch, std::string("allowlist arch ") + to_string(a.arch));
  for (auto n : a.numbers)
    if (n >= kMaxSyscallNumber)
      throw Error(ErrorKind::InvalidAllowlist, "syscall number " + std::to_string(n) +
                                                   " out of range");
}

inline nlohmann::json to_json(const Allowlist& a) {
  return {{"arch", to_string(a.arch)}, {"numbers", a.numbers.vector()}};
}

inline Allowlist allowlist_from_json(const nlohmann::json& j) {
  Allowlist a;
  try {
    auto arch = j.at("arch").get<std::string>();
    if (arch == "aarch64") throw Error(ErrorKind::UnsupportedArch, "aarch64 allowlists");
    if (arch != "x86_64") throw Error(ErrorKind::InvalidAllowlist, "unknown arch " + arch);
    auto nums = j.at("numbers").get<std::vector<std::int64_t>>();
    std::vector<std::uint32_t> out;
    for (auto n : nums) {
      if (n < 0 || n >= kMaxSyscallNumber)
        throw Error(ErrorKind::InvalidAllowlist, "syscall number " + std::to_string(n) +
                                                     " out of range");
      if (!out.empty() && static_cast<std::uint32_t>(n) <= out.back())
        throw Error(ErrorKind::InvalidAllowlist, "numbers must be strictly ascending");
      out.push_back(static_cast<std::uint32_t>(n));
    }
    a.numbers = SyscallSet(std::move(out));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidAllowlist, e.what());
  }
  return a;
}

inline nlohmann::json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadDocument, p.string() + ": " + e.what());
  }
}

// Pretty-printed with a trailing newline; byte-identical for equal values.
inline void write_json_file(const fs::path& p, const nlohmann::json& j) {
  std::string s = j.dump(2);
  s.push_back('\n');
  detail::write_file_atomic(p, std::vector<std::uint8_t>(s.begin(), s.end()));
}

inline Allowlist load_allowlist(const fs::path& p) { return allowlist_from_json(read_json_file(p)); }

}  // namespace chestnut
