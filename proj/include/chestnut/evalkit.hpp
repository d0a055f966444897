#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "chestnut/error.hpp"
#include "chestnut/syscall_set.hpp"
#include "chestnut/syscall_table.hpp"

namespace chestnut {

struct CveSample {
  std::string cve;
  std::vector<std::string> syscalls;  // all must be allowed for the exploit

  friend bool operator==(const CveSample&, const CveSample&) = default;
};

using EquivalenceTable = std::vector<std::pair<std::string, std::vector<std::string>>>;

// Syscalls that perform the same action as the key.
inline const EquivalenceTable& default_equivalences() {
  static const EquivalenceTable t{
      {"munlockall", {"munlock"}},
      {"listxattr", {"llistxattr", "flistxattr"}},
      {"epoll_create", {"epoll_create1"}},
      {"mlockall", {"mlock", "mlock2"}},
      {"execve", {"execveat"}},
      {"recvfrom", {"recvmsg", "recvmmsg"}},
      {"writev", {"pwritev"}},
      {"mknod", {"mknodat"}},
      {"open", {"openat"}},
      {"accept", {"accept4"}},
      {"getdents", {"getdents64"}},
      {"sendto", {"sendmmsg", "sendmsg"}},
      {"getxattr", {"fgetxattr", "lgetxattr"}},
      {"rename", {"renameat", "rename2"}},
      {"epoll_ctl", {"epoll_ctl_old"}},
  };
  return t;
}

namespace detail {

// Name -> every name reachable through table entries (excluding itself).
inline std::map<std::string, std::vector<std::string>> equivalence_closure(
    const EquivalenceTable& table) {
  std::map<std::string, std::vector<std::string>> direct;
  for (const auto& [k, vs] : table)
    for (const auto& v : vs)
      if (v != k) direct[k].push_back(v);
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& [k, _] : direct) {
    std::set<std::string> seen{k};
    std::vector<std::string> stack{k}, order;
    while (!stack.empty()) {
      auto u = stack.back();
      stack.pop_back();
      auto it = direct.find(u);
      if (it == direct.end()) continue;
      for (const auto& v : it->second)
        if (seen.insert(v).second) {
          order.push_back(v);
          stack.push_back(v);
        }
    }
    out[k] = order;
  }
  return out;
}

inline std::vector<std::string> canonical(std::vector<std::string> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

}  // namespace detail

// Every combination of substitutions over the sample's positions
// (originals included); duplicates within a CVE are removed. Output order:
// input order of samples, originals first.
inline std::vector<CveSample> expand_equivalents(const std::vector<CveSample>& samples,
                                                 const EquivalenceTable& table = default_equivalences()) {
  const auto closure = detail::equivalence_closure(table);
  std::vector<CveSample> out;
  std::set<std::pair<std::string, std::vector<std::string>>> seen;
  auto emit = [&](const std::string& cve, std::vector<std::string> names) {
    auto key = detail::canonical(names);
    if (seen.emplace(cve, key).second) out.push_back({cve, std::move(key)});
  };
  for (const auto& s : samples) {
    std::vector<std::vector<std::string>> options;
    for (const auto& name : s.syscalls) {
      std::vector<std::string> opt{name};
      if (auto it = closure.find(name); it != closure.end())
        opt.insert(opt.end(), it->second.begin(), it->second.end());
      options.push_back(std::move(opt));
    }
    std::vector<std::size_t> pick(options.size(), 0);
    for (;;) {
      std::vector<std::string> names;
      for (std::size_t i = 0; i < options.size(); ++i) names.push_back(options[i][pick[i]]);
      emit(s.cve, std::move(names));
      std::size_t i = 0;
      while (i < pick.size() && ++pick[i] == options[i].size()) pick[i++] = 0;
      if (i == pick.size()) break;
    }
  }
  return out;
}

inline SyscallSet required_numbers(const CveSample& s) {
  SyscallSet out;
  for (const auto& n : s.syscalls) {
    auto nr = syscall_number(n);
    if (!nr) throw Error(ErrorKind::UnknownSyscall, n + " (in " + s.cve + ")");
    out.insert(*nr);
  }
  return out;
}

// Mitigated iff at least one required syscall is not allowed.
inline bool is_mitigated(const SyscallSet& allowlist, const SyscallSet& required) {
  return !required.is_subset_of(allowlist);
}

inline const SyscallSet& exec_family() {
  static const SyscallSet s{59, 322};
  return s;
}
inline constexpr std::uint32_t kMprotect = 10;

struct CveVerdict {
  std::string cve;
  std::size_t samples = 0;
  std::size_t mitigated = 0;
  bool fully_mitigated() const { return mitigated == samples; }
};

struct EvaluationReport {
  std::vector<CveVerdict> cves;  // sorted by id
  std::size_t total_cves = 0;
  std::size_t fully_mitigated_cves = 0;
  std::size_t total_samples = 0;
  std::size_t mitigated_samples = 0;
  double fully_mitigated_pct = 0;
  // Mean over CVEs of each CVE's mitigated-sample fraction.
  double subvariant_mitigated_pct = 0;
  // Mitigated samples over all samples.
  double pooled_sample_pct = 0;
  bool exec_blocked = false;
  bool mprotect_blocked = false;
};

inline EvaluationReport evaluate(const SyscallSet& allowlist, const std::vector<CveSample>& samples) {
  EvaluationReport r;
  std::map<std::string, CveVerdict> by_cve;
  for (const auto& s : samples) {
    auto req = required_numbers(s);
    if (req.empty()) throw Error(ErrorKind::BadDocument, "sample of " + s.cve + " requires nothing");
    auto& v = by_cve[s.cve];
    v.cve = s.cve;
    ++v.samples;
    if (is_mitigated(allowlist, req)) ++v.mitigated;
  }
  double frac_sum = 0;
  for (auto& [id, v] : by_cve) {
    r.total_samples += v.samples;
    r.mitigated_samples += v.mitigated;
    if (v.fully_mitigated()) ++r.fully_mitigated_cves;
    frac_sum += static_cast<double>(v.mitigated) / static_cast<double>(v.samples);
    r.cves.push_back(v);
  }
  r.total_cves = r.cves.size();
  if (r.total_cves) {
    r.fully_mitigated_pct = 100.0 * static_cast<double>(r.fully_mitigated_cves) /
                            static_cast<double>(r.total_cves);
    r.subvariant_mitigated_pct = 100.0 * frac_sum / static_cast<double>(r.total_cves);
    r.pooled_sample_pct = 100.0 * static_cast<double>(r.mitigated_samples) /
                          static_cast<double>(r.total_samples);
  }
  r.exec_blocked = (allowlist & exec_family()).empty();
  r.mprotect_blocked = !allowlist.contains(kMprotect);
  return r;
}

// An array of {"cve", "syscalls"}, or an object holding it under "samples".
inline std::vector<CveSample> samples_from_json(const nlohmann::json& j) {
  std::vector<CveSample> out;
  try {
    const auto& arr = j.is_object() ? j.at("samples") : j;
    if (!arr.is_array()) throw Error(ErrorKind::BadDocument, "samples: expected an array");
    for (const auto& e : arr) {
      CveSample s{e.at("cve").get<std::string>(), e.at("syscalls").get<std::vector<std::string>>()};
      if (s.syscalls.empty()) throw Error(ErrorKind::BadDocument, s.cve + " lists no syscalls");
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadDocument, std::string("samples: ") + e.what());
  }
  return out;
}

inline nlohmann::json to_json(const std::vector<CveSample>& samples) {
  auto j = nlohmann::json::array();
  for (const auto& s : samples) j.push_back({{"cve", s.cve}, {"syscalls", s.syscalls}});
  return j;
}

inline nlohmann::json to_json(const EvaluationReport& r) {
  nlohmann::json j;
  j["cves"] = r.total_cves;
  j["samples"] = r.total_samples;
  j["fully_mitigated_cves"] = r.fully_mitigated_cves;
  j["mitigated_samples"] = r.mitigated_samples;
  j["fully_mitigated_pct"] = r.fully_mitigated_pct;
  j["subvariant_mitigated_pct"] = r.subvariant_mitigated_pct;
  j["pooled_sample_pct"] = r.pooled_sample_pct;
  j["exec_blocked"] = r.exec_blocked;
  j["mprotect_blocked"] = r.mprotect_blocked;
  j["per_cve"] = nlohmann::json::array();
  for (const auto& v : r.cves)
    j["per_cve"].push_back({{"cve", v.cve}, {"samples", v.samples}, {"mitigated", v.mitigated}});
  return j;
}

}  // namespace chestnut
