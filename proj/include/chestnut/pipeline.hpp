#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chestnut/allowlist.hpp"
#include "chestnut/bpf.hpp"
#include "chestnut/elf.hpp"
#include "chestnut/evalkit.hpp"
#include "chestnut/filtergen.hpp"
#include "chestnut/func_map.hpp"
#include "chestnut/launcher.hpp"
#include "chestnut/merge.hpp"
#include "chestnut/syscall_table.hpp"
#include "chestnut/tracer.hpp"

namespace chestnut {

inline constexpr const char* kVersion = "0.1.0";

struct PipelineConfig {
  fs::path target;
  std::vector<std::string> target_args;  // used by the trace stage
  std::size_t budget = kDefaultBudget;
  unsigned threads = 1;
  std::vector<fs::path> search_paths;  // explicit, searched first
  bool use_environment_paths = true;
  bool use_builtin_paths = true;
  Strictness strictness = Strictness::Strict;
  std::optional<fs::path> lib_map_dir;  // precomputed maps; others are computed
  fs::path out_dir = "chestnut-out";
  Verdict default_action = kill_process();
  bool with_trace = false;
  RefinePolicy policy = RefinePolicy::AddOnly;
  bool include_startup = false;
  bool patch = false;
  std::optional<fs::path> installer;
  fs::path launcher;  // the CLI binary, referenced by launch.sh
};

struct PipelineSummary {
  std::string target;
  std::string kind;
  std::size_t sites = 0;
  std::size_t unresolved_sites = 0;
  std::size_t root_set_size = 0;
  SyscallSet static_set;  // after merge
  SyscallSet final_set;   // after optional refinement
  std::optional<SyscallSet> observed;
  std::optional<double> overapproximation;
  std::size_t blocked = 0;  // of the 349 syscalls Linux 5.0 provides
  bool exec_blocked = false;
  bool mprotect_blocked = false;
  std::vector<std::string> libraries;
  std::vector<std::string> warnings;
  std::vector<fs::path> artifacts;
};

// Number of kernel syscalls a set does not allow.
inline std::size_t blocked_count(const SyscallSet& allowed) {
  std::size_t known = 0;
  for (auto n : allowed)
    if (is_known_syscall(n)) ++known;
  return kLinuxSyscallCount - known;
}

inline nlohmann::json to_json(const PipelineSummary& s) {
  nlohmann::json j;
  j["target"] = s.target;
  j["kind"] = s.kind;
  j["sites"] = s.sites;
  j["unresolved_sites"] = s.unresolved_sites;
  j["root_set_size"] = s.root_set_size;
  j["static_set"] = s.static_set.vector();
  j["static_set_size"] = s.static_set.size();
  j["final_set"] = s.final_set.vector();
  j["final_set_size"] = s.final_set.size();
  j["total_syscalls"] = kLinuxSyscallCount;
  j["blocked"] = s.blocked;
  j["exec_blocked"] = s.exec_blocked;
  j["mprotect_blocked"] = s.mprotect_blocked;
  if (s.observed) j["observed"] = s.observed->vector();
  if (s.overapproximation) j["overapproximation"] = *s.overapproximation;
  j["libraries"] = s.libraries;
  j["warnings"] = s.warnings;
  return j;
}

inline nlohmann::json extraction_to_json(const ExtractionResult& r) {
  nlohmann::json j;
  j["syscalls"] = r.syscalls.vector();
  j["unresolved"] = r.unresolved;
  j["sites"] = nlohmann::json::array();
  for (const auto& s : r.sites) {
    nlohmann::json e{{"vaddr", to_hex(s.vaddr)},
                     {"resolution", to_string(s.resolution)},
                     {"chain_length", s.chain_length}};
    e["number"] = s.number ? nlohmann::json(*s.number) : nlohmann::json(nullptr);
    j["sites"].push_back(std::move(e));
  }
  j["diagnostics"] = r.diagnostics;
  return j;
}

// Stage outputs are written as "<name>.partial" and renamed only when every
// stage succeeded, so a failed run leaves its partial artifacts behind.
class ArtifactSet {
 public:
  explicit ArtifactSet(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  fs::path partial(const fs::path& rel) {
    fs::path final_path = dir_ / rel;
    fs::create_directories(final_path.parent_path());
    fs::path p = final_path;
    p += ".partial";
    staged_.push_back(final_path);
    return p;
  }

  void json(const fs::path& rel, const nlohmann::json& j) { write_json_file(partial(rel), j); }

  void bytes(const fs::path& rel, std::span<const std::uint8_t> data,
             std::optional<fs::perms> perms = std::nullopt) {
    detail::write_file_atomic(partial(rel), data, perms);
  }

  std::vector<fs::path> commit() {
    for (const auto& f : staged_) {
      fs::path p = f;
      p += ".partial";
      fs::rename(p, f);
    }
    return staged_;
  }

 private:
  fs::path dir_;
  std::vector<fs::path> staged_;
};

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out += c;
  }
  return out + "'";
}

inline PipelineSummary run_pipeline(const PipelineConfig& cfg) {
  PipelineSummary sum;
  ArtifactSet out(cfg.out_dir);
  auto root = load_image(cfg.target);
  sum.target = cfg.target.string();
  sum.kind = to_string(root.kind);

  // extract + map for the root
  auto analysis = analyze_binary(root, cfg.budget, cfg.threads);
  sum.sites = analysis.extraction.sites.size();
  sum.unresolved_sites = analysis.extraction.unresolved;
  sum.root_set_size = analysis.map.init.size();
  for (const auto& d : analysis.extraction.diagnostics) sum.warnings.push_back(d);
  out.json("extract.json", extraction_to_json(analysis.extraction));

  // merge over the dependency closure
  auto search = default_search_paths(cfg.search_paths, cfg.use_environment_paths,
                                     cfg.use_builtin_paths);
  auto closure = resolve_dependencies(root, search, cfg.strictness);
  std::map<std::string, ExportSyscallMap> maps;
  if (cfg.lib_map_dir) maps = load_export_maps(*cfg.lib_map_dir);
  for (const auto& lib : closure.libraries) {
    sum.libraries.push_back(lib.name);
    const auto key = fs::path(lib.name).filename().string();
    if (!maps.count(key)) maps[key] = analyze_binary(lib.image, cfg.budget, cfg.threads).map;
    out.json(fs::path("maps") / export_map_filename(lib.name),
             export_map_to_json(maps[key], key));
  }
  auto merged = merge_sets(closure, analysis.map.init, maps, cfg.strictness, cfg.budget);
  for (const auto& w : closure.warnings) sum.warnings.push_back(w);
  for (const auto& w : merged.warnings) sum.warnings.push_back(w);
  sum.static_set = merged.syscalls;
  {
    nlohmann::json mj;
    mj["syscalls"] = merged.syscalls.vector();
    mj["libraries"] = sum.libraries;
    mj["resolution"] = closure.resolution_log;
    mj["contributions"] = nlohmann::json::object();
    for (const auto& [k, v] : merged.contributions) mj["contributions"][k] = v.vector();
    mj["warnings"] = merged.warnings;
    out.json("merge.json", mj);
  }

  // optional dynamic refinement
  sum.final_set = merged.syscalls;
  if (cfg.with_trace) {
    PtraceConfig tc;
    tc.target = fs::absolute(cfg.target);
    tc.args = cfg.target_args;
    auto report = trace(tc, {cfg.include_startup});
    auto ref = refine(merged.syscalls, report.observed, cfg.policy);
    sum.observed = report.observed;
    sum.overapproximation = overapproximation(merged.syscalls, report.observed);
    sum.final_set = ref.final_set;
    out.json("trace.json", to_json(report));
    out.json("refine.json", {{"added", ref.added.vector()},
                             {"removable", ref.removable.vector()},
                             {"final", ref.final_set.vector()}});
  }

  // genfilter
  Allowlist list;
  list.numbers = sum.final_set;
  out.json("allowlist.json", to_json(list));
  auto prog = build_filter(list, cfg.default_action);
  out.bytes("filter.bpf", encode_program(prog.instructions));
  {
    const auto allow_abs = fs::absolute(cfg.out_dir / "allowlist.json");
    std::string script = "#!/bin/sh\nexec " + shell_quote(cfg.launcher.string()) +
                         " launch --allowlist " + shell_quote(allow_abs.string()) + " -- " +
                         shell_quote(fs::absolute(cfg.target).string()) + " \"$@\"\n";
    out.bytes("launch.sh", std::vector<std::uint8_t>(script.begin(), script.end()),
              fs::perms::owner_all | fs::perms::group_read | fs::perms::group_exec |
                  fs::perms::others_read | fs::perms::others_exec);
  }
  if (cfg.patch) {
    if (!cfg.installer) throw Error(ErrorKind::Io, "patch requested without an installer library");
    auto dest = out.partial(cfg.target.filename().string() + ".chestnut");
    patch(root, sum.final_set, *cfg.installer, dest);
  }

  sum.blocked = blocked_count(sum.final_set);
  sum.exec_blocked = (sum.final_set & exec_family()).empty();
  sum.mprotect_blocked = !sum.final_set.contains(kMprotect);
  out.json("summary.json", to_json(sum));
  sum.artifacts = out.commit();
  return sum;
}

}  // namespace chestnut
