// chestnut: extract, merge and enforce per-application syscall allowlists.

#include <unistd.h>

#include <cstdio>
#include <functional>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "chestnut/callgraph.hpp"
#include "chestnut/pipeline.hpp"

#ifndef CHESTNUT_INSTALLER_DEFAULT
#define CHESTNUT_INSTALLER_DEFAULT ""
#endif

using namespace chestnut;
using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kAnalysis = 3, kEnforcement = 4 };

struct Globals {
  bool json = false;
  std::string arch = "x86_64";
};

fs::path self_path() {
  std::error_code ec;
  auto p = fs::read_symlink("/proc/self/exe", ec);
  return ec ? fs::path("chestnut") : p;
}

fs::path default_installer() {
  auto beside = self_path().parent_path() / "libchestnut.so";
  std::error_code ec;
  if (fs::is_regular_file(beside, ec)) return beside;
  return CHESTNUT_INSTALLER_DEFAULT;
}

std::string join(const SyscallSet& s) {
  std::string out;
  for (auto n : s) {
    if (!out.empty()) out += ",";
    out += std::to_string(n);
  }
  return out;
}

std::string names(const SyscallSet& s) {
  std::string out;
  for (auto n : s) {
    if (!out.empty()) out += " ";
    auto nm = syscall_name(n);
    out += nm ? std::string(*nm) : std::to_string(n);
  }
  return out;
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

void warn(const std::string& w) { std::cerr << "warning: " << w << "\n"; }

unsigned default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

Strictness strictness_of(bool permissive) {
  return permissive ? Strictness::Permissive : Strictness::Strict;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Per-application syscall allowlists for ELF binaries"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", kVersion);
  Globals g;
  app.add_flag("--json", g.json, "Machine-readable output");
  app.add_option("--arch", g.arch, "Target architecture")
      ->check(CLI::IsMember({"x86_64", "aarch64"}));

  std::function<int()> action;

  // extract
  auto* extract = app.add_subcommand("extract", "Locate syscall sites and recover their numbers");
  std::string ex_bin;
  std::size_t ex_budget = kDefaultBudget;
  unsigned ex_threads = default_threads();
  extract->add_option("binary", ex_bin)->required();
  extract->add_option("--budget", ex_budget, "Backward-walk budget in instructions")
      ->capture_default_str();
  extract->add_option("--threads", ex_threads);
  extract->callback([&] {
    action = [&] {
      auto img = load_image(ex_bin);
      auto r = extract_all(img, ex_budget, ex_threads);
      for (const auto& d : r.diagnostics) warn(d);
      if (g.json) {
        print_json(extraction_to_json(r));
        return kOk;
      }
      for (const auto& s : r.sites)
        std::cout << to_hex(s.vaddr) << "  "
                  << (s.number ? std::to_string(*s.number) : std::string("?")) << "  "
                  << to_string(s.resolution) << "  chain=" << s.chain_length << "\n";
      std::cout << r.sites.size() << " sites, " << r.unresolved << " unresolved, "
                << r.syscalls.size() << " syscalls: " << join(r.syscalls) << "\n";
      return kOk;
    };
  });

  // map
  auto* map = app.add_subcommand("map", "Map exported functions to reachable syscalls");
  std::string map_bin, map_out;
  std::size_t map_budget = kDefaultBudget;
  map->add_option("binary", map_bin)->required();
  map->add_option("--emit-map", map_out, "Write the export map document");
  map->add_option("--budget", map_budget)->capture_default_str();
  map->callback([&] {
    action = [&] {
      auto img = load_image(map_bin);
      auto a = analyze_binary(img, map_budget, default_threads());
      const std::string lib = img.soname.value_or(img.path.filename().string());
      auto doc = export_map_to_json(a.map, lib);
      if (!map_out.empty()) write_json_file(map_out, doc);
      if (g.json) {
        print_json(doc);
      } else {
        std::cout << a.graph.nodes.size() << " functions, " << a.map.exports.size()
                  << " exports mapped, initializer set " << a.map.init.size() << " syscalls\n";
        for (const auto& [name, n] : a.map.unresolved)
          warn(name + " reaches " + std::to_string(n) + " unresolved syscall site(s)");
      }
      return kOk;
    };
  });

  // callgraph
  auto* cg = app.add_subcommand("callgraph", "Resolve call-graph documents and query reachability");
  std::vector<std::string> cg_inputs;
  std::vector<std::string> cg_entries = default_entries();
  bool cg_library = false;
  std::string cg_flat, cg_annotate, cg_out;
  cg->add_option("documents", cg_inputs, "*.cgdoc.json files or ELF files with a call-graph note")
      ->required();
  cg->add_option("--entries", cg_entries)->delimiter(',')->capture_default_str();
  cg->add_flag("--library", cg_library, "Missing entries are warnings");
  cg->add_option("--flat", cg_flat, "Write the flattened graph");
  cg->add_option("--annotate", cg_annotate, "Embed the result as a syscall-list note in this ELF");
  cg->add_option("--out", cg_out, "Output path for --annotate");
  cg->callback([&] {
    action = [&] {
      std::vector<CallGraphDoc> docs;
      for (const auto& in : cg_inputs) {
        auto bytes = detail::read_file(in);
        if (bytes.size() >= 4 && bytes[0] == 0x7F && bytes[1] == 'E' && bytes[2] == 'L' &&
            bytes[3] == 'F') {
          auto img = parse_image(std::move(bytes), in);
          auto note = read_annotation(img, NoteType::CallGraphDoc);
          if (!note) throw Error(ErrorKind::BadDocument, in + " has no call-graph note");
          docs.push_back(parse_callgraph_doc(
              std::string_view(reinterpret_cast<const char*>(note->payload.data()),
                               note->payload.size())));
        } else {
          docs.push_back(parse_callgraph_doc(
              std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size())));
        }
      }
      auto graph = resolve_linkage(docs);
      resolve_indirect(graph);
      auto flat = flatten(graph);
      auto q = reachable_from_entries(flat, cg_entries,
                                      cg_library ? LinkMode::Library : LinkMode::StaticLink);
      for (const auto& w : graph.warnings) warn(w);
      for (const auto& w : q.warnings) warn(w);
      if (!cg_flat.empty()) write_json_file(cg_flat, to_json(flat));
      if (!cg_annotate.empty()) {
        auto img = load_image(cg_annotate);
        std::optional<fs::path> out;
        if (!cg_out.empty()) out = cg_out;
        auto p = write_annotation(img, {NoteType::SyscallList, encode_syscall_list(q.syscalls)}, out);
        if (!g.json) std::cout << "annotated " << p.string() << "\n";
      }
      if (g.json) {
        json j;
        j["syscalls"] = q.syscalls.vector();
        j["unresolved_calls"] = json::array();
        for (const auto& [from, to] : graph.unresolved_calls)
          j["unresolved_calls"].push_back({from, to});
        j["warnings"] = graph.warnings;
        print_json(j);
      } else {
        std::cout << q.syscalls.size() << " syscalls: " << join(q.syscalls) << "\n";
        for (const auto& [from, to] : graph.unresolved_calls)
          std::cout << "external call " << from << " -> " << to << "\n";
      }
      return kOk;
    };
  });

  // merge
  auto* mg = app.add_subcommand("merge", "Merge syscalls across shared-library dependencies");
  std::string mg_root, mg_maps, mg_out;
  std::vector<std::string> mg_paths;
  bool mg_permissive = false, mg_strict = false, mg_no_defaults = false;
  std::size_t mg_budget = kDefaultBudget;
  mg->add_option("--root", mg_root)->required();
  mg->add_option("--lib-map", mg_maps, "Directory of *.map.json export maps");
  mg->add_option("--search-path", mg_paths, "Library search path (repeatable)");
  auto* strict_flag = mg->add_flag("--strict", mg_strict, "Missing libraries/maps are errors (default)");
  mg->add_flag("--permissive", mg_permissive, "Missing libraries/maps are warnings")
      ->excludes(strict_flag);
  mg->add_flag("--no-default-paths", mg_no_defaults,
               "Only search the given paths (no LD_LIBRARY_PATH, no built-in list)");
  mg->add_option("--out", mg_out, "Allowlist output");
  mg->add_option("--budget", mg_budget)->capture_default_str();
  mg->callback([&] {
    action = [&] {
      auto root = load_image(mg_root);
      std::vector<fs::path> explicit_paths(mg_paths.begin(), mg_paths.end());
      auto search = default_search_paths(explicit_paths, !mg_no_defaults, !mg_no_defaults);
      const auto strictness = strictness_of(mg_permissive);
      auto closure = resolve_dependencies(root, search, strictness);
      std::map<std::string, ExportSyscallMap> maps;
      if (!mg_maps.empty()) maps = load_export_maps(mg_maps);
      auto root_set = analyze_binary(root, mg_budget, default_threads()).map.init;
      auto merged = merge_sets(closure, root_set, maps, strictness, mg_budget);
      for (const auto& w : closure.warnings) warn(w);
      for (const auto& w : merged.warnings) warn(w);
      Allowlist list;
      list.numbers = merged.syscalls;
      if (!mg_out.empty()) write_json_file(mg_out, to_json(list));
      if (g.json) {
        json j = to_json(list);
        j["libraries"] = json::array();
        for (const auto& l : closure.libraries) j["libraries"].push_back(l.name);
        j["resolution"] = closure.resolution_log;
        j["warnings"] = merged.warnings;
        print_json(j);
      } else {
        std::cout << closure.libraries.size() << " libraries, " << merged.syscalls.size()
                  << " syscalls: " << join(merged.syscalls) << "\n";
      }
      return kOk;
    };
  });

  // genfilter
  auto* gf = app.add_subcommand("genfilter", "Compile an allowlist to a seccomp-BPF program");
  std::string gf_allow, gf_mode = "kill", gf_out;
  gf->add_option("--allowlist", gf_allow)->required();
  gf->add_option("--mode", gf_mode, "Default action: kill, errno[:N], trace, log")
      ->capture_default_str();
  gf->add_option("--emit-bpf", gf_out, "Raw program output (8 bytes per instruction, LE)");
  gf->callback([&] {
    action = [&] {
      auto list = load_allowlist(gf_allow);
      auto prog = build_filter(list, parse_default_action(gf_mode));
      if (!gf_out.empty()) detail::write_file_atomic(gf_out, encode_program(prog.instructions));
      if (g.json) {
        print_json({{"instructions", prog.instructions.size()},
                    {"default_action", to_string(prog.default_action)},
                    {"allowed", list.numbers.vector()}});
      } else {
        std::cout << prog.instructions.size() << " instructions, default "
                  << to_string(prog.default_action) << ", " << list.numbers.size()
                  << " syscalls allowed\n";
      }
      return kOk;
    };
  });

  // launch
  auto* la = app.add_subcommand("launch", "Run a program under its allowlist filter");
  std::string la_allow, la_mode = "enforce-kill";
  int la_errno = EPERM;
  std::vector<std::string> la_cmd;
  la->add_option("--allowlist", la_allow)->required();
  la->add_option("--mode", la_mode, "enforce-kill, enforce-errno or log-only")->capture_default_str();
  la->add_option("--errno", la_errno, "errno for enforce-errno")->capture_default_str();
  la->add_option("command", la_cmd, "-- target args...")->required();
  la->callback([&] {
    action = [&] {
      auto list = load_allowlist(la_allow);
      const std::vector<std::string> args(la_cmd.begin() + 1, la_cmd.end());
      auto r = launch(la_cmd.front(), args, list, parse_launch_mode(la_mode),
                      static_cast<std::uint16_t>(la_errno));
      if (g.json) {
        json j{{"status", to_string(r.status)}};
        if (parse_launch_mode(la_mode) == LaunchMode::LogOnly) {
          j["violations"] = r.violations.vector();
          j["startup_violations"] = r.startup_violations.vector();
        }
        std::cerr << j.dump() << "\n";
      } else if (parse_launch_mode(la_mode) == LaunchMode::LogOnly) {
        if (!r.violations.empty()) warn("violations: " + names(r.violations));
        if (!r.startup_violations.empty())
          warn("violations during startup: " + names(r.startup_violations));
      }
      return r.status.shell_code();
    };
  });

  // patch
  auto* pa = app.add_subcommand("patch", "Embed the allowlist and an installer dependency");
  std::string pa_bin, pa_allow, pa_out, pa_installer;
  pa->add_option("binary", pa_bin)->required();
  pa->add_option("--allowlist", pa_allow)->required();
  pa->add_option("--installer", pa_installer, "Installer shared library");
  pa->add_option("--out", pa_out);
  pa->callback([&] {
    action = [&] {
      auto list = load_allowlist(pa_allow);
      auto img = load_image(pa_bin);
      std::optional<fs::path> out;
      if (!pa_out.empty()) out = pa_out;
      auto p = patch(img, list.numbers, pa_installer.empty() ? default_installer() : fs::path(pa_installer), out);
      if (g.json) print_json({{"patched", p.string()}});
      else std::cout << p.string() << "\n";
      return kOk;
    };
  });

  // trace
  auto* tr = app.add_subcommand("trace", "Record the syscalls a program executes");
  bool tr_no_follow = false, tr_startup = false;
  std::string tr_mech = "auto", tr_out;
  std::vector<std::string> tr_cmd;
  tr->add_flag("--no-follow", tr_no_follow, "Do not trace child processes");
  tr->add_flag("--include-startup", tr_startup, "Count syscalls before the program entry point");
  tr->add_option("--mechanism", tr_mech)
      ->check(CLI::IsMember({"auto", "seccomp", "syscall-stop"}))
      ->capture_default_str();
  tr->add_option("--out", tr_out, "Report output");
  tr->add_option("command", tr_cmd, "-- target args...")->required();
  tr->callback([&] {
    action = [&] {
      PtraceConfig cfg;
      cfg.target = tr_cmd.front();
      cfg.args.assign(tr_cmd.begin() + 1, tr_cmd.end());
      cfg.follow_children = !tr_no_follow;
      cfg.mechanism = tr_mech == "seccomp"        ? TraceMechanism::Seccomp
                      : tr_mech == "syscall-stop" ? TraceMechanism::SyscallStop
                                                  : TraceMechanism::Auto;
      auto r = trace(cfg, {tr_startup});
      auto j = to_json(r);
      if (!tr_out.empty()) write_json_file(tr_out, j);
      if (g.json || tr_out.empty()) print_json(j);
      else std::cout << r.observed.size() << " syscalls observed: " << names(r.observed) << "\n";
      return kOk;
    };
  });

  // refine
  auto* rf = app.add_subcommand("refine", "Cross-reference a static allowlist with a trace");
  std::string rf_static, rf_report, rf_policy = "add-only", rf_out;
  bool rf_startup = false;
  rf->add_option("--static", rf_static)->required();
  rf->add_option("--report", rf_report)->required();
  rf->add_option("--policy", rf_policy)
      ->check(CLI::IsMember({"add-only", "add-and-remove"}))
      ->capture_default_str();
  rf->add_flag("--include-startup", rf_startup, "Also add syscalls seen before entry");
  rf->add_option("--out", rf_out, "Refined allowlist output");
  rf->callback([&] {
    action = [&] {
      auto list = load_allowlist(rf_static);
      auto report = trace_report_from_json(read_json_file(rf_report));
      auto observed = rf_startup ? (report.observed | report.startup) : report.observed;
      auto r = refine(list.numbers, observed,
                      rf_policy == "add-only" ? RefinePolicy::AddOnly : RefinePolicy::AddAndRemove);
      Allowlist out;
      out.numbers = r.final_set;
      if (!rf_out.empty()) write_json_file(rf_out, to_json(out));
      const double over = overapproximation(list.numbers, observed);
      if (g.json) {
        print_json({{"added", r.added.vector()},
                    {"removable", r.removable.vector()},
                    {"final", r.final_set.vector()},
                    {"overapproximation", over}});
      } else {
        std::cout << "added: " << names(r.added) << "\nremovable: " << names(r.removable)
                  << "\nfinal: " << r.final_set.size() << " syscalls\noverapproximation: "
                  << over << "\n";
      }
      return kOk;
    };
  });

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "CVE mitigation report for an allowlist");
  std::string ev_allow, ev_samples;
  bool ev_no_eq = false;
  ev->add_option("--allowlist", ev_allow)->required();
  ev->add_option("--samples", ev_samples)->required();
  ev->add_flag("--no-equivalents", ev_no_eq, "Do not expand equivalent syscalls");
  ev->callback([&] {
    action = [&] {
      auto list = load_allowlist(ev_allow);
      auto samples = samples_from_json(read_json_file(ev_samples));
      const std::size_t before = samples.size();
      if (!ev_no_eq) samples = expand_equivalents(samples);
      auto r = evaluate(list.numbers, samples);
      if (g.json) {
        auto j = to_json(r);
        j["input_samples"] = before;
        print_json(j);
        return kOk;
      }
      std::printf("%-20s %8s %10s\n", "CVE", "samples", "mitigated");
      for (const auto& v : r.cves)
        std::printf("%-20s %8zu %10zu%s\n", v.cve.c_str(), v.samples, v.mitigated,
                    v.fully_mitigated() ? "  full" : "");
      std::printf("samples %zu -> %zu after expansion\n", before, samples.size());
      std::printf("fully mitigated CVEs: %zu/%zu (%.2f%%)\n", r.fully_mitigated_cves, r.total_cves,
                  r.fully_mitigated_pct);
      std::printf("subvariants mitigated: %.2f%% (per-CVE mean), %zu/%zu pooled (%.2f%%)\n",
                  r.subvariant_mitigated_pct, r.mitigated_samples, r.total_samples,
                  r.pooled_sample_pct);
      std::printf("exec blocked: %s, mprotect blocked: %s\n", r.exec_blocked ? "yes" : "no",
                  r.mprotect_blocked ? "yes" : "no");
      return kOk;
    };
  });

  // pipeline
  auto* pl = app.add_subcommand("pipeline", "extract, map, merge, [trace, refine], genfilter, [patch]");
  PipelineConfig pc;
  pc.threads = default_threads();
  std::string pl_bin, pl_mode = "kill", pl_policy = "add-only", pl_out = "chestnut-out";
  std::string pl_maps, pl_installer;
  std::vector<std::string> pl_paths, pl_args;
  bool pl_permissive = false, pl_strict = false, pl_no_defaults = false;
  pl->add_option("binary", pl_bin)->required();
  pl->add_option("args", pl_args, "-- arguments for the traced run");
  pl->add_option("--out-dir", pl_out)->capture_default_str();
  pl->add_option("--budget", pc.budget)->capture_default_str();
  pl->add_option("--threads", pc.threads);
  pl->add_option("--search-path", pl_paths);
  pl->add_option("--lib-map", pl_maps);
  auto* pl_strict_flag = pl->add_flag("--strict", pl_strict);
  pl->add_flag("--permissive", pl_permissive)->excludes(pl_strict_flag);
  pl->add_flag("--no-default-paths", pl_no_defaults);
  pl->add_option("--mode", pl_mode, "Default filter action")->capture_default_str();
  pl->add_flag("--with-trace", pc.with_trace, "Refine with a traced run before genfilter");
  pl->add_flag("--include-startup", pc.include_startup);
  pl->add_option("--policy", pl_policy)->check(CLI::IsMember({"add-only", "add-and-remove"}));
  pl->add_flag("--patch", pc.patch, "Also produce a self-enforcing patched binary");
  pl->add_option("--installer", pl_installer);
  pl->callback([&] {
    action = [&] {
      pc.target = pl_bin;
      pc.target_args = pl_args;
      pc.out_dir = pl_out;
      pc.search_paths.assign(pl_paths.begin(), pl_paths.end());
      pc.use_environment_paths = pc.use_builtin_paths = !pl_no_defaults;
      pc.strictness = strictness_of(pl_permissive);
      if (!pl_maps.empty()) pc.lib_map_dir = pl_maps;
      pc.default_action = parse_default_action(pl_mode);
      pc.policy = pl_policy == "add-only" ? RefinePolicy::AddOnly : RefinePolicy::AddAndRemove;
      if (pc.patch) pc.installer = pl_installer.empty() ? default_installer() : fs::path(pl_installer);
      pc.launcher = self_path();
      auto s = run_pipeline(pc);
      for (const auto& w : s.warnings) warn(w);
      if (g.json) {
        print_json(to_json(s));
        return kOk;
      }
      std::cout << "target:        " << s.target << " (" << s.kind << ")\n"
                << "sites:         " << s.sites << " (" << s.unresolved_sites << " unresolved)\n"
                << "libraries:     " << s.libraries.size() << "\n"
                << "static set:    " << s.static_set.size() << "\n"
                << "final set:     " << s.final_set.size() << "\n"
                << "blocked:       " << s.blocked << "/" << kLinuxSyscallCount << "\n"
                << "exec blocked:  " << (s.exec_blocked ? "yes" : "no") << "\n"
                << "mprotect blocked: " << (s.mprotect_blocked ? "yes" : "no") << "\n";
      if (s.overapproximation)
        std::cout << "overapproximation: " << *s.overapproximation << "\n";
      for (const auto& a : s.artifacts) std::cout << "wrote " << a.string() << "\n";
      return kOk;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }
  try {
    if (g.arch != "x86_64")
      throw Error(ErrorKind::UnsupportedArch, g.arch + " is reserved but not implemented");
    return action ? action() : kUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.is_enforcement() ? kEnforcement : kAnalysis;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kAnalysis;
  }
}
