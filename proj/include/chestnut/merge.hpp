#pragma once

#include <cstdlib>
#include <deque>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chestnut/allowlist.hpp"
#include "chestnut/elf.hpp"
#include "chestnut/func_map.hpp"
#include "chestnut/syscall_set.hpp"

namespace chestnut {

enum class Strictness { Strict, Permissive };

struct LibraryImage {
  std::string name;  // DT_NEEDED spelling, or the interpreter path
  fs::path path;
  ElfImage image;
};

struct DependencyClosure {
  ElfImage root;
  std::vector<LibraryImage> libraries;  // breadth-first, each once
  std::map<std::string, std::string> resolution_log;  // import -> providing library
  std::vector<std::string> missing_libraries;
  std::vector<std::string> unresolved_imports;
  std::vector<std::string> warnings;
};

inline std::vector<fs::path> builtin_search_paths() {
  return {"/lib/x86_64-linux-gnu", "/usr/lib/x86_64-linux-gnu", "/lib64", "/usr/lib64",
          "/lib", "/usr/lib"};
}

// Explicit paths, then LD_LIBRARY_PATH, then the built-in list.
inline std::vector<fs::path> default_search_paths(const std::vector<fs::path>& explicit_paths,
                                                  bool use_environment = true,
                                                  bool use_builtin = true) {
  std::vector<fs::path> out(explicit_paths);
  if (use_environment) {
    if (const char* env = std::getenv("LD_LIBRARY_PATH")) {
      std::string s(env);
      std::size_t pos = 0;
      while (pos <= s.size()) {
        auto next = s.find(':', pos);
        if (next == std::string::npos) next = s.size();
        if (next > pos) out.emplace_back(s.substr(pos, next - pos));
        pos = next + 1;
      }
    }
  }
  if (use_builtin)
    for (auto& p : builtin_search_paths()) out.push_back(std::move(p));
  return out;
}

namespace detail {

inline std::optional<fs::path> find_library(const std::string& name,
                                            const std::vector<fs::path>& search) {
  std::error_code ec;
  if (name.find('/') != std::string::npos) {
    if (fs::is_regular_file(name, ec)) return fs::path(name);
    return std::nullopt;
  }
  for (const auto& dir : search) {
    auto p = dir / name;
    if (!fs::is_regular_file(p, ec)) continue;
    // Skip files of the wrong class, as the loader does.
    try {
      auto img = load_image(p);
      if (img.kind == ImageKind::SharedObject) return p;
    } catch (const Error&) {
    }
  }
  return std::nullopt;
}

inline std::string canonical_key(const fs::path& p) {
  std::error_code ec;
  auto c = fs::canonical(p, ec);
  return ec ? p.string() : c.string();
}

}  // namespace detail

// Loader-like breadth-first walk over DT_NEEDED. The interpreter joins the
// closure when present. Every image's imports are bound to the first image
// in global scope order (root, then libraries) that exports the name.
inline DependencyClosure resolve_dependencies(ElfImage root, const std::vector<fs::path>& search,
                                              Strictness strictness = Strictness::Strict) {
  DependencyClosure c;
  c.root = std::move(root);
  if (c.root.kind == ImageKind::ExecutableStatic && c.root.dynamic.needed.empty()) return c;

  std::set<std::string> seen_names, seen_files;
  std::deque<std::string> queue;
  auto enqueue = [&](const std::string& n) {
    if (seen_names.insert(n).second) queue.push_back(n);
  };
  for (const auto& n : c.root.dynamic.needed) enqueue(n);
  if (c.root.interpreter) enqueue(*c.root.interpreter);

  while (!queue.empty()) {
    auto name = queue.front();
    queue.pop_front();
    auto path = detail::find_library(name, search);
    if (!path) {
      if (strictness == Strictness::Strict) throw Error(ErrorKind::MissingLibrary, name);
      c.missing_libraries.push_back(name);
      c.warnings.push_back("missing library " + name);
      continue;
    }
    if (!seen_files.insert(detail::canonical_key(*path)).second) continue;
    auto img = load_image(*path);
    for (const auto& n : img.dynamic.needed) enqueue(n);
    if (img.soname) seen_names.insert(*img.soname);
    c.libraries.push_back({name, *path, std::move(img)});
  }

  std::map<std::string, std::string> provider;
  auto offer = [&](const ElfImage& img, const std::string& label) {
    for (const auto& e : img.dynamic.exports) provider.emplace(e.name, label);
  };
  offer(c.root, c.root.path.filename().string());
  for (const auto& l : c.libraries) offer(l.image, l.name);

  std::set<std::string> unresolved;
  auto bind = [&](const ElfImage& img) {
    for (const auto& imp : img.dynamic.imports) {
      auto it = provider.find(imp.name);
      if (it != provider.end()) {
        c.resolution_log.emplace(imp.name, it->second);
      } else if (!imp.weak) {
        unresolved.insert(imp.name);
      }
    }
  };
  bind(c.root);
  for (const auto& l : c.libraries) bind(l.image);
  if (!unresolved.empty() && c.missing_libraries.empty() && strictness == Strictness::Strict)
    throw Error(ErrorKind::UnresolvedImport, *unresolved.begin());
  for (const auto& u : unresolved) {
    c.unresolved_imports.push_back(u);
    c.warnings.push_back("unresolved import " + u);
  }
  return c;
}

// ---- export-map documents ---------------------------------------------------

inline constexpr int kExportMapVersion = 1;

inline nlohmann::json export_map_to_json(const ExportSyscallMap& m, const std::string& library) {
  nlohmann::json j;
  j["version"] = kExportMapVersion;
  j["arch"] = "x86_64";
  j["library"] = library;
  j["exports"] = nlohmann::json::object();
  for (const auto& [name, set] : m.exports) j["exports"][name] = set.vector();
  j["init"] = m.init.vector();
  j["unresolved"] = m.unresolved;
  j["init_unresolved"] = m.init_unresolved;
  return j;
}

inline ExportSyscallMap export_map_from_json(const nlohmann::json& j) {
  ExportSyscallMap m;
  try {
    if (j.value("arch", std::string("x86_64")) != "x86_64")
      throw Error(ErrorKind::UnsupportedArch, j.at("arch").get<std::string>());
    for (const auto& [name, arr] : j.at("exports").items())
      m.exports[name] = SyscallSet(arr.get<std::vector<std::uint32_t>>());
    m.init = SyscallSet(j.value("init", std::vector<std::uint32_t>{}));
    m.unresolved = j.value("unresolved", std::map<std::string, std::size_t>{});
    m.init_unresolved = j.value("init_unresolved", std::size_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadDocument, e.what());
  }
  return m;
}

inline std::string export_map_filename(const std::string& library) {
  return fs::path(library).filename().string() + ".map.json";
}

// Reads every "*.map.json" in dir, keyed by the library field.
inline std::map<std::string, ExportSyscallMap> load_export_maps(const fs::path& dir) {
  std::map<std::string, ExportSyscallMap> out;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw Error(ErrorKind::Io, "not a directory " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.size() > 9 && name.ends_with(".map.json")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    auto j = read_json_file(f);
    auto lib = j.value("library", f.filename().string().substr(0, f.filename().string().size() - 9));
    out.emplace(fs::path(lib).filename().string(), export_map_from_json(j));
  }
  return out;
}

// ---- merging ----------------------------------------------------------------

struct MergeResult {
  SyscallSet syscalls;
  // Where each contribution came from, for reports: "root", "<lib>:init",
  // "<lib>:<export>".
  std::map<std::string, SyscallSet> contributions;
  std::vector<std::string> analyzed_on_the_fly;
  std::vector<std::string> warnings;
};

namespace detail {

inline const ExportSyscallMap* find_map(const std::map<std::string, ExportSyscallMap>& maps,
                                        const LibraryImage& lib) {
  for (const auto& key : {fs::path(lib.name).filename().string(),
                          lib.image.soname.value_or(std::string{}),
                          lib.path.filename().string()}) {
    if (key.empty()) continue;
    if (auto it = maps.find(key); it != maps.end()) return &it->second;
  }
  return nullptr;
}

}  // namespace detail

// root_set: the root's own reachable set (entry, initializers and
// address-taken functions). Each library contributes its initializer set and,
// for every import any image in the closure binds to it, that export's set.
inline MergeResult merge_sets(const DependencyClosure& closure, const SyscallSet& root_set,
                              const std::map<std::string, ExportSyscallMap>& maps,
                              Strictness strictness = Strictness::Strict,
                              std::size_t budget = kDefaultBudget) {
  MergeResult r;
  r.syscalls = root_set;
  r.contributions["root"] = root_set;

  std::map<std::string, ExportSyscallMap> owned;
  std::map<std::string, const ExportSyscallMap*> by_lib;
  for (const auto& lib : closure.libraries) {
    const ExportSyscallMap* m = detail::find_map(maps, lib);
    if (!m) {
      if (strictness == Strictness::Strict) throw Error(ErrorKind::MissingExportMap, lib.name);
      owned.emplace(lib.name, analyze_binary(lib.image, budget).map);
      m = &owned.at(lib.name);
      r.analyzed_on_the_fly.push_back(lib.name);
      r.warnings.push_back("no export map for " + lib.name + "; analyzed on the fly");
    }
    by_lib[lib.name] = m;
    r.syscalls |= m->init;
    r.contributions[lib.name + ":init"] = m->init;
  }

  for (const auto& [import, provider] : closure.resolution_log) {
    auto it = by_lib.find(provider);
    if (it == by_lib.end()) continue;  // bound to the root itself
    auto e = it->second->exports.find(import);
    if (e == it->second->exports.end()) continue;  // data symbol or untyped
    r.syscalls |= e->second;
    r.contributions[provider + ":" + import] = e->second;
  }

  auto imports_dlopen = [](const ElfImage& img) {
    for (const auto& i : img.dynamic.imports)
      if (i.name == "dlopen" || i.name == "dlmopen") return true;
    return false;
  };
  bool dl = imports_dlopen(closure.root);
  for (const auto& lib : closure.libraries) dl = dl || imports_dlopen(lib.image);
  if (dl)
    r.warnings.push_back(
        "dlopen is imported: libraries loaded at runtime are not covered; run the tracer");
  if (r.syscalls.contains(59) || r.syscalls.contains(322))
    r.warnings.push_back(
        "exec-family syscalls are allowed: the executed program is not analyzed; run the tracer");
  return r;
}

}  // namespace chestnut
