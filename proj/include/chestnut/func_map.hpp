#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "chestnut/elf.hpp"
#include "chestnut/function_regions.hpp"
#include "chestnut/syscall_extract.hpp"

namespace chestnut {

struct BinCallGraph {
  std::vector<FunctionRegion> nodes;
  // Adjacency lists (caller -> callees), sorted and duplicate-free.
  std::vector<std::vector<std::size_t>> edges;
  std::vector<bool> address_taken;
  // Imports reached through PLT stubs or GOT-indirect calls, per node.
  std::vector<std::set<std::string>> imports;
  // Nodes the loader or kernel enters directly: entry point and initializers.
  std::vector<std::size_t> roots;
  std::unordered_map<std::uint64_t, std::size_t> site_owner;

  void add_edge(std::size_t from, std::size_t to) {
    auto& v = edges[from];
    auto it = std::lower_bound(v.begin(), v.end(), to);
    if (it == v.end() || *it != to) v.insert(it, to);
  }
};

struct ExportSyscallMap {
  std::map<std::string, SyscallSet> exports;
  // Unresolved sites reachable from an export, by export name.
  std::map<std::string, std::size_t> unresolved;
  // Reachable from the entry point, initializers and address-taken functions.
  SyscallSet init;
  std::size_t init_unresolved = 0;
};

namespace detail {

inline std::optional<std::size_t> node_starting_at(const CodeIndex& code, std::uint64_t a) {
  auto r = code.region_of(a);
  if (r && code.regions()[*r].start == a) return r;
  return std::nullopt;
}

}  // namespace detail

// Builds the intra-binary call graph: direct calls and tail jumps become
// edges; functions whose address escapes into data, relocations or
// address-materializing instructions are marked address-taken.
inline BinCallGraph build_call_graph(const CodeIndex& code,
                                     std::span<const SyscallSite> sites = {}) {
  const ElfImage& img = code.image();
  BinCallGraph g;
  g.nodes = code.regions();
  const std::size_t n = g.nodes.size();
  g.edges.assign(n, {});
  g.address_taken.assign(n, false);
  g.imports.assign(n, {});

  std::map<std::uint64_t, std::string> got_imports;
  for (const auto& r : img.relocations)
    if (!r.symbol.empty() && (r.type == R_X86_64_JUMP_SLOT || r.type == R_X86_64_GLOB_DAT))
      got_imports.emplace(r.offset, r.symbol);
  std::map<std::string, std::uint64_t> export_addr;
  for (const auto& e : img.dynamic.exports)
    if (e.is_function) export_addr.emplace(e.name, e.vaddr);

  // Calls through the PLT or GOT to a symbol this image exports bind to the
  // local definition unless interposed; interposition is the merge's job.
  auto self_definition = [&](const std::string& sym) -> std::optional<std::size_t> {
    auto e = export_addr.find(sym);
    if (e == export_addr.end()) return std::nullopt;
    return code.region_of(e->second);
  };
  for (std::size_t i = 0; i < n; ++i)
    if (const auto& stub = g.nodes[i].import_stub) {
      g.imports[i].insert(*stub);
      if (auto def = self_definition(*stub); def && *def != i) g.add_edge(i, *def);
    }

  for (auto a : code.escaped_addresses())
    if (auto node = detail::node_starting_at(code, a)) g.address_taken[*node] = true;

  for (const auto& d : code.instructions()) {
    auto owner = code.region_of(d.vaddr);
    if (!owner) continue;
    if (d.target && (d.cls == InsnClass::Call || d.cls == InsnClass::Branch)) {
      if (auto callee = code.region_of(*d.target); callee && *callee != *owner)
        g.add_edge(*owner, *callee);
    }
    if (d.indirect && d.rip_target) {
      if (auto gi = got_imports.find(*d.rip_target); gi != got_imports.end()) {
        g.imports[*owner].insert(gi->second);
        if (auto def = self_definition(gi->second); def && *def != *owner) g.add_edge(*owner, *def);
      }
    }
  }

  auto add_root = [&](std::uint64_t a) {
    if (auto r = code.region_of(a)) g.roots.push_back(*r);
  };
  if (img.entry_vaddr) add_root(img.entry_vaddr);
  for (auto f : img.init_functions) add_root(f);
  std::sort(g.roots.begin(), g.roots.end());
  g.roots.erase(std::unique(g.roots.begin(), g.roots.end()), g.roots.end());

  for (const auto& s : sites)
    if (auto o = code.region_of(s.vaddr)) g.site_owner.emplace(s.vaddr, *o);
  return g;
}

namespace detail {

struct Reach {
  std::vector<std::uint32_t> stamp;
  std::uint32_t gen = 0;
  std::vector<std::size_t> stack;

  template <typename F>
  void visit(const BinCallGraph& g, std::span<const std::size_t> from, F&& on_node) {
    if (stamp.size() != g.nodes.size()) stamp.assign(g.nodes.size(), 0);
    ++gen;
    stack.clear();
    for (auto f : from)
      if (stamp[f] != gen) {
        stamp[f] = gen;
        stack.push_back(f);
      }
    while (!stack.empty()) {
      auto u = stack.back();
      stack.pop_back();
      on_node(u);
      for (auto v : g.edges[u])
        if (stamp[v] != gen) {
          stamp[v] = gen;
          stack.push_back(v);
        }
    }
  }
};

}  // namespace detail

// Per exported function: the syscalls of every site owned by a function
// reachable from it, plus everything reachable from address-taken functions.
inline ExportSyscallMap map_exports(const BinCallGraph& g, std::span<const SyscallSite> sites) {
  const std::size_t n = g.nodes.size();
  std::vector<SyscallSet> own(n);
  std::vector<std::size_t> own_unresolved(n, 0);
  for (const auto& s : sites) {
    auto it = g.site_owner.find(s.vaddr);
    if (it == g.site_owner.end()) continue;
    if (s.number) own[it->second].insert(*s.number);
    else ++own_unresolved[it->second];
  }

  detail::Reach reach;
  std::vector<std::size_t> taken;
  for (std::size_t i = 0; i < n; ++i)
    if (g.address_taken[i]) taken.push_back(i);

  SyscallSet taken_set;
  std::size_t taken_unresolved = 0;
  std::vector<bool> in_taken(n, false);
  reach.visit(g, taken, [&](std::size_t u) {
    in_taken[u] = true;
    taken_set |= own[u];
    taken_unresolved += own_unresolved[u];
  });

  ExportSyscallMap out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& node = g.nodes[i];
    if (!node.exported || !node.name) continue;
    SyscallSet set = taken_set;
    std::size_t unresolved = taken_unresolved;
    std::size_t root = i;
    reach.visit(g, std::span<const std::size_t>(&root, 1), [&](std::size_t u) {
      if (in_taken[u]) return;
      set |= own[u];
      unresolved += own_unresolved[u];
    });
    out.exports[*node.name] |= set;
    if (unresolved) out.unresolved[*node.name] += unresolved;
  }

  out.init = taken_set;
  out.init_unresolved = taken_unresolved;
  reach.visit(g, g.roots, [&](std::size_t u) {
    if (in_taken[u]) return;
    out.init |= own[u];
    out.init_unresolved += own_unresolved[u];
  });
  return out;
}

struct BinaryAnalysis {
  ExtractionResult extraction;
  BinCallGraph graph;
  ExportSyscallMap map;
  // Imports referenced anywhere in the image, from the dynamic symbol table.
  std::vector<std::string> imports;
};

inline BinaryAnalysis analyze_binary(const ElfImage& img, std::size_t budget = kDefaultBudget,
                                     unsigned threads = 1) {
  CodeIndex code(img);
  BinaryAnalysis a;
  a.extraction = extract_all(code, budget, threads);
  a.graph = build_call_graph(code, a.extraction.sites);
  a.map = map_exports(a.graph, a.extraction.sites);
  for (const auto& i : img.dynamic.imports) a.imports.push_back(i.name);
  return a;
}

}  // namespace chestnut
