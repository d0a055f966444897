#include <gtest/gtest.h>

#include <chrono>
#include <random>

#include "chestnut/func_map.hpp"
#include "chestnut/syscall_table.hpp"
#include "support.hpp"

using namespace chestnut;
using testsupport::fixture;

namespace {

// A call graph with synthetic sites: node i owns site vaddr 0x1000*(i+1)+k.
struct Synthetic {
  BinCallGraph graph;
  std::vector<SyscallSite> sites;
  std::vector<SyscallSet> own;
  std::vector<std::size_t> own_unresolved;
};

Synthetic make_synthetic(std::mt19937_64& rng, const testsupport::RandomGraph& rg) {
  Synthetic s;
  auto& g = s.graph;
  g.nodes.resize(rg.n);
  g.edges.assign(rg.n, {});
  g.address_taken.assign(rg.n, false);
  g.imports.assign(rg.n, {});
  s.own = testsupport::random_own_sets(rng, rg.n);
  s.own_unresolved.assign(rg.n, 0);
  std::bernoulli_distribution exported(0.3), taken(0.05), root(0.03), unresolved(0.1);
  for (std::size_t i = 0; i < rg.n; ++i) {
    g.nodes[i].start = 0x1000 * (i + 1);
    g.nodes[i].end = g.nodes[i].start + 0x1000;
    g.nodes[i].name = "fn" + std::to_string(i);
    g.nodes[i].exported = exported(rng);
    g.address_taken[i] = taken(rng);
    if (root(rng)) g.roots.push_back(i);
    for (auto v : rg.adj[i]) g.add_edge(i, v);
    std::uint64_t k = 0;
    for (auto nr : s.own[i]) {
      const std::uint64_t va = g.nodes[i].start + k++;
      s.sites.push_back({va, nr, Resolution::Immediate, 1});
      g.site_owner.emplace(va, i);
    }
    if (unresolved(rng)) {
      const std::uint64_t va = g.nodes[i].start + k++;
      s.sites.push_back({va, std::nullopt, Resolution::Unresolved, 0});
      g.site_owner.emplace(va, i);
      s.own_unresolved[i] = 1;
    }
  }
  return s;
}

}  // namespace

TEST(FuncMap, SharedObjectExports) {
  auto a = analyze_binary(load_image(fixture("libfg.so")));
  EXPECT_EQ(a.map.exports.at("g"), (SyscallSet{1}));
  // f reaches g through its own PLT slot.
  EXPECT_EQ(a.map.exports.at("f"), (SyscallSet{1}));
  EXPECT_EQ(a.map.exports.at("top"), (SyscallSet{0, 1, 60}));
  // h is local and unreachable: its getpid appears nowhere.
  EXPECT_TRUE(a.extraction.syscalls.contains(39));
  for (const auto& [name, set] : a.map.exports) EXPECT_FALSE(set.contains(39)) << name;
  EXPECT_TRUE(a.map.init.empty());
  EXPECT_EQ(a.map.exports.count("a"), 0u);
}

TEST(FuncMap, StrippedLibraryOverapproximates) {
  // Without .symtab the unreachable h is absorbed into top's region.
  auto full = analyze_binary(load_image(fixture("libfg.so")));
  auto stripped = analyze_binary(load_image(fixture("libfg_stripped.so")));
  for (const auto& [name, set] : full.map.exports) {
    ASSERT_TRUE(stripped.map.exports.count(name));
    EXPECT_TRUE(set.is_subset_of(stripped.map.exports.at(name))) << name;
  }
  EXPECT_EQ(stripped.map.exports.at("f"), (SyscallSet{1}));
  EXPECT_EQ(stripped.map.exports.at("top"), (SyscallSet{0, 1, 39, 60}));
}

TEST(FuncMap, DependencyChainLibraries) {
  auto fx = analyze_binary(load_image(fixture("libfx.so")));
  EXPECT_EQ(fx.map.exports.at("fx_write"), (SyscallSet{1}));
  EXPECT_EQ(fx.map.exports.at("fx_unused"), (SyscallSet{36}));
  EXPECT_NE(std::find(fx.imports.begin(), fx.imports.end(), "fy_pid"), fx.imports.end());
  bool stub_seen = false;
  for (std::size_t i = 0; i < fx.graph.nodes.size(); ++i)
    stub_seen |= fx.graph.imports[i].count("fy_pid") > 0;
  EXPECT_TRUE(stub_seen);

  auto fy = analyze_binary(load_image(fixture("libfy.so")));
  EXPECT_EQ(fy.map.exports.at("fy_pid"), (SyscallSet{39}));
  EXPECT_EQ(fy.map.exports.at("fy_unused"), (SyscallSet{37}));
}

TEST(FuncMap, StaticEntryReachesWrapperSites) {
  auto a = analyze_binary(load_image(fixture("musl_wrapper")));
  EXPECT_EQ(a.map.init, (SyscallSet{60, 110}));
  EXPECT_EQ(a.map.init_unresolved, 1u);
}

TEST(FuncMap, LoaderStartupSyscallsReachable) {
  // The dynamic loader reaches its thread setup only through a function
  // pointer handed to its startup code; the loader has no .symtab.
  const char* ld = "/lib64/ld-linux-x86-64.so.2";
  if (!fs::exists(ld)) GTEST_SKIP() << "no loader at " << ld;
  auto a = analyze_binary(load_image(ld));
  for (const char* name : {"set_tid_address", "set_robust_list", "rseq", "mmap", "openat"}) {
    auto nr = syscall_number(name);
    if (!a.extraction.syscalls.contains(*nr)) continue;
    EXPECT_TRUE(a.map.init.contains(*nr)) << name;
  }
}

// Oracle: plain DFS closure from each export plus every address-taken node.
TEST(FuncMapProperty, MatchesBruteForceOn500Graphs) {
  std::mt19937_64 rng(2024);
  const auto t0 = std::chrono::steady_clock::now();
  for (int round = 0; round < 500; ++round) {
    auto rg = testsupport::random_graph(rng, 200, 1000);
    auto s = make_synthetic(rng, rg);
    auto map = map_exports(s.graph, s.sites);
    auto reach = testsupport::brute_reach(rg);

    std::vector<bool> from_taken(rg.n, false);
    for (std::size_t t = 0; t < rg.n; ++t)
      if (s.graph.address_taken[t])
        for (std::size_t v = 0; v < rg.n; ++v)
          if (reach[t][v]) from_taken[v] = true;

    auto closure = [&](std::vector<std::size_t> from, SyscallSet& set, std::size_t& unresolved) {
      std::vector<bool> hit(from_taken);
      for (auto f : from)
        for (std::size_t v = 0; v < rg.n; ++v)
          if (reach[f][v]) hit[v] = true;
      for (std::size_t v = 0; v < rg.n; ++v)
        if (hit[v]) {
          set |= s.own[v];
          unresolved += s.own_unresolved[v];
        }
    };

    for (std::size_t i = 0; i < rg.n; ++i) {
      if (!s.graph.nodes[i].exported) continue;
      SyscallSet want;
      std::size_t want_unresolved = 0;
      closure({i}, want, want_unresolved);
      const auto name = *s.graph.nodes[i].name;
      ASSERT_EQ(map.exports.at(name), want) << "round " << round << " node " << i;
      const auto got_unresolved = map.unresolved.count(name) ? map.unresolved.at(name) : 0;
      ASSERT_EQ(got_unresolved, want_unresolved) << "round " << round << " node " << i;
    }
    SyscallSet init;
    std::size_t init_unresolved = 0;
    closure(s.graph.roots, init, init_unresolved);
    ASSERT_EQ(map.init, init) << "round " << round;
    ASSERT_EQ(map.init_unresolved, init_unresolved) << "round " << round;
  }
  EXPECT_LT(std::chrono::steady_clock::now() - t0, std::chrono::seconds(10));
}
