#pragma once

#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "chestnut/syscall_set.hpp"

namespace testsupport {

namespace fs = std::filesystem;

inline fs::path fixture(const std::string& name) { return fs::path(CHESTNUT_FIXTURE_DIR) / name; }

struct Captured {
  int status = -1;  // shell-style: 128+signal for signal deaths
  std::string out;
};

inline Captured run_capture(const std::string& cmd) {
  Captured c;
  FILE* p = ::popen((cmd + " 2>&1").c_str(), "r");
  if (!p) return c;
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) c.out.append(buf.data(), n);
  const int st = ::pclose(p);
  if (WIFEXITED(st)) c.status = WEXITSTATUS(st);
  else if (WIFSIGNALED(st)) c.status = 128 + WTERMSIG(st);
  return c;
}

// Ground truth from the assembler sources: a label "expect_<nr>_<tag>"
// sits on every site whose number is designed to be recoverable,
// "expect_unresolved_<tag>" on every site that is designed not to be.
struct Labels {
  std::map<std::uint64_t, std::optional<std::uint32_t>> sites;
  chestnut::SyscallSet numbers;
  std::size_t unresolved = 0;
};

inline Labels nm_labels(const fs::path& bin) {
  Labels l;
  auto c = run_capture(std::string(CHESTNUT_NM) + " " + bin.string());
  std::istringstream in(c.out);
  std::string addr, type, name;
  while (in >> addr >> type >> name) {
    if (name.rfind("expect_", 0) != 0) continue;
    const auto vaddr = std::stoull(addr, nullptr, 16);
    const auto rest = name.substr(7);
    if (rest.rfind("unresolved_", 0) == 0) {
      l.sites[vaddr] = std::nullopt;
      ++l.unresolved;
    } else {
      const auto nr = static_cast<std::uint32_t>(std::stoul(rest.substr(0, rest.find('_'))));
      l.sites[vaddr] = nr;
      l.numbers.insert(nr);
    }
  }
  return l;
}

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "chestnut-test-XXXXXX").string();
    path_ = ::mkdtemp(tmpl.data());
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

// Directed graph with up to max_nodes nodes and max_edges distinct edges.
// cyclic=false orders edges from lower to higher index.
struct RandomGraph {
  std::size_t n = 0;
  std::vector<std::vector<std::size_t>> adj;
};

inline RandomGraph random_graph(std::mt19937_64& rng, std::size_t max_nodes, std::size_t max_edges,
                                bool force_cycle = false) {
  RandomGraph g;
  g.n = std::uniform_int_distribution<std::size_t>(1, max_nodes)(rng);
  g.adj.assign(g.n, {});
  const std::size_t cap = std::min(max_edges, g.n * g.n);
  const std::size_t m = std::uniform_int_distribution<std::size_t>(0, cap)(rng);
  std::uniform_int_distribution<std::size_t> pick(0, g.n - 1);
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (std::size_t i = 0; i < m * 2 && seen.size() < m; ++i) {
    auto a = pick(rng), b = pick(rng);
    if (seen.insert({a, b}).second) g.adj[a].push_back(b);
  }
  if (force_cycle && g.n >= 2) {
    // Guarantee at least one non-trivial strongly connected component.
    auto a = pick(rng), b = pick(rng);
    if (a == b) b = (a + 1) % g.n;
    if (seen.insert({a, b}).second) g.adj[a].push_back(b);
    if (seen.insert({b, a}).second) g.adj[b].push_back(a);
  }
  return g;
}

// Plain DFS from every node; the oracle for every closure test.
inline std::vector<std::vector<bool>> brute_reach(const RandomGraph& g) {
  std::vector<std::vector<bool>> r(g.n, std::vector<bool>(g.n, false));
  for (std::size_t s = 0; s < g.n; ++s) {
    std::vector<std::size_t> st{s};
    r[s][s] = true;
    while (!st.empty()) {
      auto u = st.back();
      st.pop_back();
      for (auto v : g.adj[u])
        if (!r[s][v]) {
          r[s][v] = true;
          st.push_back(v);
        }
    }
  }
  return r;
}

inline std::vector<chestnut::SyscallSet> random_own_sets(std::mt19937_64& rng, std::size_t n) {
  std::vector<chestnut::SyscallSet> own(n);
  std::uniform_int_distribution<int> count(0, 3);
  std::uniform_int_distribution<std::uint32_t> nr(0, 63);
  for (auto& s : own)
    for (int k = count(rng); k > 0; --k) s.insert(nr(rng));
  return own;
}

inline std::vector<chestnut::SyscallSet> brute_closure(const RandomGraph& g,
                                                       const std::vector<chestnut::SyscallSet>& own) {
  auto r = brute_reach(g);
  std::vector<chestnut::SyscallSet> out(g.n);
  for (std::size_t s = 0; s < g.n; ++s)
    for (std::size_t t = 0; t < g.n; ++t)
      if (r[s][t]) out[s] |= own[t];
  return out;
}

}  // namespace testsupport
