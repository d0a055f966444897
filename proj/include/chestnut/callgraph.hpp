#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "chestnut/error.hpp"
#include "chestnut/syscall_set.hpp"

namespace chestnut {

inline constexpr int kCallGraphDocVersion = 1;

enum class Linkage { Local, GlobalStrong, GlobalWeak };

struct FunctionDecl {
  std::string name;
  std::string signature;
  Linkage linkage = Linkage::GlobalStrong;
  std::vector<std::string> aliases;
  std::vector<std::string> direct_calls;
  std::vector<std::string> indirect_call_sigs;
  bool address_taken = false;
  SyscallSet own_syscalls;
};

struct TranslationUnit {
  std::string name;
  std::vector<FunctionDecl> functions;
  // Functions referenced from global initializers (e.g. registered in a
  // static table); reachable from the synthetic "init" entry.
  std::vector<std::string> initializers;
};

// One document per object file or library.
struct CallGraphDoc {
  int version = kCallGraphDocVersion;
  std::string object;
  std::vector<TranslationUnit> units;
};

// ---- JSON -----------------------------------------------------------------

namespace detail {

inline Linkage parse_linkage(const std::string& s) {
  if (s == "local") return Linkage::Local;
  if (s == "global" || s == "global-strong" || s == "strong") return Linkage::GlobalStrong;
  if (s == "weak" || s == "global-weak") return Linkage::GlobalWeak;
  throw Error(ErrorKind::BadDocument, "unknown linkage '" + s + "'");
}

inline const char* linkage_name(Linkage l) {
  switch (l) {
    case Linkage::Local: return "local";
    case Linkage::GlobalStrong: return "global";
    case Linkage::GlobalWeak: return "weak";
  }
  return "?";
}

}  // namespace detail

inline CallGraphDoc parse_callgraph_doc(const nlohmann::json& j) {
  try {
    CallGraphDoc doc;
    doc.version = j.at("version").get<int>();
    if (doc.version != kCallGraphDocVersion)
      throw Error(ErrorKind::BadDocument,
                  "unsupported call-graph document version " + std::to_string(doc.version));
    doc.object = j.value("object", std::string{});
    for (const auto& ju : j.at("units")) {
      TranslationUnit u;
      u.name = ju.value("name", std::string{});
      u.initializers = ju.value("initializers", std::vector<std::string>{});
      for (const auto& jf : ju.at("functions")) {
        FunctionDecl f;
        f.name = jf.at("name").get<std::string>();
        f.signature = jf.at("signature").get<std::string>();
        if (f.signature.empty())
          throw Error(ErrorKind::BadDocument, "function " + f.name + " has an empty signature");
        f.linkage = detail::parse_linkage(jf.value("linkage", std::string("global")));
        f.aliases = jf.value("aliases", std::vector<std::string>{});
        f.direct_calls = jf.value("direct_calls", std::vector<std::string>{});
        f.indirect_call_sigs = jf.value("indirect_call_sigs", std::vector<std::string>{});
        f.address_taken = jf.value("address_taken", false);
        f.own_syscalls = SyscallSet(jf.value("syscalls", std::vector<std::uint32_t>{}));
        u.functions.push_back(std::move(f));
      }
      doc.units.push_back(std::move(u));
    }
    return doc;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadDocument, e.what());
  }
}

inline CallGraphDoc parse_callgraph_doc(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadDocument, e.what());
  }
  return parse_callgraph_doc(j);
}

inline nlohmann::json to_json(const CallGraphDoc& doc) {
  nlohmann::json j;
  j["version"] = doc.version;
  if (!doc.object.empty()) j["object"] = doc.object;
  j["units"] = nlohmann::json::array();
  for (const auto& u : doc.units) {
    nlohmann::json ju;
    ju["name"] = u.name;
    if (!u.initializers.empty()) ju["initializers"] = u.initializers;
    ju["functions"] = nlohmann::json::array();
    for (const auto& f : u.functions) {
      ju["functions"].push_back({{"name", f.name},
                                 {"signature", f.signature},
                                 {"linkage", detail::linkage_name(f.linkage)},
                                 {"aliases", f.aliases},
                                 {"direct_calls", f.direct_calls},
                                 {"indirect_call_sigs", f.indirect_call_sigs},
                                 {"address_taken", f.address_taken},
                                 {"syscalls", f.own_syscalls.vector()}});
    }
    j["units"].push_back(std::move(ju));
  }
  return j;
}

// ---- linkage resolution ---------------------------------------------------

inline constexpr std::string_view kInitEntry = "init";

struct ResolvedNode {
  std::string name;  // globals by name, locals as "<unit>::<name>"
  std::vector<std::string> aliases;
  std::string signature;
  bool address_taken = false;
  SyscallSet own_syscalls;
  std::size_t unit = 0;  // flat unit index across all documents
  std::vector<std::string> direct_calls;
  std::vector<std::string> indirect_call_sigs;
};

struct ResolvedGraph {
  std::vector<ResolvedNode> nodes;
  std::vector<std::vector<std::size_t>> edges;
  std::map<std::string, std::size_t> globals;
  std::vector<std::map<std::string, std::size_t>> locals;  // per flat unit
  // Direct calls to names no document defines: "caller -> callee".
  std::vector<std::pair<std::string, std::string>> unresolved_calls;
  std::vector<std::string> warnings;
  std::size_t init_node = 0;

  std::optional<std::size_t> find(const std::string& name) const {
    if (auto it = globals.find(name); it != globals.end()) return it->second;
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].name == name) return i;
    return std::nullopt;
  }

  void add_edge(std::size_t from, std::size_t to) {
    auto& v = edges[from];
    auto it = std::lower_bound(v.begin(), v.end(), to);
    if (it == v.end() || *it != to) v.insert(it, to);
  }
};

// Resolves symbols by linkage (strong beats weak, locals are unit-scoped,
// aliases name the same node) and adds the direct-call edges.
inline ResolvedGraph resolve_linkage(std::span<const CallGraphDoc> docs) {
  ResolvedGraph g;
  struct Pending {
    std::size_t unit;
    const FunctionDecl* decl;
  };
  std::vector<Pending> defs;
  std::vector<const TranslationUnit*> units;
  std::vector<std::string> unit_names;
  for (std::size_t d = 0; d < docs.size(); ++d)
    for (const auto& u : docs[d].units) {
      units.push_back(&u);
      std::string nm = u.name.empty() ? "unit" + std::to_string(units.size() - 1) : u.name;
      if (!docs[d].object.empty()) nm = docs[d].object + ":" + nm;
      unit_names.push_back(std::move(nm));
    }
  g.locals.resize(units.size());

  // Synthetic initializer entry.
  g.nodes.push_back({std::string(kInitEntry), {}, "void()", false, {}, 0, {}, {}});
  g.init_node = 0;

  std::map<std::string, std::size_t> weak;
  for (std::size_t ui = 0; ui < units.size(); ++ui) {
    for (const auto& f : units[ui]->functions) {
      ResolvedNode n;
      n.signature = f.signature;
      n.address_taken = f.address_taken;
      n.own_syscalls = f.own_syscalls;
      n.unit = ui;
      n.direct_calls = f.direct_calls;
      n.indirect_call_sigs = f.indirect_call_sigs;
      n.aliases = f.aliases;
      const std::size_t id = g.nodes.size();
      std::vector<std::string> names{f.name};
      names.insert(names.end(), f.aliases.begin(), f.aliases.end());
      if (f.linkage == Linkage::Local) {
        n.name = unit_names[ui] + "::" + f.name;
        for (const auto& nm : names) {
          if (!g.locals[ui].emplace(nm, id).second)
            throw Error(ErrorKind::BadDocument,
                        "local " + nm + " defined twice in " + unit_names[ui]);
        }
      } else {
        n.name = f.name;
        for (const auto& nm : names) {
          if (f.linkage == Linkage::GlobalStrong) {
            auto [it, fresh] = g.globals.emplace(nm, id);
            if (!fresh) {
              if (weak.count(nm) && weak[nm] == it->second) {
                it->second = id;  // strong overrides an earlier weak
                weak.erase(nm);
              } else {
                throw Error(ErrorKind::DuplicateStrongSymbol, nm);
              }
            }
          } else if (!g.globals.count(nm)) {
            g.globals.emplace(nm, id);
            weak.emplace(nm, id);
          }
        }
      }
      g.nodes.push_back(std::move(n));
    }
  }
  g.edges.assign(g.nodes.size(), {});

  auto lookup = [&](std::size_t unit, const std::string& nm) -> std::optional<std::size_t> {
    if (auto it = g.locals[unit].find(nm); it != g.locals[unit].end()) return it->second;
    if (auto it = g.globals.find(nm); it != g.globals.end()) return it->second;
    return std::nullopt;
  };

  // Overridden weak definitions stay out of the graph: nothing can reach them.
  for (std::size_t id = 1; id < g.nodes.size(); ++id) {
    const auto& n = g.nodes[id];
    for (const auto& callee : n.direct_calls) {
      if (auto t = lookup(n.unit, callee)) g.add_edge(id, *t);
      else g.unresolved_calls.emplace_back(n.name, callee);
    }
  }
  for (std::size_t ui = 0; ui < units.size(); ++ui)
    for (const auto& nm : units[ui]->initializers) {
      if (auto t = lookup(ui, nm)) {
        g.nodes[*t].address_taken = true;
        g.add_edge(g.init_node, *t);
      } else {
        g.warnings.push_back("initializer " + nm + " in " + unit_names[ui] + " is undefined");
      }
    }
  return g;
}

// Signature heuristic: an indirect call may target every address-taken
// function whose canonical signature string is identical.
inline std::vector<std::pair<std::size_t, std::size_t>> resolve_indirect(ResolvedGraph& g) {
  std::map<std::string, std::vector<std::size_t>> by_sig;
  for (std::size_t i = 0; i < g.nodes.size(); ++i)
    if (g.nodes[i].address_taken) by_sig[g.nodes[i].signature].push_back(i);
  std::vector<std::pair<std::size_t, std::size_t>> added;
  for (std::size_t u = 0; u < g.nodes.size(); ++u) {
    for (const auto& sig : g.nodes[u].indirect_call_sigs) {
      auto it = by_sig.find(sig);
      if (it == by_sig.end()) {
        g.warnings.push_back("indirect call with signature " + sig + " in " + g.nodes[u].name +
                             " has no address-taken target");
        continue;
      }
      for (auto v : it->second) {
        added.emplace_back(u, v);
        g.add_edge(u, v);
      }
    }
  }
  return added;
}

// ---- condensation and propagation -----------------------------------------

struct Condensation {
  std::vector<std::size_t> component;       // node -> component id
  std::vector<SyscallSet> component_sets;   // reachable syscalls per component
  std::vector<std::size_t> updates;         // times each component set was computed
  std::size_t components() const { return component_sets.size(); }
};

// Tarjan's SCC algorithm (iterative). Components complete in reverse
// topological order, so each component's set is the union of its members'
// own sets and its already-finished successors, computed once.
inline Condensation condense_and_propagate(std::span<const SyscallSet> own,
                                           const std::vector<std::vector<std::size_t>>& edges) {
  const std::size_t n = own.size();
  constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  Condensation c;
  c.component.assign(n, kNone);
  std::vector<std::size_t> index(n, kNone), low(n, 0);
  std::vector<bool> on_stack(n, false);
  std::vector<std::size_t> stack;
  std::vector<std::pair<std::size_t, std::size_t>> frames;  // (node, next edge)
  std::size_t counter = 0;

  for (std::size_t root = 0; root < n; ++root) {
    if (index[root] != kNone) continue;
    frames.emplace_back(root, 0);
    while (!frames.empty()) {
      auto& [v, pos] = frames.back();
      if (pos == 0 && index[v] == kNone) {
        index[v] = low[v] = counter++;
        stack.push_back(v);
        on_stack[v] = true;
      }
      if (pos < edges[v].size()) {
        std::size_t w = edges[v][pos++];
        if (index[w] == kNone) {
          frames.emplace_back(w, 0);
        } else if (on_stack[w]) {
          low[v] = std::min(low[v], index[w]);
        }
        continue;
      }
      const std::size_t done = v;
      frames.pop_back();
      if (!frames.empty()) {
        auto parent = frames.back().first;
        low[parent] = std::min(low[parent], low[done]);
      }
      if (low[done] != index[done]) continue;

      const std::size_t id = c.component_sets.size();
      std::vector<std::size_t> members;
      std::size_t w;
      do {
        w = stack.back();
        stack.pop_back();
        on_stack[w] = false;
        c.component[w] = id;
        members.push_back(w);
      } while (w != done);
      SyscallSet set;
      for (auto m : members) {
        set |= own[m];
        for (auto succ : edges[m])
          if (c.component[succ] != id) set |= c.component_sets[c.component[succ]];
      }
      c.component_sets.push_back(std::move(set));
      c.updates.push_back(1);
    }
  }
  return c;
}

struct FlattenedGraph {
  std::map<std::string, SyscallSet> reachable;
  Condensation condensation;
};

inline FlattenedGraph flatten(const ResolvedGraph& g) {
  std::vector<SyscallSet> own;
  own.reserve(g.nodes.size());
  for (const auto& n : g.nodes) own.push_back(n.own_syscalls);
  FlattenedGraph flat;
  flat.condensation = condense_and_propagate(own, g.edges);
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const auto& set = flat.condensation.component_sets[flat.condensation.component[i]];
    flat.reachable[g.nodes[i].name] = set;
    for (const auto& a : g.nodes[i].aliases) {
      auto it = g.globals.find(a);
      if (it != g.globals.end() && it->second == i) flat.reachable[a] = set;
    }
  }
  return flat;
}

enum class LinkMode { StaticLink, Library };

struct EntryQueryResult {
  SyscallSet syscalls;
  std::vector<std::string> warnings;
};

inline const std::vector<std::string>& default_entries() {
  static const std::vector<std::string> e{"main", "exit"};
  return e;
}

inline EntryQueryResult reachable_from_entries(const FlattenedGraph& flat,
                                               std::span<const std::string> entries,
                                               LinkMode mode = LinkMode::StaticLink) {
  EntryQueryResult r;
  for (const auto& e : entries) {
    auto it = flat.reachable.find(e);
    if (it == flat.reachable.end()) {
      if (mode == LinkMode::StaticLink) throw Error(ErrorKind::MissingEntry, e);
      r.warnings.push_back("entry " + e + " not defined");
      continue;
    }
    r.syscalls |= it->second;
  }
  return r;
}

inline nlohmann::json to_json(const FlattenedGraph& flat) {
  nlohmann::json j;
  j["version"] = kCallGraphDocVersion;
  j["functions"] = nlohmann::json::object();
  for (const auto& [name, set] : flat.reachable) j["functions"][name] = set.vector();
  return j;
}

}  // namespace chestnut
