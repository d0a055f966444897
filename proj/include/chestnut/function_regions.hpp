#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "chestnut/elf.hpp"
#include "chestnut/x86_decoder.hpp"

namespace chestnut {

struct FunctionRegion {
  std::uint64_t start = 0;
  std::uint64_t end = 0;  // exclusive
  std::optional<std::string> name;
  bool exported = false;
  // Set for PLT stubs: the import the stub forwards to.
  std::optional<std::string> import_stub;

  bool contains(std::uint64_t a) const { return a >= start && a < end; }
};

// Linear-sweep disassembly of every executable region, resynchronized at
// known code addresses, plus the region partition derived from it.
class CodeIndex {
 public:
  explicit CodeIndex(ElfImage img, const InstructionDecoder& dec = default_decoder())
      : img_(std::move(img)) {
    std::set<std::uint64_t> seeds = symbol_seeds();
    sweep(dec, seeds);
    // Second pass: call targets become seeds too, so a desynchronized
    // sweep realigns at every function start it can name.
    for (auto t : call_targets_) seeds.insert(t);
    sweep(dec, seeds);
    for (auto t : call_targets_) seeds.insert(t);
    // Code addresses that escape into registers or data start functions
    // reached only indirectly; without symbols they would hide inside the
    // preceding region.
    collect_escaped();
    for (auto a : escaped_) seeds.insert(a);
    build_regions(seeds);
  }

  const ElfImage& image() const { return img_; }
  const std::vector<DecodedInstruction>& instructions() const { return insns_; }
  const std::vector<FunctionRegion>& regions() const { return regions_; }

  // Index of the instruction starting exactly at vaddr.
  std::optional<std::size_t> index_of(std::uint64_t vaddr) const {
    auto it = std::lower_bound(insns_.begin(), insns_.end(), vaddr,
                               [](const DecodedInstruction& d, std::uint64_t a) {
                                 return d.vaddr < a;
                               });
    if (it == insns_.end() || it->vaddr != vaddr) return std::nullopt;
    return static_cast<std::size_t>(it - insns_.begin());
  }

  // First instruction at or after vaddr.
  std::size_t lower_index(std::uint64_t vaddr) const {
    return static_cast<std::size_t>(
        std::lower_bound(insns_.begin(), insns_.end(), vaddr,
                         [](const DecodedInstruction& d, std::uint64_t a) {
                           return d.vaddr < a;
                         }) -
        insns_.begin());
  }

  bool is_branch_target(std::uint64_t vaddr) const {
    return branch_targets_.count(vaddr) != 0;
  }

  std::optional<std::size_t> region_of(std::uint64_t vaddr) const {
    auto it = std::upper_bound(regions_.begin(), regions_.end(), vaddr,
                               [](std::uint64_t a, const FunctionRegion& r) {
                                 return a < r.start;
                               });
    if (it == regions_.begin()) return std::nullopt;
    --it;
    if (!it->contains(vaddr)) return std::nullopt;
    return static_cast<std::size_t>(it - regions_.begin());
  }

  // Instruction-aligned code addresses materialized by lea/immediates,
  // relocations or pointer-sized data words.
  const std::set<std::uint64_t>& escaped_addresses() const { return escaped_; }

  bool in_exec(std::uint64_t vaddr) const {
    for (const auto& r : img_.exec_regions)
      if (vaddr >= r.vaddr && vaddr < r.vaddr + r.size) return true;
    return false;
  }

  static const InstructionDecoder& default_decoder() {
    static const X86_64Decoder d;
    return d;
  }

 private:
  std::set<std::uint64_t> symbol_seeds() const {
    std::set<std::uint64_t> s;
    auto add = [&](std::uint64_t a) {
      if (in_exec(a)) s.insert(a);
    };
    add(img_.entry_vaddr);
    for (const auto& r : img_.exec_regions) s.insert(r.vaddr);
    for (const auto& e : img_.dynamic.exports)
      if (e.is_function) add(e.vaddr);
    for (const auto& f : img_.symtab_functions) add(f.vaddr);
    for (auto f : img_.init_functions) add(f);
    for (const auto& sec : img_.sections)
      if ((sec.flags & SHF_EXECINSTR) && sec.size) add(sec.addr);
    return s;
  }

  void sweep(const InstructionDecoder& dec, const std::set<std::uint64_t>& seeds) {
    insns_.clear();
    branch_targets_.clear();
    call_targets_.clear();
    for (const auto& region : img_.exec_regions) {
      auto bytes = img_.region_bytes(region);
      std::uint64_t pos = region.vaddr;
      const std::uint64_t end = region.vaddr + region.size;
      auto next_seed = seeds.upper_bound(pos);
      while (pos < end) {
        while (next_seed != seeds.end() && *next_seed <= pos) ++next_seed;
        auto d = dec.decode(bytes.subspan(pos - region.vaddr), pos);
        std::uint64_t limit = next_seed != seeds.end() ? *next_seed : end;
        if (!d || pos + d->length > limit) {
          // Undecodable or straddles a known start: skip ahead.
          pos = d ? limit : pos + 1;
          continue;
        }
        if (d->target && (d->cls == InsnClass::Branch || d->cls == InsnClass::Call)) {
          if (in_exec(*d->target)) {
            branch_targets_.insert(*d->target);
            if (d->cls == InsnClass::Call) call_targets_.insert(*d->target);
          }
        }
        pos += d->length;
        insns_.push_back(std::move(*d));
      }
    }
  }

  void collect_escaped() {
    const ElfImage& img = img_;
    auto add = [&](std::uint64_t a) {
      if (a && in_exec(a) && index_of(a)) escaped_.insert(a);
    };
    for (const auto& d : insns_) {
      if (d.is_lea && d.rip_target) add(*d.rip_target);
      if (d.imm && !d.target && *d.imm > 0) add(static_cast<std::uint64_t>(*d.imm));
    }
    std::map<std::string, std::uint64_t> export_addr;
    for (const auto& e : img.dynamic.exports)
      if (e.is_function) export_addr.emplace(e.name, e.vaddr);
    for (const auto& r : img.relocations) {
      if (r.type == R_X86_64_RELATIVE || r.type == R_X86_64_IRELATIVE) {
        add(static_cast<std::uint64_t>(r.addend));
      } else if (!r.symbol.empty() && r.type != R_X86_64_JUMP_SLOT) {
        if (auto e = export_addr.find(r.symbol); e != export_addr.end())
          add(e->second + static_cast<std::uint64_t>(r.addend));
      }
    }

    // Non-PIC images carry absolute function pointers without relocations.
    // Symbol tables, dynamic entries and unwind info hold code addresses
    // that are not pointers and are skipped.
    auto scan_words = [&](std::uint64_t vaddr, std::uint64_t offset, std::uint64_t size) {
      const auto file = img.file();
      if (offset >= file.size()) return;
      auto data = file.subspan(offset, std::min<std::uint64_t>(size, file.size() - offset));
      const std::uint64_t first = (8 - (vaddr % 8)) % 8;
      for (std::uint64_t o = first; o + 8 <= data.size(); o += 8) {
        std::uint64_t w;
        std::memcpy(&w, data.data() + o, 8);
        add(w);
      }
    };
    bool have_sections = false;
    for (const auto& s : img.sections) {
      if (!(s.flags & SHF_ALLOC) || s.type == SHT_NULL) continue;
      have_sections = true;
      if ((s.flags & SHF_EXECINSTR) || s.type == SHT_NOBITS) continue;
      const bool data_like = s.type == SHT_PROGBITS || s.type == SHT_INIT_ARRAY ||
                             s.type == SHT_FINI_ARRAY || s.type == SHT_PREINIT_ARRAY;
      if (!data_like || s.name.starts_with(".eh_frame") || s.name == ".gcc_except_table") continue;
      scan_words(s.addr, s.offset, s.size);
    }
    if (have_sections) return;
    std::optional<std::pair<std::uint64_t, std::uint64_t>> dyn;
    for (const auto& s : img.segments)
      if (s.type == PT_DYNAMIC) dyn.emplace(s.offset, s.offset + s.filesz);
    for (const auto& s : img.segments) {
      if (s.type != PT_LOAD || (s.flags & PF_X)) continue;
      if (dyn && dyn->first >= s.offset && dyn->first < s.offset + s.filesz) {
        scan_words(s.vaddr, s.offset, dyn->first - s.offset);
        const auto tail = std::min(dyn->second, s.offset + s.filesz);
        scan_words(s.vaddr + (tail - s.offset), tail, s.offset + s.filesz - tail);
      } else {
        scan_words(s.vaddr, s.offset, s.filesz);
      }
    }
  }

  void build_regions(const std::set<std::uint64_t>& seeds) {
    std::map<std::uint64_t, std::string> export_names, local_names;
    for (const auto& e : img_.dynamic.exports)
      if (e.is_function) export_names.emplace(e.vaddr, e.name);
    for (const auto& f : img_.symtab_functions) local_names.emplace(f.vaddr, f.name);

    std::map<std::uint64_t, std::string> got_imports;
    for (const auto& r : img_.relocations)
      if (!r.symbol.empty() && (r.type == R_X86_64_JUMP_SLOT || r.type == R_X86_64_GLOB_DAT))
        got_imports.emplace(r.offset, r.symbol);

    for (const auto& ex : img_.exec_regions) {
      const std::uint64_t ex_end = ex.vaddr + ex.size;
      for (auto it = seeds.lower_bound(ex.vaddr); it != seeds.end() && *it < ex_end; ++it) {
        auto nx = std::next(it);
        FunctionRegion r;
        r.start = *it;
        r.end = (nx != seeds.end() && *nx < ex_end) ? *nx : ex_end;
        if (auto e = export_names.find(r.start); e != export_names.end()) {
          r.name = e->second;
          r.exported = true;
        } else if (auto l = local_names.find(r.start); l != local_names.end()) {
          r.name = l->second;
        }
        regions_.push_back(std::move(r));
      }
    }

    // A stub whose first jumps go through a GOT slot bound to an import.
    for (auto& r : regions_) {
      for (std::size_t i = lower_index(r.start); i < insns_.size() && insns_[i].vaddr < r.end &&
                                                 insns_[i].vaddr < r.start + 32;
           ++i) {
        const auto& d = insns_[i];
        if (d.cls == InsnClass::Branch && d.indirect && d.rip_target) {
          if (auto g = got_imports.find(*d.rip_target); g != got_imports.end())
            r.import_stub = g->second;
          break;
        }
        if (d.cls != InsnClass::Other) break;
      }
    }
  }

  ElfImage img_;  // shares the file bytes with the caller's image
  std::vector<DecodedInstruction> insns_;
  std::unordered_set<std::uint64_t> branch_targets_;
  std::set<std::uint64_t> call_targets_;
  std::set<std::uint64_t> escaped_;
  std::vector<FunctionRegion> regions_;
};

inline std::vector<FunctionRegion> recover_functions(const ElfImage& img) {
  return CodeIndex(img).regions();
}

}  // namespace chestnut
