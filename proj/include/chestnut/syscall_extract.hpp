#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "chestnut/elf.hpp"
#include "chestnut/function_regions.hpp"
#include "chestnut/syscall_set.hpp"

namespace chestnut {

inline constexpr std::size_t kDefaultBudget = 30;

enum class Resolution { Immediate, RegisterChain, Unresolved };

inline const char* to_string(Resolution r) {
  switch (r) {
    case Resolution::Immediate: return "immediate";
    case Resolution::RegisterChain: return "register-chain";
    case Resolution::Unresolved: return "unresolved";
  }
  return "?";
}

struct SyscallSite {
  std::uint64_t vaddr = 0;
  std::optional<std::uint32_t> number;
  Resolution resolution = Resolution::Unresolved;
  std::size_t chain_length = 0;

  friend bool operator==(const SyscallSite&, const SyscallSite&) = default;
};

struct ExtractionResult {
  SyscallSet syscalls;
  std::vector<SyscallSite> sites;
  std::size_t unresolved = 0;
  std::vector<std::string> diagnostics;
};

// Every 0F 05 byte pair inside an executable region, ascending.
inline std::vector<std::uint64_t> find_syscall_sites(const ElfImage& img) {
  std::vector<std::uint64_t> out;
  for (const auto& r : img.exec_regions) {
    auto b = img.region_bytes(r);
    for (std::size_t i = 0; i + 1 < b.size(); ++i)
      if (b[i] == 0x0F && b[i + 1] == 0x05) out.push_back(r.vaddr + i);
  }
  return out;
}

namespace detail {

inline std::uint64_t width_mask(std::uint8_t w) {
  return w >= 64 ? ~0ull : ((1ull << w) - 1);
}

// Bits of the 64-bit register a write of `r` replaces. 32-bit writes
// zero-extend, so they define the whole register.
inline std::uint64_t written_bits(const RegRef& r) {
  if (r.width >= 32) return ~0ull;
  return r.high8 ? 0xFF00ull : width_mask(r.width);
}

// All bits from 0 up to the highest set bit in m.
inline std::uint64_t low_closure(std::uint64_t m) {
  if (!m) return 0;
  int hi = 63 - __builtin_clzll(m);
  return hi == 63 ? ~0ull : ((1ull << (hi + 1)) - 1);
}

struct ConcreteRegs {
  std::array<std::uint64_t, 16> value{};
  std::array<std::uint64_t, 16> known{};

  std::pair<std::uint64_t, std::uint64_t> read(const RegRef& r) const {
    unsigned shift = r.high8 ? 8 : 0;
    std::uint64_t m = width_mask(r.width);
    return {(value[r.reg] >> shift) & m, (known[r.reg] >> shift) & m};
  }

  void write(const RegRef& r, std::uint64_t v, std::uint64_t k) {
    if (r.width == 64) {
      value[r.reg] = v;
      known[r.reg] = k;
    } else if (r.width == 32) {
      value[r.reg] = v & 0xFFFFFFFFull;
      known[r.reg] = (k & 0xFFFFFFFFull) | 0xFFFFFFFF00000000ull;
    } else {
      unsigned shift = r.high8 ? 8 : 0;
      std::uint64_t m = width_mask(r.width) << shift;
      value[r.reg] = (value[r.reg] & ~m) | ((v << shift) & m);
      known[r.reg] = (known[r.reg] & ~m) | ((k << shift) & m);
    }
  }
};

inline void forward_eval(const DecodedInstruction& d, ConcreteRegs& regs) {
  const std::uint16_t modeled = d.dest ? x86::bit(d.dest->reg) : 0;
  for (unsigned r = 0; r < 16; ++r)
    if ((d.writes & x86::bit(r)) && !(modeled & x86::bit(r))) regs.known[r] = 0;
  if (!d.dest) return;
  const RegRef dst = *d.dest;
  const std::uint64_t all = width_mask(dst.width);
  switch (d.cls) {
    case InsnClass::MoveImm:
      regs.write(dst, static_cast<std::uint64_t>(std::get<std::int64_t>(d.source)), all);
      break;
    case InsnClass::MoveReg: {
      const RegRef src = std::get<RegRef>(d.source);
      auto [v, k] = regs.read(src);
      const std::uint64_t sm = width_mask(src.width);
      if (d.extend == Extend::Zero) {
        v &= sm;
        k = (k & sm) | (~sm & all);
      } else if (d.extend == Extend::Sign) {
        const std::uint64_t sign = 1ull << (src.width - 1);
        if (k & sign) {
          if (v & sign) v |= ~sm;
          k |= ~sm;
        }
      }
      regs.write(dst, v, k);
      break;
    }
    case InsnClass::Arith:
      if (d.arith == ArithOp::Zero) {
        regs.write(dst, 0, all);
      } else {
        auto [v, k] = regs.read(dst);
        auto imm = static_cast<std::uint64_t>(std::get<std::int64_t>(d.source));
        if ((k & all) == all)
          regs.write(dst, d.arith == ArithOp::Add ? v + imm : v - imm, all);
        else
          regs.write(dst, 0, 0);
      }
      break;
    default:
      regs.write(dst, 0, 0);
      break;
  }
}

}  // namespace detail

// Symbolic backward walk from a syscall instruction over the straight-line
// code of its function region. The walk tracks which register bits still
// feed the syscall-number register; once every needed bit comes from a
// constant, the slice is evaluated forward to obtain the number.
inline SyscallSite backtrack_number(const CodeIndex& code, std::uint64_t site,
                                    std::size_t budget = kDefaultBudget) {
  SyscallSite out;
  out.vaddr = site;
  const auto& insns = code.instructions();
  auto idx = code.index_of(site);
  auto region = code.region_of(site);
  if (!idx || !region || insns[*idx].cls != InsnClass::Syscall) return out;
  if (code.is_branch_target(site)) return out;
  const std::uint64_t region_start = code.regions()[*region].start;

  std::array<std::uint64_t, 16> needed{};
  needed[kRax] = 0xFFFFFFFFull;
  bool cross_register = false;
  std::size_t walked = 0;
  std::optional<std::size_t> slice_start;

  for (std::size_t j = *idx; j-- > 0;) {
    const auto& d = insns[j];
    if (d.vaddr < region_start || d.next() != insns[j + 1].vaddr) break;
    if (walked >= budget) break;
    ++walked;
    if (d.cls == InsnClass::Branch || d.cls == InsnClass::Call ||
        d.cls == InsnClass::Return)
      break;

    bool fail = false;
    for (unsigned r = 0; r < 16 && !fail; ++r) {
      if (!needed[r] || !(d.writes & x86::bit(r))) continue;
      const bool modeled = d.dest && d.dest->reg == r &&
                           (d.cls == InsnClass::MoveImm || d.cls == InsnClass::MoveReg ||
                            d.cls == InsnClass::Arith);
      if (!modeled) {
        fail = true;
        break;
      }
      const RegRef dst = *d.dest;
      const std::uint64_t w = detail::written_bits(dst);
      const std::uint64_t overlap = needed[r] & w;
      if (!overlap) continue;
      needed[r] &= ~w;
      if (d.cls == InsnClass::MoveReg) {
        const RegRef src = std::get<RegRef>(d.source);
        if (src.high8 || dst.high8) {
          fail = true;
          break;
        }
        const std::uint64_t dm = detail::width_mask(dst.width);
        const std::uint64_t sm = detail::width_mask(src.width);
        std::uint64_t src_need = overlap & dm & sm;
        if (d.extend == Extend::Sign && (overlap & dm & ~sm))
          src_need |= 1ull << (src.width - 1);
        needed[src.reg] |= src_need;
        if (src.reg != r) cross_register = true;
      } else if (d.cls == InsnClass::Arith && d.arith != ArithOp::Zero) {
        if (dst.high8) {
          fail = true;
          break;
        }
        needed[r] |= detail::low_closure(overlap & detail::width_mask(dst.width));
      }
    }
    if (fail) break;
    if (std::all_of(needed.begin(), needed.end(), [](auto m) { return m == 0; })) {
      slice_start = j;
      break;
    }
    if (code.is_branch_target(d.vaddr)) break;
  }

  out.chain_length = walked;
  if (!slice_start) return out;

  detail::ConcreteRegs regs;
  for (std::size_t j = *slice_start; j < *idx; ++j) detail::forward_eval(insns[j], regs);
  auto [v, k] = regs.read(RegRef{kRax, 32, false});
  if ((k & 0xFFFFFFFFull) != 0xFFFFFFFFull) return out;
  out.number = static_cast<std::uint32_t>(v);
  out.resolution = cross_register ? Resolution::RegisterChain : Resolution::Immediate;
  return out;
}

inline SyscallSite backtrack_number(const ElfImage& img, std::uint64_t site,
                                    std::size_t budget = kDefaultBudget) {
  return backtrack_number(CodeIndex(img), site, budget);
}

inline ExtractionResult extract_all(const CodeIndex& code, std::size_t budget = kDefaultBudget,
                                    unsigned threads = 1) {
  const ElfImage& img = code.image();
  ExtractionResult res;
  auto vaddrs = find_syscall_sites(img);
  res.sites.resize(vaddrs.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i)
      res.sites[i] = backtrack_number(code, vaddrs[i], budget);
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(vaddrs.size())));
  if (threads <= 1) {
    work(0, vaddrs.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (vaddrs.size() + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t)
      pool.emplace_back(work, std::min(vaddrs.size(), t * chunk),
                        std::min(vaddrs.size(), (t + 1) * chunk));
    for (auto& th : pool) th.join();
  }
  for (const auto& s : res.sites) {
    if (s.number) res.syscalls.insert(*s.number);
    else ++res.unresolved;
  }
  for (const auto& d : code.instructions())
    if (d.is_int80)
      res.diagnostics.push_back("int 0x80 (32-bit syscall ABI) at " + to_hex(d.vaddr) +
                                " is not supported and was ignored");
  return res;
}

inline ExtractionResult extract_all(const ElfImage& img, std::size_t budget = kDefaultBudget,
                                    unsigned threads = 1) {
  return extract_all(CodeIndex(img), budget, threads);
}

}  // namespace chestnut
