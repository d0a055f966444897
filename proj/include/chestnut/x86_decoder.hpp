#pragma once

#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <variant>

namespace chestnut {

enum class InsnClass { MoveImm, MoveReg, Arith, Syscall, Branch, Call, Return, Other };

// General-purpose register numbers follow the x86 encoding: 0 = rax.
enum Gpr : std::uint8_t {
  kRax = 0, kRcx, kRdx, kRbx, kRsp, kRbp, kRsi, kRdi,
  kR8, kR9, kR10, kR11, kR12, kR13, kR14, kR15
};

struct RegRef {
  std::uint8_t reg = 0;     // 0..15
  std::uint8_t width = 64;  // 8, 16, 32, 64
  bool high8 = false;       // ah, ch, dh, bh

  friend bool operator==(const RegRef&, const RegRef&) = default;
};

enum class ArithOp { None, Add, Sub, Zero };
enum class Extend { None, Zero, Sign };

struct DecodedInstruction {
  std::uint64_t vaddr = 0;
  std::uint8_t length = 0;
  InsnClass cls = InsnClass::Other;
  std::optional<RegRef> dest;
  std::variant<std::monostate, RegRef, std::int64_t> source;
  ArithOp arith = ArithOp::None;
  Extend extend = Extend::None;
  // Conservative mask of general-purpose registers the instruction may write.
  std::uint16_t writes = 0;
  // Direct branch/call target.
  std::optional<std::uint64_t> target;
  bool conditional = false;
  bool indirect = false;
  // Absolute address of a rip-relative memory operand.
  std::optional<std::uint64_t> rip_target;
  bool is_lea = false;
  // Raw immediate operand, if any (sign-extended).
  std::optional<std::int64_t> imm;
  bool is_int80 = false;

  std::uint64_t next() const { return vaddr + length; }
};

// Decoder contract: decode one instruction at the start of `bytes`, which
// lives at `vaddr`. Returns nullopt for invalid or truncated encodings.
class InstructionDecoder {
 public:
  virtual ~InstructionDecoder() = default;
  virtual std::optional<DecodedInstruction> decode(std::span<const std::uint8_t> bytes,
                                                   std::uint64_t vaddr) const = 0;
};

namespace x86 {

constexpr std::uint16_t bit(unsigned r) { return static_cast<std::uint16_t>(1u << r); }

struct Prefixes {
  bool opsize = false;
  bool adsize = false;
  bool rep = false;    // F3
  bool repne = false;  // F2
  std::uint8_t rex = 0;
  bool rex_w() const { return rex & 8; }
  bool rex_r() const { return rex & 4; }
  bool rex_x() const { return rex & 2; }
  bool rex_b() const { return rex & 1; }
};

struct ModRm {
  std::uint8_t mod = 0, reg = 0, rm = 0;
  bool rip_relative = false;
  std::int64_t disp = 0;
  std::size_t length = 0;  // modrm + sib + displacement
};

inline std::optional<ModRm> parse_modrm(std::span<const std::uint8_t> b, std::size_t at) {
  if (at >= b.size()) return std::nullopt;
  ModRm m;
  std::uint8_t v = b[at];
  m.mod = v >> 6;
  m.reg = (v >> 3) & 7;
  m.rm = v & 7;
  std::size_t len = 1;
  std::size_t disp_size = 0;
  if (m.mod != 3) {
    if (m.rm == 4) {
      if (at + 1 >= b.size()) return std::nullopt;
      std::uint8_t sib = b[at + 1];
      ++len;
      if (m.mod == 0 && (sib & 7) == 5) disp_size = 4;
    } else if (m.mod == 0 && m.rm == 5) {
      disp_size = 4;
      m.rip_relative = true;
    }
    if (m.mod == 1) disp_size = 1;
    if (m.mod == 2) disp_size = 4;
  }
  if (at + len + disp_size > b.size()) return std::nullopt;
  if (disp_size == 1) {
    m.disp = static_cast<std::int8_t>(b[at + len]);
  } else if (disp_size == 4) {
    std::int32_t d;
    std::memcpy(&d, b.data() + at + len, 4);
    m.disp = d;
  }
  m.length = len + disp_size;
  return m;
}

inline std::int64_t read_imm(std::span<const std::uint8_t> b, std::size_t at, std::size_t size) {
  switch (size) {
    case 1: return static_cast<std::int8_t>(b[at]);
    case 2: { std::int16_t v; std::memcpy(&v, b.data() + at, 2); return v; }
    case 4: { std::int32_t v; std::memcpy(&v, b.data() + at, 4); return v; }
    case 8: { std::int64_t v; std::memcpy(&v, b.data() + at, 8); return v; }
    default: {
      std::int64_t v = 0;
      std::memcpy(&v, b.data() + at, size);
      return v;
    }
  }
}

enum class Map { One, Two, Three0F38, Three0F3A };

}  // namespace x86

// Length-exact x86-64 decoder with just enough semantics for syscall-number
// tracking, call-graph edges and address materialization.
class X86_64Decoder final : public InstructionDecoder {
 public:
  std::optional<DecodedInstruction> decode(std::span<const std::uint8_t> b,
                                           std::uint64_t vaddr) const override {
    using namespace x86;
    if (b.size() > 15) b = b.first(15);
    Prefixes p;
    std::size_t i = 0;
    for (; i < b.size(); ++i) {
      std::uint8_t c = b[i];
      if (c == 0x66) { p.opsize = true; p.rex = 0; }
      else if (c == 0x67) { p.adsize = true; p.rex = 0; }
      else if (c == 0xF2) { p.repne = true; p.rex = 0; }
      else if (c == 0xF3) { p.rep = true; p.rex = 0; }
      else if (c == 0xF0 || c == 0x2E || c == 0x36 || c == 0x3E || c == 0x26 ||
               c == 0x64 || c == 0x65) { p.rex = 0; }
      else if ((c & 0xF0) == 0x40) { p.rex = c; }
      else break;
    }
    if (i >= b.size()) return std::nullopt;

    DecodedInstruction d;
    d.vaddr = vaddr;
    std::uint8_t op = b[i++];

    if (op == 0xC4 || op == 0xC5 || op == 0x62)
      return decode_vex(b, i, op, p, d);
    if (op == 0x8F && i < b.size() && ((b[i] >> 3) & 7) != 0)
      return decode_xop(b, i, d);
    if (op == 0x0F) {
      if (i >= b.size()) return std::nullopt;
      std::uint8_t op2 = b[i++];
      if (op2 == 0x38 || op2 == 0x3A) {
        if (i >= b.size()) return std::nullopt;
        std::uint8_t op3 = b[i++];
        auto m = parse_modrm(b, i);
        if (!m) return std::nullopt;
        std::size_t imm = op2 == 0x3A ? 1 : 0;
        if (i + m->length + imm > b.size()) return std::nullopt;
        d.length = static_cast<std::uint8_t>(i + m->length + imm);
        fill_rip(d, *m);
        std::uint8_t reg = m->reg | (p.rex_r() ? 8 : 0);
        std::uint8_t rm = m->rm | (p.rex_b() ? 8 : 0);
        if (op2 == 0x38 && op3 >= 0xF0) d.writes |= bit(reg);
        if (op2 == 0x3A && op3 >= 0x14 && op3 <= 0x17 && m->mod == 3) d.writes |= bit(rm);
        return d;
      }
      return decode_0f(b, i, op2, p, d);
    }
    return decode_one(b, i, op, p, d);
  }

 private:
  static void fill_rip(DecodedInstruction& d, const x86::ModRm& m) {
    if (m.rip_relative)
      d.rip_target = d.vaddr + d.length + static_cast<std::uint64_t>(m.disp);
  }

  static std::uint8_t op_width(const x86::Prefixes& p, bool byte_op) {
    if (byte_op) return 8;
    if (p.rex_w()) return 64;
    return p.opsize ? 16 : 32;
  }

  // Register operand for a modrm/opcode register index, honoring the
  // legacy high-byte encoding when no REX prefix is present.
  static RegRef gpr(std::uint8_t idx, std::uint8_t width, const x86::Prefixes& p) {
    RegRef r{idx, width, false};
    if (width == 8 && !p.rex && idx >= 4 && idx < 8) {
      r.reg = idx - 4;
      r.high8 = true;
    }
    return r;
  }

  static std::optional<DecodedInstruction> decode_one(std::span<const std::uint8_t> b,
                                                      std::size_t i, std::uint8_t op,
                                                      const x86::Prefixes& p,
                                                      DecodedInstruction d) {
    using namespace x86;
    const std::size_t z = p.opsize ? 2 : 4;

    switch (op) {
      case 0x06: case 0x07: case 0x0E: case 0x16: case 0x17: case 0x1E: case 0x1F:
      case 0x27: case 0x2F: case 0x37: case 0x3F: case 0x60: case 0x61: case 0x82:
      case 0x9A: case 0xCE: case 0xD4: case 0xD5: case 0xD6: case 0xEA:
        return std::nullopt;
      default: break;
    }

    bool has_modrm = false;
    std::size_t imm = 0;
    if (op < 0x40) {
      unsigned lo = op & 7;
      if (lo < 4) has_modrm = true;
      else if (lo == 4) imm = 1;
      else if (lo == 5) imm = z;
    } else if (op == 0x63 || op == 0x69 || op == 0x6B || (op >= 0x80 && op <= 0x8F) ||
               op == 0xC0 || op == 0xC1 || op == 0xC6 || op == 0xC7 ||
               (op >= 0xD0 && op <= 0xD3) || (op >= 0xD8 && op <= 0xDF) || op == 0xF6 ||
               op == 0xF7 || op == 0xFE || op == 0xFF) {
      has_modrm = true;
    }
    switch (op) {
      case 0x68: case 0x69: case 0x81: case 0xA9: case 0xC7: imm = z; break;
      case 0x6A: case 0x6B: case 0x80: case 0x83: case 0xA8: case 0xC0: case 0xC1:
      case 0xC6: case 0xCD: case 0xEB: imm = 1; break;
      case 0xC2: case 0xCA: imm = 2; break;
      case 0xC8: imm = 3; break;
      case 0xE8: case 0xE9: imm = 4; break;
      case 0xA0: case 0xA1: case 0xA2: case 0xA3: imm = p.adsize ? 4 : 8; break;
      default: break;
    }
    if ((op >= 0x70 && op <= 0x7F) || (op >= 0xE0 && op <= 0xE7) || (op >= 0xB0 && op <= 0xB7))
      imm = 1;
    if (op >= 0xB8 && op <= 0xBF) imm = p.rex_w() ? 8 : z;

    ModRm m;
    if (has_modrm) {
      auto mm = parse_modrm(b, i);
      if (!mm) return std::nullopt;
      m = *mm;
      if (op == 0xF6 && m.reg <= 1) imm = 1;
      if (op == 0xF7 && m.reg <= 1) imm = z;
      // xbegin: C7 F8 rel32
      if (op == 0xC7 && b[i] == 0xF8) imm = z;
    }
    std::size_t total = i + m.length + imm;
    if (total > b.size()) return std::nullopt;
    d.length = static_cast<std::uint8_t>(total);
    if (has_modrm) fill_rip(d, m);
    std::size_t imm_at = i + m.length;
    if (imm && !(op >= 0xA0 && op <= 0xA3)) d.imm = read_imm(b, imm_at, imm);

    const std::uint8_t reg = m.reg | (p.rex_r() ? 8 : 0);
    const std::uint8_t rm = m.rm | (p.rex_b() ? 8 : 0);
    const bool reg_form = has_modrm && m.mod == 3;
    const bool byte_op = (op & 1) == 0;
    auto rm_write = [&](std::uint8_t w) {
      if (reg_form) d.writes |= bit(gpr(rm, w, p).reg);
    };
    auto reg_write = [&](std::uint8_t w) { d.writes |= bit(gpr(reg, w, p).reg); };

    // ALU block 00-3F
    if (op < 0x40) {
      unsigned kind = op >> 3;  // add or adc sbb and sub xor cmp
      unsigned lo = op & 7;
      std::uint8_t w = op_width(p, (lo & 1) == 0);
      if (kind == 7) return d;  // cmp
      if (lo <= 1) rm_write(w);
      else if (lo <= 3) reg_write(w);
      else d.writes |= bit(kRax);
      // xor/sub of a register with itself zeroes it.
      if ((kind == 6 || kind == 5) && lo <= 3 && reg_form && reg == rm) {
        d.cls = InsnClass::Arith;
        d.arith = ArithOp::Zero;
        d.dest = gpr(reg, w, p);
      } else if ((kind == 0 || kind == 5) && lo >= 4) {
        d.cls = InsnClass::Arith;
        d.arith = kind == 0 ? ArithOp::Add : ArithOp::Sub;
        d.dest = RegRef{kRax, w, false};
        d.source = *d.imm;
      }
      return d;
    }

    if (op >= 0x50 && op <= 0x57) { d.writes |= bit(kRsp); return d; }
    if (op >= 0x58 && op <= 0x5F) {
      d.writes |= bit(kRsp) | bit((op & 7) | (p.rex_b() ? 8 : 0));
      return d;
    }
    if (op >= 0x70 && op <= 0x7F) {
      d.cls = InsnClass::Branch;
      d.conditional = true;
      d.target = d.next() + static_cast<std::uint64_t>(*d.imm);
      return d;
    }
    if (op >= 0xB0 && op <= 0xBF) {
      bool byte = op < 0xB8;
      std::uint8_t w = byte ? 8 : op_width(p, false);
      auto dst = gpr((op & 7) | (p.rex_b() ? 8 : 0), w, p);
      d.cls = InsnClass::MoveImm;
      d.dest = dst;
      d.source = *d.imm;
      d.writes |= bit(dst.reg);
      return d;
    }
    if (op >= 0x91 && op <= 0x97) {
      d.writes |= bit(kRax) | bit((op & 7) | (p.rex_b() ? 8 : 0));
      return d;
    }

    switch (op) {
      case 0x63:
        reg_write(op_width(p, false));
        if (reg_form) {
          d.cls = InsnClass::MoveReg;
          d.dest = gpr(reg, op_width(p, false), p);
          d.source = gpr(rm, 32, p);
          d.extend = p.rex_w() ? Extend::Sign : Extend::None;
        }
        return d;
      case 0x68: case 0x6A: case 0x9C: case 0x9D:
        d.writes |= bit(kRsp);
        return d;
      case 0x69: case 0x6B:
        reg_write(op_width(p, false));
        return d;
      case 0x6C: case 0x6D: d.writes |= bit(kRdi) | bit(kRcx); return d;
      case 0x6E: case 0x6F: d.writes |= bit(kRsi) | bit(kRcx); return d;
      case 0x80: case 0x81: case 0x83: {
        std::uint8_t w = op_width(p, op == 0x80);
        if (m.reg == 7) return d;  // cmp
        rm_write(w);
        if (reg_form && (m.reg == 0 || m.reg == 5)) {
          d.cls = InsnClass::Arith;
          d.arith = m.reg == 0 ? ArithOp::Add : ArithOp::Sub;
          d.dest = gpr(rm, w, p);
          d.source = *d.imm;
        }
        return d;
      }
      case 0x84: case 0x85: return d;
      case 0x86: case 0x87:
        reg_write(op_width(p, byte_op));
        rm_write(op_width(p, byte_op));
        return d;
      case 0x88: case 0x89: {
        std::uint8_t w = op_width(p, byte_op);
        rm_write(w);
        if (reg_form) {
          d.cls = InsnClass::MoveReg;
          d.dest = gpr(rm, w, p);
          d.source = gpr(reg, w, p);
        }
        return d;
      }
      case 0x8A: case 0x8B: {
        std::uint8_t w = op_width(p, byte_op);
        reg_write(w);
        if (reg_form) {
          d.cls = InsnClass::MoveReg;
          d.dest = gpr(reg, w, p);
          d.source = gpr(rm, w, p);
        }
        return d;
      }
      case 0x8C: rm_write(16); return d;
      case 0x8D:
        reg_write(op_width(p, false));
        d.is_lea = true;
        d.dest = gpr(reg, op_width(p, false), p);
        return d;
      case 0x8E: return d;
      case 0x8F: d.writes |= bit(kRsp); rm_write(64); return d;
      case 0x90:
        if (p.rex_b()) d.writes |= bit(kRax) | bit(kR8);
        return d;
      case 0x98: case 0x9F: case 0xA0: case 0xA1: case 0xD7:
      case 0xE4: case 0xE5: case 0xEC: case 0xED:
        d.writes |= bit(kRax);
        return d;
      case 0x99: d.writes |= bit(kRdx); return d;
      case 0xA4: case 0xA5: case 0xA6: case 0xA7:
        d.writes |= bit(kRsi) | bit(kRdi) | bit(kRcx);
        return d;
      case 0xAA: case 0xAB: case 0xAE: case 0xAF:
        d.writes |= bit(kRdi) | bit(kRcx);
        return d;
      case 0xAC: case 0xAD:
        d.writes |= bit(kRax) | bit(kRsi) | bit(kRcx);
        return d;
      case 0xC0: case 0xC1: case 0xD0: case 0xD1: case 0xD2: case 0xD3:
        rm_write(op_width(p, byte_op));
        return d;
      case 0xC2: case 0xC3: case 0xCA: case 0xCB: case 0xCF:
        d.cls = InsnClass::Return;
        d.writes |= bit(kRsp);
        return d;
      case 0xC6: case 0xC7: {
        if (op == 0xC7 && b[i] == 0xF8) {
          d.cls = InsnClass::Branch;
          d.conditional = true;
          d.target = d.next() + static_cast<std::uint64_t>(*d.imm);
          d.writes |= bit(kRax);
          return d;
        }
        std::uint8_t w = op_width(p, op == 0xC6);
        rm_write(w);
        if (reg_form && m.reg == 0) {
          d.cls = InsnClass::MoveImm;
          d.dest = gpr(rm, w, p);
          d.source = *d.imm;
        }
        return d;
      }
      case 0xC8: case 0xC9: d.writes |= bit(kRsp) | bit(kRbp); return d;
      case 0xCD:
        d.writes |= bit(kRax);
        d.is_int80 = (*d.imm & 0xFF) == 0x80;
        return d;
      case 0xDF:
        if (reg_form && m.reg == 4) d.writes |= bit(kRax);  // fnstsw ax
        return d;
      case 0xE0: case 0xE1: case 0xE2:
        d.writes |= bit(kRcx);
        [[fallthrough]];
      case 0xE3:
        d.cls = InsnClass::Branch;
        d.conditional = true;
        d.target = d.next() + static_cast<std::uint64_t>(*d.imm);
        return d;
      case 0xE8:
        d.cls = InsnClass::Call;
        d.target = d.next() + static_cast<std::uint64_t>(*d.imm);
        d.writes = 0xFFFF;
        return d;
      case 0xE9: case 0xEB:
        d.cls = InsnClass::Branch;
        d.target = d.next() + static_cast<std::uint64_t>(*d.imm);
        return d;
      case 0xF6: case 0xF7: {
        std::uint8_t w = op_width(p, op == 0xF6);
        if (m.reg == 2 || m.reg == 3) rm_write(w);
        else if (m.reg >= 4) d.writes |= bit(kRax) | (op == 0xF7 ? bit(kRdx) : 0);
        return d;
      }
      case 0xFE: rm_write(8); return d;
      case 0xFF:
        switch (m.reg) {
          case 0: case 1: rm_write(op_width(p, false)); break;
          case 2: case 3:
            d.cls = InsnClass::Call;
            d.indirect = true;
            d.writes = 0xFFFF;
            break;
          case 4: case 5:
            d.cls = InsnClass::Branch;
            d.indirect = true;
            break;
          case 6: d.writes |= bit(kRsp); break;
          default: break;
        }
        return d;
      default:
        return d;
    }
  }

  static std::optional<DecodedInstruction> decode_0f(std::span<const std::uint8_t> b,
                                                     std::size_t i, std::uint8_t op,
                                                     const x86::Prefixes& p,
                                                     DecodedInstruction d) {
    using namespace x86;
    switch (op) {
      case 0x04: case 0x0A: case 0x0C: case 0x24: case 0x25: case 0x26: case 0x27:
      case 0x36: case 0x39: case 0x3B: case 0x3C: case 0x3D: case 0x3E: case 0x3F:
      case 0x7A: case 0x7B: case 0xA6: case 0xA7:
        return std::nullopt;
      default: break;
    }
    bool no_modrm = op == 0x05 || op == 0x06 || op == 0x07 || op == 0x08 || op == 0x09 ||
                    op == 0x0B || op == 0x0E || (op >= 0x30 && op <= 0x37) || op == 0x77 ||
                    (op >= 0x80 && op <= 0x8F) || op == 0xA0 || op == 0xA1 ||
                    op == 0xA2 || op == 0xA8 || op == 0xA9 || op == 0xAA ||
                    (op >= 0xC8 && op <= 0xCF);
    std::size_t imm = 0;
    if ((op >= 0x70 && op <= 0x73) || op == 0xA4 || op == 0xAC || op == 0xBA || op == 0xC2 ||
        (op >= 0xC4 && op <= 0xC6) || op == 0x0F)
      imm = 1;
    if (op >= 0x80 && op <= 0x8F) imm = 4;

    ModRm m;
    if (!no_modrm) {
      auto mm = parse_modrm(b, i);
      if (!mm) return std::nullopt;
      m = *mm;
    }
    std::size_t total = i + m.length + imm;
    if (total > b.size()) return std::nullopt;
    d.length = static_cast<std::uint8_t>(total);
    if (!no_modrm) fill_rip(d, m);
    if (imm) d.imm = read_imm(b, i + m.length, imm);

    const std::uint8_t reg = m.reg | (p.rex_r() ? 8 : 0);
    const std::uint8_t rm = m.rm | (p.rex_b() ? 8 : 0);
    const bool reg_form = !no_modrm && m.mod == 3;
    auto rm_w = [&](std::uint8_t w = 64) { if (reg_form) d.writes |= bit(gpr(rm, w, p).reg); };
    auto reg_w = [&]() { d.writes |= bit(reg); };

    if (op >= 0x80 && op <= 0x8F) {
      d.cls = InsnClass::Branch;
      d.conditional = true;
      d.target = d.next() + static_cast<std::uint64_t>(*d.imm);
      return d;
    }
    if (op >= 0x40 && op <= 0x4F) { reg_w(); return d; }
    if (op >= 0x90 && op <= 0x9F) { rm_w(8); return d; }
    if (op >= 0xC8 && op <= 0xCF) { d.writes |= bit((op & 7) | (p.rex_b() ? 8 : 0)); return d; }
    if ((op >= 0x10 && op <= 0x1F) || (op >= 0x28 && op <= 0x2B) || op == 0x2E || op == 0x2F ||
        (op >= 0x51 && op <= 0x7D) || op == 0x7F || op == 0xC2 || op == 0xC3 || op == 0xC4 ||
        op == 0xC6 || (op >= 0xD0 && op <= 0xFE && op != 0xD7) || op == 0x0D || op == 0x0B ||
        op == 0x77 || op == 0x0F || op == 0xA3 || op == 0x08 || op == 0x09) {
      if (op == 0x78 || op == 0x79) rm_w();
      return d;
    }

    switch (op) {
      case 0x05:
        d.cls = InsnClass::Syscall;
        d.writes = bit(kRax) | bit(kRcx) | bit(kR11);
        return d;
      case 0x07:
        d.cls = InsnClass::Return;
        return d;
      case 0x00: rm_w(); return d;
      case 0x01: d.writes |= bit(kRax) | bit(kRcx) | bit(kRdx) | bit(kRbx); rm_w(); return d;
      case 0x02: case 0x03: reg_w(); return d;
      case 0x20: case 0x21: rm_w(); return d;
      case 0x22: case 0x23: return d;
      case 0x2C: case 0x2D: case 0x50: case 0xD7: case 0xC5: reg_w(); return d;
      case 0x7E:
        if (!p.rep) rm_w();
        return d;
      case 0x31: case 0x32: case 0x33: d.writes |= bit(kRax) | bit(kRdx); return d;
      case 0x30: case 0x34: case 0x35: case 0x37: d.writes |= bit(kRax) | bit(kRdx) | bit(kRcx); return d;
      case 0xA2: d.writes |= bit(kRax) | bit(kRbx) | bit(kRcx) | bit(kRdx); return d;
      case 0xA0: case 0xA1: case 0xA8: case 0xA9: d.writes |= bit(kRsp); return d;
      case 0xA4: case 0xA5: case 0xAB: case 0xAC: case 0xAD: case 0xB3: case 0xBB:
        rm_w();
        return d;
      case 0xBA: if (m.reg >= 5) rm_w(); return d;
      case 0xAE: rm_w(); return d;
      case 0xAF: case 0xB2: case 0xB4: case 0xB5: case 0xB8: case 0xB9: case 0xBC: case 0xBD:
        reg_w();
        return d;
      case 0xB0: case 0xB1: rm_w(); d.writes |= bit(kRax); return d;
      case 0xB6: case 0xB7: case 0xBE: case 0xBF: {
        std::uint8_t w = op_width(p, false);
        reg_w();
        if (reg_form) {
          d.cls = InsnClass::MoveReg;
          d.dest = gpr(reg, w, p);
          d.source = gpr(rm, (op & 1) ? 16 : 8, p);
          d.extend = op < 0xBE ? Extend::Zero : Extend::Sign;
        }
        return d;
      }
      case 0xC0: case 0xC1: rm_w(); reg_w(); return d;
      case 0xC7: rm_w(); d.writes |= bit(kRax) | bit(kRdx); return d;
      default:
        reg_w();
        rm_w();
        return d;
    }
  }

  static std::optional<DecodedInstruction> decode_vex(std::span<const std::uint8_t> b,
                                                      std::size_t i, std::uint8_t lead,
                                                      const x86::Prefixes& p,
                                                      DecodedInstruction d) {
    using namespace x86;
    (void)p;
    unsigned map = 1;
    bool r_ext = false, b_ext = false;
    unsigned vvvv = 0;
    if (lead == 0xC5) {
      if (i >= b.size()) return std::nullopt;
      std::uint8_t v = b[i++];
      r_ext = !(v & 0x80);
      vvvv = (~v >> 3) & 0xF;
    } else if (lead == 0xC4) {
      if (i + 1 >= b.size()) return std::nullopt;
      std::uint8_t v1 = b[i++], v2 = b[i++];
      r_ext = !(v1 & 0x80);
      b_ext = !(v1 & 0x20);
      map = v1 & 0x1F;
      vvvv = (~v2 >> 3) & 0xF;
    } else {
      if (i + 2 >= b.size()) return std::nullopt;
      std::uint8_t p0 = b[i++], p1 = b[i++];
      ++i;
      r_ext = !(p0 & 0x80);
      b_ext = !(p0 & 0x20);
      map = p0 & 0x7;
      vvvv = (~p1 >> 3) & 0xF;
    }
    if (map == 0 || map == 4 || map > 7) return std::nullopt;
    if (i >= b.size()) return std::nullopt;
    std::uint8_t op = b[i++];
    bool no_modrm = lead != 0x62 && map == 1 && op == 0x77;
    std::size_t imm = 0;
    if (map == 3) imm = 1;
    if (map == 1 && ((op >= 0x70 && op <= 0x73) || op == 0xC2 || (op >= 0xC4 && op <= 0xC6)))
      imm = 1;
    ModRm m;
    if (!no_modrm) {
      auto mm = parse_modrm(b, i);
      if (!mm) return std::nullopt;
      m = *mm;
    }
    std::size_t total = i + m.length + imm;
    if (total > b.size()) return std::nullopt;
    d.length = static_cast<std::uint8_t>(total);
    if (!no_modrm) fill_rip(d, m);
    const std::uint8_t reg = m.reg | (r_ext ? 8 : 0);
    const std::uint8_t rm = m.rm | (b_ext ? 8 : 0);
    const bool reg_form = !no_modrm && m.mod == 3;
    if (map == 1) {
      if (op == 0x50 || op == 0xC5 || op == 0xD7 || op == 0x2C || op == 0x2D ||
          (op >= 0x90 && op <= 0x9F))
        d.writes |= bit(reg);
      if (op == 0x7E && reg_form) d.writes |= bit(rm);
    } else if (map == 2) {
      if (op >= 0xF0) {
        d.writes |= bit(reg) | bit(vvvv);
        if (reg_form) d.writes |= bit(rm);
      }
    } else if (map == 3) {
      if (op >= 0x14 && op <= 0x17 && reg_form) d.writes |= bit(rm);
      if (op == 0xF0) d.writes |= bit(reg);
    } else if (map == 5) {
      if (op == 0x7E && reg_form) d.writes |= bit(rm);
    }
    return d;
  }

  static std::optional<DecodedInstruction> decode_xop(std::span<const std::uint8_t> b,
                                                      std::size_t i, DecodedInstruction d) {
    using namespace x86;
    if (i + 2 >= b.size()) return std::nullopt;
    unsigned map = b[i] & 0x1F;
    i += 2;
    ++i;  // opcode
    auto m = parse_modrm(b, i);
    if (!m) return std::nullopt;
    std::size_t imm = map == 8 ? 1 : (map == 0xA ? 4 : 0);
    if (i + m->length + imm > b.size()) return std::nullopt;
    d.length = static_cast<std::uint8_t>(i + m->length + imm);
    d.writes = 0xFFFF;
    return d;
  }
};

}  // namespace chestnut
