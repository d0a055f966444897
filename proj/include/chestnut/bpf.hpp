#pragma once

#include <linux/audit.h>
#include <linux/filter.h>
#include <linux/seccomp.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chestnut/error.hpp"

namespace chestnut {

inline constexpr std::uint32_t kAuditArchX86_64 = AUDIT_ARCH_X86_64;
inline constexpr std::size_t kMaxBpfInstructions = BPF_MAXINSNS;

// Layout of struct seccomp_data.
inline constexpr std::uint32_t kOffNr = 0;
inline constexpr std::uint32_t kOffArch = 4;
inline constexpr std::uint32_t kOffIp = 8;
inline constexpr std::uint32_t kOffArgs = 16;
inline constexpr std::uint32_t kSeccompDataSize = 64;

struct BpfInsn {
  std::uint16_t code = 0;
  std::uint8_t jt = 0;
  std::uint8_t jf = 0;
  std::uint32_t k = 0;

  friend bool operator==(const BpfInsn&, const BpfInsn&) = default;
};
static_assert(sizeof(BpfInsn) == sizeof(sock_filter));

inline BpfInsn bpf_stmt(std::uint16_t code, std::uint32_t k) { return {code, 0, 0, k}; }
inline BpfInsn bpf_jump(std::uint16_t code, std::uint32_t k, std::uint8_t jt, std::uint8_t jf) {
  return {code, jt, jf, k};
}

struct SeccompData {
  std::int32_t nr = 0;
  std::uint32_t arch = kAuditArchX86_64;
  std::uint64_t instruction_pointer = 0;
  std::array<std::uint64_t, 6> args{};
};

enum class Action { KillProcess, KillThread, Trap, Errno, UserNotif, Trace, Log, Allow };

inline const char* to_string(Action a) {
  switch (a) {
    case Action::KillProcess: return "KILL_PROCESS";
    case Action::KillThread: return "KILL_THREAD";
    case Action::Trap: return "TRAP";
    case Action::Errno: return "ERRNO";
    case Action::UserNotif: return "USER_NOTIF";
    case Action::Trace: return "TRACE";
    case Action::Log: return "LOG";
    case Action::Allow: return "ALLOW";
  }
  return "?";
}

struct Verdict {
  Action action = Action::KillProcess;
  std::uint16_t data = 0;

  friend bool operator==(const Verdict&, const Verdict&) = default;
};

inline std::string to_string(const Verdict& v) {
  std::string s = to_string(v.action);
  if (v.action == Action::Errno || v.action == Action::Trace || v.action == Action::Trap)
    s += "(" + std::to_string(v.data) + ")";
  return s;
}

inline std::uint32_t seccomp_ret(const Verdict& v) {
  switch (v.action) {
    case Action::KillProcess: return SECCOMP_RET_KILL_PROCESS;
    case Action::KillThread: return SECCOMP_RET_KILL_THREAD;
    case Action::Trap: return SECCOMP_RET_TRAP | v.data;
    case Action::Errno: return SECCOMP_RET_ERRNO | v.data;
    case Action::UserNotif: return SECCOMP_RET_USER_NOTIF;
    case Action::Trace: return SECCOMP_RET_TRACE | v.data;
    case Action::Log: return SECCOMP_RET_LOG;
    case Action::Allow: return SECCOMP_RET_ALLOW;
  }
  return SECCOMP_RET_KILL_PROCESS;
}

// Kernel mapping from a filter return value to an action; unknown actions
// behave as KILL_PROCESS.
inline Verdict decode_ret(std::uint32_t ret) {
  const std::uint16_t data = static_cast<std::uint16_t>(ret & SECCOMP_RET_DATA);
  switch (ret & SECCOMP_RET_ACTION_FULL) {
    case SECCOMP_RET_KILL_PROCESS: return {Action::KillProcess, 0};
    case SECCOMP_RET_KILL_THREAD: return {Action::KillThread, 0};
    case SECCOMP_RET_TRAP: return {Action::Trap, data};
    case SECCOMP_RET_ERRNO: return {Action::Errno, data};
    case SECCOMP_RET_USER_NOTIF: return {Action::UserNotif, 0};
    case SECCOMP_RET_TRACE: return {Action::Trace, data};
    case SECCOMP_RET_LOG: return {Action::Log, 0};
    case SECCOMP_RET_ALLOW: return {Action::Allow, 0};
    default: return {Action::KillProcess, 0};
  }
}

// Checks what the kernel checks before accepting a seccomp classic-BPF
// program: length, opcode whitelist, in-range forward jumps, aligned
// seccomp_data loads, initialized scratch memory, terminal return.
inline void validate_program(const std::vector<BpfInsn>& prog) {
  if (prog.empty()) throw Error(ErrorKind::InvalidFilter, "empty program");
  if (prog.size() > kMaxBpfInstructions)
    throw Error(ErrorKind::TooManyRules,
                std::to_string(prog.size()) + " instructions exceed the kernel limit");
  const std::size_t n = prog.size();
  auto fail = [](std::size_t pc, const std::string& why) {
    throw Error(ErrorKind::InvalidFilter, "instruction " + std::to_string(pc) + ": " + why);
  };
  // Scratch slots known stored on every path reaching each pc.
  std::vector<std::uint16_t> stored(n, 0xFFFF);
  std::vector<bool> reached(n, false);
  reached[0] = true;
  stored[0] = 0;
  auto flow = [&](std::size_t to, std::uint16_t mem) {
    if (!reached[to]) {
      reached[to] = true;
      stored[to] = mem;
    } else {
      stored[to] &= mem;
    }
  };
  for (std::size_t pc = 0; pc < n; ++pc) {
    const auto& i = prog[pc];
    std::uint16_t mem = reached[pc] ? stored[pc] : 0xFFFF;
    const std::uint16_t cls = BPF_CLASS(i.code);
    bool falls = true;
    switch (i.code) {
      case BPF_LD | BPF_W | BPF_ABS:
        if (i.k >= kSeccompDataSize || (i.k & 3)) fail(pc, "misaligned or out-of-range load");
        break;
      case BPF_LD | BPF_W | BPF_LEN:
      case BPF_LDX | BPF_W | BPF_LEN:
      case BPF_LD | BPF_IMM:
      case BPF_LDX | BPF_IMM:
      case BPF_MISC | BPF_TAX:
      case BPF_MISC | BPF_TXA:
        break;
      case BPF_LD | BPF_MEM:
      case BPF_LDX | BPF_MEM:
        if (i.k >= BPF_MEMWORDS) fail(pc, "scratch slot out of range");
        if (!(mem & (1u << i.k))) fail(pc, "load from uninitialized scratch slot");
        break;
      case BPF_ST:
      case BPF_STX:
        if (i.k >= BPF_MEMWORDS) fail(pc, "scratch slot out of range");
        mem |= static_cast<std::uint16_t>(1u << i.k);
        break;
      case BPF_RET | BPF_K:
      case BPF_RET | BPF_A:
        falls = false;
        break;
      default:
        if (cls == BPF_ALU) {
          const auto op = BPF_OP(i.code);
          if (op == BPF_NEG) break;
          if (op != BPF_ADD && op != BPF_SUB && op != BPF_MUL && op != BPF_DIV &&
              op != BPF_OR && op != BPF_AND && op != BPF_LSH && op != BPF_RSH &&
              op != BPF_MOD && op != BPF_XOR)
            fail(pc, "unknown ALU op");
          if (BPF_SRC(i.code) == BPF_K && (op == BPF_DIV || op == BPF_MOD) && i.k == 0)
            fail(pc, "division by constant zero");
          if (BPF_SRC(i.code) == BPF_K && (op == BPF_LSH || op == BPF_RSH) && i.k >= 32)
            fail(pc, "shift out of range");
          break;
        }
        if (cls == BPF_JMP) {
          const auto op = BPF_OP(i.code);
          if (op == BPF_JA) {
            if (i.k >= n - pc - 1) fail(pc, "jump out of range");
            flow(pc + 1 + i.k, mem);
            falls = false;
            break;
          }
          if (op != BPF_JEQ && op != BPF_JGT && op != BPF_JGE && op != BPF_JSET)
            fail(pc, "unknown jump op");
          if (pc + 1 + i.jt >= n || pc + 1 + i.jf >= n) fail(pc, "jump out of range");
          flow(pc + 1 + i.jt, mem);
          flow(pc + 1 + i.jf, mem);
          falls = false;
          break;
        }
        fail(pc, "opcode " + std::to_string(i.code) + " not permitted in seccomp filters");
    }
    if (falls) {
      if (pc + 1 >= n) fail(pc, "program does not end in a return");
      flow(pc + 1, mem);
    }
  }
  const auto last = prog.back().code;
  if (last != (BPF_RET | BPF_K) && last != (BPF_RET | BPF_A))
    fail(n - 1, "last instruction is not a return");
}

// Classic-BPF evaluation over seccomp_data, as the kernel performs it.
inline Verdict interpret(const std::vector<BpfInsn>& prog, const SeccompData& d) {
  validate_program(prog);
  std::array<std::uint8_t, kSeccompDataSize> buf{};
  std::memcpy(buf.data() + kOffNr, &d.nr, 4);
  std::memcpy(buf.data() + kOffArch, &d.arch, 4);
  std::memcpy(buf.data() + kOffIp, &d.instruction_pointer, 8);
  std::memcpy(buf.data() + kOffArgs, d.args.data(), 48);

  std::uint32_t A = 0, X = 0;
  std::array<std::uint32_t, BPF_MEMWORDS> M{};
  for (std::size_t pc = 0; pc < prog.size(); ++pc) {
    const auto& i = prog[pc];
    const std::uint32_t src = BPF_SRC(i.code) == BPF_X ? X : i.k;
    switch (BPF_CLASS(i.code)) {
      case BPF_LD:
        switch (BPF_MODE(i.code)) {
          case BPF_ABS: std::memcpy(&A, buf.data() + i.k, 4); break;
          case BPF_LEN: A = kSeccompDataSize; break;
          case BPF_IMM: A = i.k; break;
          case BPF_MEM: A = M[i.k]; break;
        }
        break;
      case BPF_LDX:
        switch (BPF_MODE(i.code)) {
          case BPF_LEN: X = kSeccompDataSize; break;
          case BPF_IMM: X = i.k; break;
          case BPF_MEM: X = M[i.k]; break;
        }
        break;
      case BPF_ST: M[i.k] = A; break;
      case BPF_STX: M[i.k] = X; break;
      case BPF_ALU:
        switch (BPF_OP(i.code)) {
          case BPF_ADD: A += src; break;
          case BPF_SUB: A -= src; break;
          case BPF_MUL: A *= src; break;
          case BPF_DIV:
            if (src == 0) return decode_ret(0);  // classic BPF returns 0
            A /= src;
            break;
          case BPF_MOD:
            if (src == 0) return decode_ret(0);  // classic BPF returns 0
            A %= src;
            break;
          case BPF_OR: A |= src; break;
          case BPF_AND: A &= src; break;
          case BPF_XOR: A ^= src; break;
          case BPF_LSH: A = src >= 32 ? 0 : A << src; break;
          case BPF_RSH: A = src >= 32 ? 0 : A >> src; break;
          case BPF_NEG: A = 0u - A; break;
        }
        break;
      case BPF_JMP: {
        bool taken = false;
        switch (BPF_OP(i.code)) {
          case BPF_JA: pc += i.k; continue;
          case BPF_JEQ: taken = A == src; break;
          case BPF_JGT: taken = A > src; break;
          case BPF_JGE: taken = A >= src; break;
          case BPF_JSET: taken = (A & src) != 0; break;
        }
        pc += taken ? i.jt : i.jf;
        break;
      }
      case BPF_RET:
        return decode_ret(BPF_RVAL(i.code) == BPF_A ? A : i.k);
      case BPF_MISC:
        if (BPF_MISCOP(i.code) == BPF_TAX) X = A;
        else A = X;
        break;
    }
  }
  throw Error(ErrorKind::InvalidFilter, "fell off the end of the program");
}

inline Verdict interpret(const std::vector<BpfInsn>& prog, std::uint32_t arch, std::uint32_t nr) {
  SeccompData d;
  d.arch = arch;
  d.nr = static_cast<std::int32_t>(nr);
  return interpret(prog, d);
}

// Raw program bytes: 8 bytes per instruction, little-endian fields.
inline std::vector<std::uint8_t> encode_program(const std::vector<BpfInsn>& prog) {
  std::vector<std::uint8_t> out;
  out.reserve(prog.size() * 8);
  for (const auto& i : prog) {
    out.push_back(static_cast<std::uint8_t>(i.code));
    out.push_back(static_cast<std::uint8_t>(i.code >> 8));
    out.push_back(i.jt);
    out.push_back(i.jf);
    for (int b = 0; b < 32; b += 8) out.push_back(static_cast<std::uint8_t>(i.k >> b));
  }
  return out;
}

inline std::vector<BpfInsn> decode_program(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % 8)
    throw Error(ErrorKind::InvalidFilter, "program size is not a multiple of 8");
  std::vector<BpfInsn> out;
  for (std::size_t o = 0; o < bytes.size(); o += 8) {
    BpfInsn i;
    i.code = static_cast<std::uint16_t>(bytes[o] | (bytes[o + 1] << 8));
    i.jt = bytes[o + 2];
    i.jf = bytes[o + 3];
    i.k = static_cast<std::uint32_t>(bytes[o + 4]) | (static_cast<std::uint32_t>(bytes[o + 5]) << 8) |
          (static_cast<std::uint32_t>(bytes[o + 6]) << 16) |
          (static_cast<std::uint32_t>(bytes[o + 7]) << 24);
    out.push_back(i);
  }
  return out;
}

// Assembler with symbolic labels. Conditional targets must be within the
// 8-bit forward range; use ja (32-bit offset) for long jumps.
class BpfAssembler {
 public:
  using Label = std::size_t;

  Label new_label() {
    labels_.push_back(std::nullopt);
    return labels_.size() - 1;
  }
  void bind(Label l) { labels_[l] = prog_.size(); }

  void stmt(std::uint16_t code, std::uint32_t k) { prog_.push_back(bpf_stmt(code, k)); }
  void load_abs(std::uint32_t off) { stmt(BPF_LD | BPF_W | BPF_ABS, off); }
  void ret(std::uint32_t v) { stmt(BPF_RET | BPF_K, v); }

  // Conditional jump with label targets (nullopt = fall through).
  void jump(std::uint16_t op, std::uint32_t k, std::optional<Label> jt, std::optional<Label> jf) {
    fixups_.push_back({prog_.size(), jt, jf});
    prog_.push_back(bpf_jump(BPF_JMP | op | BPF_K, k, 0, 0));
  }
  void jump_always(Label l) {
    fixups_.push_back({prog_.size(), l, std::nullopt, true});
    prog_.push_back(bpf_stmt(BPF_JMP | BPF_JA, 0));
  }

  std::vector<BpfInsn> finish() {
    for (const auto& f : fixups_) {
      auto offset = [&](std::optional<Label> l) -> std::uint32_t {
        if (!l) return 0;
        if (!labels_[*l]) throw Error(ErrorKind::InvalidFilter, "unbound label");
        if (*labels_[*l] <= f.pc) throw Error(ErrorKind::InvalidFilter, "backward jump");
        return static_cast<std::uint32_t>(*labels_[*l] - f.pc - 1);
      };
      auto& i = prog_[f.pc];
      if (f.always) {
        i.k = offset(f.jt);
        continue;
      }
      auto t = offset(f.jt), e = offset(f.jf);
      if (t > 255 || e > 255) throw Error(ErrorKind::InvalidFilter, "conditional jump too long");
      i.jt = static_cast<std::uint8_t>(t);
      i.jf = static_cast<std::uint8_t>(e);
    }
    return prog_;
  }

  std::size_t size() const { return prog_.size(); }

 private:
  struct Fixup {
    std::size_t pc;
    std::optional<Label> jt, jf;
    bool always = false;
  };
  std::vector<BpfInsn> prog_;
  std::vector<std::optional<std::size_t>> labels_;
  std::vector<Fixup> fixups_;
};

}  // namespace chestnut
