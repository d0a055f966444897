#pragma once

#include <elf.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <system_error>
#include <vector>

#include "chestnut/error.hpp"
#include "chestnut/syscall_set.hpp"

namespace chestnut {

namespace fs = std::filesystem;

enum class Arch { x86_64, aarch64 };
enum class ImageKind { ExecutableStatic, ExecutableDynamic, SharedObject };

inline std::string to_hex(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(v));
  return buf;
}

inline const char* to_string(Arch a) {
  return a == Arch::x86_64 ? "x86_64" : "aarch64";
}

inline const char* to_string(ImageKind k) {
  switch (k) {
    case ImageKind::ExecutableStatic: return "executable-static";
    case ImageKind::ExecutableDynamic: return "executable-dynamic";
    case ImageKind::SharedObject: return "shared-object";
  }
  return "?";
}

struct ExecRegion {
  std::uint64_t vaddr = 0;
  std::uint64_t size = 0;
  std::uint64_t file_offset = 0;
};

struct Segment {
  std::uint32_t type = 0;
  std::uint32_t flags = 0;
  std::uint64_t offset = 0;
  std::uint64_t vaddr = 0;
  std::uint64_t filesz = 0;
  std::uint64_t memsz = 0;
  std::uint64_t align = 0;
};

struct Section {
  std::string name;
  std::uint32_t type = 0;
  std::uint64_t flags = 0;
  std::uint64_t addr = 0;
  std::uint64_t offset = 0;
  std::uint64_t size = 0;
  std::uint32_t link = 0;
  std::uint32_t info = 0;
  std::uint64_t entsize = 0;
};

struct ImportSymbol {
  std::string name;
  std::optional<std::string> version;
  bool weak = false;
};

struct ExportSymbol {
  std::string name;
  std::uint64_t vaddr = 0;
  std::uint64_t size = 0;
  bool is_function = false;
};

struct DynamicSymbolTable {
  std::vector<ImportSymbol> imports;
  std::vector<ExportSymbol> exports;
  std::vector<std::string> needed;
};

// Function symbol from .symtab (static or unstripped binaries).
struct LocalSymbol {
  std::string name;
  std::uint64_t vaddr = 0;
  std::uint64_t size = 0;
};

struct Relocation {
  std::uint64_t offset = 0;  // vaddr patched
  std::uint32_t type = 0;
  std::string symbol;        // empty for RELATIVE-style relocations
  std::int64_t addend = 0;
};

// Parsed, immutable view of an ELF64 little-endian file.
struct ElfImage {
  fs::path path;
  Arch arch = Arch::x86_64;
  ImageKind kind = ImageKind::ExecutableStatic;
  std::uint64_t entry_vaddr = 0;
  std::vector<ExecRegion> exec_regions;
  bool is_pic = false;

  DynamicSymbolTable dynamic;
  std::vector<Segment> segments;
  std::vector<Section> sections;
  std::vector<LocalSymbol> symtab_functions;
  std::vector<Relocation> relocations;
  std::vector<std::uint64_t> init_functions;  // DT_INIT, DT_INIT_ARRAY, DT_PREINIT_ARRAY
  std::optional<std::string> interpreter;
  std::optional<std::string> soname;
  std::shared_ptr<const std::vector<std::uint8_t>> bytes;

  std::span<const std::uint8_t> file() const { return *bytes; }

  // File offset backing vaddr, if some PT_LOAD maps it from the file.
  std::optional<std::uint64_t> offset_of(std::uint64_t vaddr) const {
    for (const auto& s : segments) {
      if (s.type != PT_LOAD) continue;
      if (vaddr >= s.vaddr && vaddr < s.vaddr + s.filesz)
        return s.offset + (vaddr - s.vaddr);
    }
    return std::nullopt;
  }

  bool is_mapped(std::uint64_t vaddr) const {
    for (const auto& s : segments)
      if (s.type == PT_LOAD && vaddr >= s.vaddr && vaddr < s.vaddr + s.memsz)
        return true;
    return false;
  }

  // Bytes of an executable region, bounded by the file.
  std::span<const std::uint8_t> region_bytes(const ExecRegion& r) const {
    return file().subspan(r.file_offset, r.size);
  }

  const Section* find_section(std::string_view name) const {
    for (const auto& s : sections)
      if (s.name == name) return &s;
    return nullptr;
  }
};

inline constexpr std::string_view kNoteOwner = "CHESTNUT";
inline constexpr std::string_view kNoteSection = ".note.chestnut";

enum class NoteType : std::uint32_t { SyscallList = 1, CallGraphDoc = 2 };

struct AnnotationNote {
  NoteType type = NoteType::SyscallList;
  std::vector<std::uint8_t> payload;

  friend bool operator==(const AnnotationNote&, const AnnotationNote&) = default;
};

namespace detail {

inline std::uint64_t align_up(std::uint64_t v, std::uint64_t a) {
  return a == 0 ? v : (v + a - 1) / a * a;
}

// Bounds-checked little-endian reader; every failure names the structure.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  template <typename T>
  T read(std::uint64_t offset, const char* what) const {
    if (offset > data_.size() || data_.size() - offset < sizeof(T))
      throw Error(ErrorKind::Truncated, std::string(what) + " at offset " +
                                            std::to_string(offset));
    T v;
    std::memcpy(&v, data_.data() + offset, sizeof(T));
    return v;
  }

  std::span<const std::uint8_t> slice(std::uint64_t offset, std::uint64_t len,
                                      const char* what) const {
    if (offset > data_.size() || data_.size() - offset < len)
      throw Error(ErrorKind::Truncated, std::string(what) + " at offset " +
                                            std::to_string(offset));
    return data_.subspan(offset, len);
  }

  // NUL-terminated string inside [base, base+limit).
  std::string cstr(std::uint64_t base, std::uint64_t limit, std::uint64_t index,
                   const char* what) const {
    if (index >= limit)
      throw Error(ErrorKind::Truncated, std::string(what) + " string index " +
                                            std::to_string(index));
    auto s = slice(base, limit, what);
    auto begin = s.begin() + static_cast<std::ptrdiff_t>(index);
    auto end = std::find(begin, s.end(), std::uint8_t{0});
    if (end == s.end())
      throw Error(ErrorKind::Truncated,
                  std::string(what) + " unterminated string");
    return std::string(begin, end);
  }

  std::size_t size() const { return data_.size(); }

 private:
  std::span<const std::uint8_t> data_;
};

inline std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

// Whole-file replace: write a sibling temp file then rename over target.
inline void write_file_atomic(const fs::path& path,
                              std::span<const std::uint8_t> data,
                              std::optional<fs::perms> perms = std::nullopt) {
  fs::path tmp = path;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size()));
    if (!out) throw Error(ErrorKind::Io, "short write " + tmp.string());
  }
  if (perms) fs::permissions(tmp, *perms);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw Error(ErrorKind::Io, "rename to " + path.string() + ": " + ec.message());
  }
}

template <typename T>
void put(std::vector<std::uint8_t>& buf, std::uint64_t offset, const T& v) {
  if (buf.size() < offset + sizeof(T)) buf.resize(offset + sizeof(T));
  std::memcpy(buf.data() + offset, &v, sizeof(T));
}

template <typename T>
void append(std::vector<std::uint8_t>& buf, const T& v) {
  put(buf, buf.size(), v);
}

inline void pad_to(std::vector<std::uint8_t>& buf, std::uint64_t alignment) {
  buf.resize(align_up(buf.size(), alignment), 0);
}

struct DynamicInfo {
  std::vector<std::pair<std::int64_t, std::uint64_t>> entries;
  std::uint64_t strtab = 0, strsz = 0, symtab = 0, syment = sizeof(Elf64_Sym);
  std::uint64_t hash = 0, gnu_hash = 0, versym = 0, verneed = 0, verneednum = 0;
  std::uint64_t rela = 0, relasz = 0, jmprel = 0, pltrelsz = 0;
  std::uint64_t relr = 0, relrsz = 0;
  std::uint64_t init = 0, init_array = 0, init_arraysz = 0;
  std::uint64_t preinit_array = 0, preinit_arraysz = 0, flags_1 = 0;
  std::vector<std::uint64_t> needed;
  std::optional<std::uint64_t> soname;
};

inline DynamicInfo parse_dynamic(const ByteReader& r, const Segment& dyn) {
  DynamicInfo info;
  for (std::uint64_t off = dyn.offset; off + sizeof(Elf64_Dyn) <= dyn.offset + dyn.filesz;
       off += sizeof(Elf64_Dyn)) {
    auto d = r.read<Elf64_Dyn>(off, "dynamic entry");
    if (d.d_tag == DT_NULL) break;
    std::uint64_t v = d.d_un.d_val;
    info.entries.emplace_back(d.d_tag, v);
    switch (d.d_tag) {
      case DT_NEEDED: info.needed.push_back(v); break;
      case DT_SONAME: info.soname = v; break;
      case DT_STRTAB: info.strtab = v; break;
      case DT_STRSZ: info.strsz = v; break;
      case DT_SYMTAB: info.symtab = v; break;
      case DT_SYMENT: info.syment = v; break;
      case DT_HASH: info.hash = v; break;
      case DT_GNU_HASH: info.gnu_hash = v; break;
      case DT_VERSYM: info.versym = v; break;
      case DT_VERNEED: info.verneed = v; break;
      case DT_VERNEEDNUM: info.verneednum = v; break;
      case DT_RELA: info.rela = v; break;
      case DT_RELASZ: info.relasz = v; break;
      case DT_JMPREL: info.jmprel = v; break;
      case DT_PLTRELSZ: info.pltrelsz = v; break;
      case 36 /* DT_RELR */: info.relr = v; break;
      case 35 /* DT_RELRSZ */: info.relrsz = v; break;
      case DT_INIT: info.init = v; break;
      case DT_INIT_ARRAY: info.init_array = v; break;
      case DT_INIT_ARRAYSZ: info.init_arraysz = v; break;
      case DT_PREINIT_ARRAY: info.preinit_array = v; break;
      case DT_PREINIT_ARRAYSZ: info.preinit_arraysz = v; break;
      case DT_FLAGS_1: info.flags_1 = v; break;
      default: break;
    }
  }
  return info;
}

// Symbol count from the hash tables when no section headers exist.
inline std::uint64_t dynsym_count(const ElfImage& img, const ByteReader& r,
                                  const DynamicInfo& info) {
  for (const auto& s : img.sections)
    if (s.type == SHT_DYNSYM && s.entsize) return s.size / s.entsize;
  if (info.hash) {
    auto off = img.offset_of(info.hash);
    if (off) return r.read<std::uint32_t>(*off + 4, "DT_HASH nchain");
  }
  if (info.gnu_hash) {
    auto off = img.offset_of(info.gnu_hash);
    if (!off) return 0;
    auto nbuckets = r.read<std::uint32_t>(*off, "DT_GNU_HASH");
    auto symoffset = r.read<std::uint32_t>(*off + 4, "DT_GNU_HASH");
    auto bloom_size = r.read<std::uint32_t>(*off + 8, "DT_GNU_HASH");
    std::uint64_t buckets = *off + 16 + 8ull * bloom_size;
    std::uint32_t last = 0;
    for (std::uint32_t i = 0; i < nbuckets; ++i)
      last = std::max(last, r.read<std::uint32_t>(buckets + 4ull * i, "DT_GNU_HASH bucket"));
    if (last < symoffset) return symoffset;
    std::uint64_t chains = buckets + 4ull * nbuckets;
    while (true) {
      auto h = r.read<std::uint32_t>(chains + 4ull * (last - symoffset), "DT_GNU_HASH chain");
      if (h & 1) break;
      ++last;
    }
    return last + 1;
  }
  return 0;
}

inline std::map<std::uint16_t, std::string> parse_verneed(
    const ElfImage& img, const ByteReader& r, const DynamicInfo& info,
    std::uint64_t strtab_off) {
  std::map<std::uint16_t, std::string> out;
  if (!info.verneed) return out;
  auto off = img.offset_of(info.verneed);
  if (!off) return out;
  std::uint64_t cur = *off;
  for (std::uint64_t i = 0; i < info.verneednum; ++i) {
    auto vn = r.read<Elf64_Verneed>(cur, "verneed");
    std::uint64_t aux = cur + vn.vn_aux;
    for (std::uint16_t j = 0; j < vn.vn_cnt; ++j) {
      auto va = r.read<Elf64_Vernaux>(aux, "vernaux");
      out[va.vna_other] = r.cstr(strtab_off, info.strsz, va.vna_name, "dynstr");
      if (!va.vna_next) break;
      aux += va.vna_next;
    }
    if (!vn.vn_next) break;
    cur += vn.vn_next;
  }
  return out;
}

inline void parse_rela_table(const ElfImage& img, const ByteReader& r,
                             std::uint64_t file_off, std::uint64_t size,
                             std::uint64_t symtab_off, std::uint64_t strtab_off,
                             std::uint64_t strsz, std::uint64_t nsyms,
                             std::vector<Relocation>& out) {
  (void)img;
  for (std::uint64_t o = file_off; o + sizeof(Elf64_Rela) <= file_off + size;
       o += sizeof(Elf64_Rela)) {
    auto rel = r.read<Elf64_Rela>(o, "relocation");
    Relocation rr;
    rr.offset = rel.r_offset;
    rr.type = ELF64_R_TYPE(rel.r_info);
    rr.addend = rel.r_addend;
    auto sym = ELF64_R_SYM(rel.r_info);
    if (sym != 0 && sym < nsyms && strsz) {
      auto s = r.read<Elf64_Sym>(symtab_off + sym * sizeof(Elf64_Sym), "relocation symbol");
      rr.symbol = r.cstr(strtab_off, strsz, s.st_name, "dynstr");
    }
    out.push_back(std::move(rr));
  }
}

}  // namespace detail

// Parses an ELF64 little-endian image. Throws NotElf, UnsupportedArch or
// Truncated; never reads outside the file.
inline ElfImage parse_image(std::vector<std::uint8_t> data, fs::path path = {}) {
  using detail::ByteReader;
  ElfImage img;
  img.path = std::move(path);
  img.bytes = std::make_shared<const std::vector<std::uint8_t>>(std::move(data));
  ByteReader r(*img.bytes);

  if (r.size() < EI_NIDENT || std::memcmp(img.bytes->data(), ELFMAG, SELFMAG) != 0)
    throw Error(ErrorKind::NotElf, "bad ELF magic in " + img.path.string());
  const auto* ident = img.bytes->data();
  if (ident[EI_CLASS] != ELFCLASS64)
    throw Error(ErrorKind::UnsupportedArch, "ELF class is not 64-bit");
  if (ident[EI_DATA] != ELFDATA2LSB)
    throw Error(ErrorKind::UnsupportedArch, "ELF data is not little-endian");
  auto eh = r.read<Elf64_Ehdr>(0, "ELF header");
  if (eh.e_machine == EM_X86_64) {
    img.arch = Arch::x86_64;
  } else if (eh.e_machine == EM_AARCH64) {
    // Reserved: the AArch64 backend is not implemented.
    throw Error(ErrorKind::UnsupportedArch, "AArch64 images are not supported yet");
  } else {
    throw Error(ErrorKind::UnsupportedArch,
                "e_machine " + std::to_string(eh.e_machine));
  }
  if (eh.e_type != ET_EXEC && eh.e_type != ET_DYN)
    throw Error(ErrorKind::UnsupportedArch, "e_type " + std::to_string(eh.e_type) +
                                                " (only executables and shared objects)");
  img.entry_vaddr = eh.e_entry;
  img.is_pic = eh.e_type == ET_DYN;

  if (eh.e_phnum && eh.e_phentsize != sizeof(Elf64_Phdr))
    throw Error(ErrorKind::Truncated, "program header entry size");
  for (std::uint16_t i = 0; i < eh.e_phnum; ++i) {
    auto ph = r.read<Elf64_Phdr>(eh.e_phoff + std::uint64_t{i} * sizeof(Elf64_Phdr),
                                 "program header");
    Segment s{ph.p_type, ph.p_flags, ph.p_offset, ph.p_vaddr,
              ph.p_filesz, ph.p_memsz, ph.p_align};
    if (s.type == PT_LOAD || s.type == PT_DYNAMIC || s.type == PT_INTERP)
      r.slice(s.offset, s.filesz, "segment contents");
    img.segments.push_back(s);
  }

  if (eh.e_shoff) {
    if (eh.e_shentsize != sizeof(Elf64_Shdr))
      throw Error(ErrorKind::Truncated, "section header entry size");
    r.slice(eh.e_shoff, std::uint64_t{eh.e_shnum} * sizeof(Elf64_Shdr),
            "section header table");
    std::vector<Elf64_Shdr> raw;
    for (std::uint16_t i = 0; i < eh.e_shnum; ++i)
      raw.push_back(r.read<Elf64_Shdr>(eh.e_shoff + std::uint64_t{i} * sizeof(Elf64_Shdr),
                                       "section header"));
    const Elf64_Shdr* shstr = eh.e_shstrndx < raw.size() ? &raw[eh.e_shstrndx] : nullptr;
    for (const auto& sh : raw) {
      Section s;
      if (shstr && shstr->sh_type == SHT_STRTAB)
        s.name = r.cstr(shstr->sh_offset, shstr->sh_size, sh.sh_name, "section name");
      s.type = sh.sh_type;
      s.flags = sh.sh_flags;
      s.addr = sh.sh_addr;
      s.offset = sh.sh_offset;
      s.size = sh.sh_size;
      s.link = sh.sh_link;
      s.info = sh.sh_info;
      s.entsize = sh.sh_entsize;
      if (s.type != SHT_NOBITS && s.type != SHT_NULL)
        r.slice(s.offset, s.size, "section contents");
      img.sections.push_back(std::move(s));
    }
  }

  for (const auto& s : img.segments)
    if (s.type == PT_LOAD && (s.flags & PF_X) && s.filesz)
      img.exec_regions.push_back({s.vaddr, s.filesz, s.offset});
  std::sort(img.exec_regions.begin(), img.exec_regions.end(),
            [](const auto& a, const auto& b) { return a.vaddr < b.vaddr; });
  for (std::size_t i = 1; i < img.exec_regions.size(); ++i)
    if (img.exec_regions[i - 1].vaddr + img.exec_regions[i - 1].size >
        img.exec_regions[i].vaddr)
      throw Error(ErrorKind::Truncated, "overlapping executable segments");

  const Segment* dyn_seg = nullptr;
  for (const auto& s : img.segments) {
    if (s.type == PT_INTERP) {
      auto sl = r.slice(s.offset, s.filesz, "PT_INTERP");
      std::string interp(sl.begin(), sl.end());
      interp.erase(std::find(interp.begin(), interp.end(), '\0'), interp.end());
      img.interpreter = interp;
    }
    if (s.type == PT_DYNAMIC) dyn_seg = &s;
  }

  detail::DynamicInfo info;
  if (dyn_seg) info = detail::parse_dynamic(r, *dyn_seg);

  if (eh.e_type == ET_EXEC)
    img.kind = img.interpreter ? ImageKind::ExecutableDynamic : ImageKind::ExecutableStatic;
  else if (img.interpreter)
    img.kind = ImageKind::ExecutableDynamic;
  else if (info.flags_1 & DF_1_PIE)
    img.kind = ImageKind::ExecutableStatic;  // static-pie
  else
    img.kind = ImageKind::SharedObject;

  // .symtab function symbols, when present.
  for (const auto& s : img.sections) {
    if (s.type != SHT_SYMTAB || s.link >= img.sections.size()) continue;
    const auto& str = img.sections[s.link];
    for (std::uint64_t o = s.offset; o + sizeof(Elf64_Sym) <= s.offset + s.size;
         o += sizeof(Elf64_Sym)) {
      auto sym = r.read<Elf64_Sym>(o, "symtab entry");
      if (ELF64_ST_TYPE(sym.st_info) != STT_FUNC || sym.st_shndx == SHN_UNDEF ||
          sym.st_value == 0)
        continue;
      img.symtab_functions.push_back(
          {r.cstr(str.offset, str.size, sym.st_name, "strtab"), sym.st_value, sym.st_size});
    }
  }

  if (dyn_seg) {
    std::uint64_t strtab_off = 0, symtab_off = 0;
    if (info.strtab) {
      auto o = img.offset_of(info.strtab);
      if (!o) throw Error(ErrorKind::Truncated, "DT_STRTAB not mapped");
      strtab_off = *o;
      r.slice(strtab_off, info.strsz, "dynamic string table");
    }
    for (auto n : info.needed)
      img.dynamic.needed.push_back(r.cstr(strtab_off, info.strsz, n, "DT_NEEDED"));
    if (info.soname) img.soname = r.cstr(strtab_off, info.strsz, *info.soname, "DT_SONAME");

    std::uint64_t nsyms = 0;
    if (info.symtab) {
      auto o = img.offset_of(info.symtab);
      if (!o) throw Error(ErrorKind::Truncated, "DT_SYMTAB not mapped");
      symtab_off = *o;
      nsyms = detail::dynsym_count(img, r, info);
      auto versions = detail::parse_verneed(img, r, info, strtab_off);
      std::optional<std::uint64_t> versym_off;
      if (info.versym) versym_off = img.offset_of(info.versym);
      for (std::uint64_t i = 1; i < nsyms; ++i) {
        auto sym = r.read<Elf64_Sym>(symtab_off + i * sizeof(Elf64_Sym), "dynsym entry");
        auto name = r.cstr(strtab_off, info.strsz, sym.st_name, "dynstr");
        if (name.empty()) continue;
        auto type = ELF64_ST_TYPE(sym.st_info);
        auto bind = ELF64_ST_BIND(sym.st_info);
        if (sym.st_shndx == SHN_UNDEF) {
          ImportSymbol imp{name, std::nullopt, bind == STB_WEAK};
          if (versym_off) {
            auto v = r.read<std::uint16_t>(*versym_off + 2 * i, "versym");
            auto it = versions.find(v & 0x7fff);
            if (it != versions.end()) imp.version = it->second;
          }
          img.dynamic.imports.push_back(std::move(imp));
        } else if (bind != STB_LOCAL) {
          bool fn = type == STT_FUNC || type == STT_GNU_IFUNC;
          if (fn && !img.is_mapped(sym.st_value))
            throw Error(ErrorKind::Truncated, "export " + name + " outside mapped segments");
          img.dynamic.exports.push_back({name, sym.st_value, sym.st_size, fn});
        }
      }
    }

    auto add_table = [&](std::uint64_t vaddr, std::uint64_t size) {
      if (!vaddr || !size) return;
      auto o = img.offset_of(vaddr);
      if (!o) return;
      detail::parse_rela_table(img, r, *o, size, symtab_off, strtab_off, info.strsz,
                               nsyms, img.relocations);
    };
    add_table(info.rela, info.relasz);
    add_table(info.jmprel, info.pltrelsz);

    if (info.relr && info.relrsz) {
      if (auto o = img.offset_of(info.relr)) {
        std::uint64_t where = 0;
        for (std::uint64_t p = *o; p + 8 <= *o + info.relrsz; p += 8) {
          auto entry = r.read<std::uint64_t>(p, "relr entry");
          if ((entry & 1) == 0) {
            img.relocations.push_back({entry, R_X86_64_RELATIVE, {}, 0});
            where = entry + 8;
          } else {
            for (int bit = 1; bit < 64; ++bit)
              if (entry & (1ull << bit))
                img.relocations.push_back({where + 8ull * (bit - 1), R_X86_64_RELATIVE, {}, 0});
            where += 63 * 8;
          }
        }
      }
    }
    // Implicit addends (RELR) live in the file.
    for (auto& rel : img.relocations)
      if (rel.type == R_X86_64_RELATIVE && rel.addend == 0)
        if (auto o = img.offset_of(rel.offset); o && *o + 8 <= r.size())
          rel.addend = static_cast<std::int64_t>(r.read<std::uint64_t>(*o, "relr target"));

    if (info.init) img.init_functions.push_back(info.init);
    auto add_array = [&](std::uint64_t vaddr, std::uint64_t size) {
      if (!vaddr) return;
      for (std::uint64_t i = 0; i * 8 < size; ++i) {
        std::uint64_t slot = vaddr + 8 * i;
        std::uint64_t value = 0;
        for (const auto& rel : img.relocations)
          if (rel.offset == slot && rel.type == R_X86_64_RELATIVE)
            value = static_cast<std::uint64_t>(rel.addend);
        if (!value)
          if (auto o = img.offset_of(slot)) value = r.read<std::uint64_t>(*o, "init array");
        if (value && value != ~0ull) img.init_functions.push_back(value);
      }
    };
    add_array(info.init_array, info.init_arraysz);
    add_array(info.preinit_array, info.preinit_arraysz);
  } else {
    // Static binaries keep IRELATIVE and friends in allocated SHT_RELA sections.
    for (const auto& s : img.sections) {
      if (s.type != SHT_RELA || !(s.flags & SHF_ALLOC)) continue;
      detail::parse_rela_table(img, r, s.offset, s.size, 0, 0, 0, 0, img.relocations);
    }
    for (const auto& s : img.sections) {
      if (s.type != SHT_INIT_ARRAY && s.type != SHT_PREINIT_ARRAY) continue;
      for (std::uint64_t o = s.offset; o + 8 <= s.offset + s.size; o += 8) {
        auto v = r.read<std::uint64_t>(o, "init array");
        if (v && v != ~0ull) img.init_functions.push_back(v);
      }
    }
    if (const auto* init = img.find_section(".init")) img.init_functions.push_back(init->addr);
  }
  return img;
}

inline ElfImage load_image(const fs::path& path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec))
    throw Error(ErrorKind::Io, "no such file " + path.string());
  return parse_image(detail::read_file(path), path);
}

// ---- annotation payloads ------------------------------------------------

// count:u32le followed by count ascending u32le numbers.
inline std::vector<std::uint8_t> encode_syscall_list(const SyscallSet& set) {
  std::vector<std::uint8_t> out;
  detail::append(out, static_cast<std::uint32_t>(set.size()));
  for (auto n : set) detail::append(out, n);
  return out;
}

inline SyscallSet decode_syscall_list(std::span<const std::uint8_t> payload) {
  detail::ByteReader r(payload);
  auto count = r.read<std::uint32_t>(0, "syscall-list count");
  if (payload.size() != 4 + 4ull * count)
    throw Error(ErrorKind::Truncated, "syscall-list payload size " +
                                          std::to_string(payload.size()) + " for count " +
                                          std::to_string(count));
  std::vector<std::uint32_t> nums;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto n = r.read<std::uint32_t>(4 + 4ull * i, "syscall-list entry");
    if (!nums.empty() && n <= nums.back())
      throw Error(ErrorKind::BadDocument, "syscall-list not strictly ascending");
    nums.push_back(n);
  }
  return SyscallSet(std::move(nums));
}

namespace detail {

inline std::vector<AnnotationNote> parse_notes(std::span<const std::uint8_t> sec) {
  std::vector<AnnotationNote> out;
  ByteReader r(sec);
  std::uint64_t off = 0;
  while (off + sizeof(Elf64_Nhdr) <= sec.size()) {
    auto nh = r.read<Elf64_Nhdr>(off, "note header");
    off += sizeof(Elf64_Nhdr);
    auto name = r.slice(off, nh.n_namesz, "note name");
    off += align_up(nh.n_namesz, 4);
    auto desc = r.slice(off, nh.n_descsz, "note descriptor");
    off += align_up(nh.n_descsz, 4);
    std::string owner(name.begin(), name.end());
    owner.erase(std::find(owner.begin(), owner.end(), '\0'), owner.end());
    if (owner == kNoteOwner)
      out.push_back({static_cast<NoteType>(nh.n_type), {desc.begin(), desc.end()}});
  }
  return out;
}

inline std::vector<std::uint8_t> serialize_notes(const std::vector<AnnotationNote>& notes) {
  std::vector<std::uint8_t> out;
  for (const auto& n : notes) {
    Elf64_Nhdr nh{static_cast<Elf64_Word>(kNoteOwner.size() + 1),
                  static_cast<Elf64_Word>(n.payload.size()),
                  static_cast<Elf64_Word>(n.type)};
    append(out, nh);
    out.insert(out.end(), kNoteOwner.begin(), kNoteOwner.end());
    out.push_back(0);
    pad_to(out, 4);
    out.insert(out.end(), n.payload.begin(), n.payload.end());
    pad_to(out, 4);
  }
  return out;
}

inline fs::path default_output(const ElfImage& img, const std::optional<fs::path>& out) {
  if (out) return *out;
  fs::path p = img.path;
  p += ".chestnut";
  return p;
}

inline std::optional<fs::perms> perms_of(const fs::path& p) {
  std::error_code ec;
  auto st = fs::status(p, ec);
  if (ec) return std::nullopt;
  return st.permissions();
}

}  // namespace detail

inline std::optional<AnnotationNote> read_annotation(
    const ElfImage& img, NoteType type = NoteType::SyscallList) {
  const Section* sec = img.find_section(kNoteSection);
  if (!sec) return std::nullopt;
  auto notes = detail::parse_notes(img.file().subspan(sec->offset, sec->size));
  for (auto& n : notes)
    if (n.type == type) return n;
  return std::nullopt;
}

// Appends (or replaces) the CHESTNUT note of the same type in
// ".note.chestnut". Segments are untouched: new data and a rewritten
// section header table are appended to the file.
inline fs::path write_annotation(const ElfImage& img, const AnnotationNote& note,
                                 std::optional<fs::path> out = std::nullopt) {
  if (note.payload.empty())
    throw Error(ErrorKind::BadDocument, "annotation payload is empty");
  auto out_path = detail::default_output(img, out);
  std::vector<std::uint8_t> buf(img.file().begin(), img.file().end());
  detail::ByteReader r(img.file());
  auto eh = r.read<Elf64_Ehdr>(0, "ELF header");

  std::vector<Elf64_Shdr> shdrs;
  for (std::uint16_t i = 0; i < eh.e_shnum; ++i)
    shdrs.push_back(r.read<Elf64_Shdr>(eh.e_shoff + std::uint64_t{i} * sizeof(Elf64_Shdr),
                                       "section header"));
  if (shdrs.empty()) {
    shdrs.push_back(Elf64_Shdr{});
    Elf64_Shdr str{};
    str.sh_type = SHT_STRTAB;
    str.sh_addralign = 1;
    shdrs.push_back(str);
    eh.e_shstrndx = 1;
  }
  if (eh.e_shstrndx >= shdrs.size())
    throw Error(ErrorKind::Truncated, "e_shstrndx out of range");

  auto& strhdr = shdrs[eh.e_shstrndx];
  std::vector<std::uint8_t> strtab;
  if (strhdr.sh_size) {
    auto s = r.slice(strhdr.sh_offset, strhdr.sh_size, "section name table");
    strtab.assign(s.begin(), s.end());
  } else {
    strtab.push_back(0);
  }
  if (strhdr.sh_name == 0 && strtab.size() == 1) {
    strhdr.sh_name = static_cast<Elf64_Word>(strtab.size());
    const char* nm = ".shstrtab";
    strtab.insert(strtab.end(), nm, nm + std::strlen(nm) + 1);
  }

  std::optional<std::size_t> note_idx;
  for (std::size_t i = 0; i < img.sections.size(); ++i)
    if (img.sections[i].name == kNoteSection) note_idx = i;

  std::vector<AnnotationNote> notes;
  if (note_idx)
    notes = detail::parse_notes(img.file().subspan(img.sections[*note_idx].offset,
                                                   img.sections[*note_idx].size));
  std::erase_if(notes, [&](const AnnotationNote& n) { return n.type == note.type; });
  notes.push_back(note);
  std::sort(notes.begin(), notes.end(),
            [](const auto& a, const auto& b) { return a.type < b.type; });
  auto content = detail::serialize_notes(notes);

  bool new_name = false;
  if (!note_idx) {
    Elf64_Shdr nh{};
    nh.sh_name = static_cast<Elf64_Word>(strtab.size());
    strtab.insert(strtab.end(), kNoteSection.begin(), kNoteSection.end());
    strtab.push_back(0);
    nh.sh_type = SHT_NOTE;
    nh.sh_addralign = 4;
    shdrs.push_back(nh);
    note_idx = shdrs.size() - 1;
    new_name = true;
  }

  detail::pad_to(buf, 8);
  auto& nh = shdrs[*note_idx];
  nh.sh_offset = buf.size();
  nh.sh_size = content.size();
  nh.sh_addr = 0;
  nh.sh_flags = 0;
  buf.insert(buf.end(), content.begin(), content.end());

  if (new_name || eh.e_shnum == 0) {
    auto& sh = shdrs[eh.e_shstrndx];
    sh.sh_offset = buf.size();
    sh.sh_size = strtab.size();
    buf.insert(buf.end(), strtab.begin(), strtab.end());
  }

  detail::pad_to(buf, 8);
  eh.e_shoff = buf.size();
  eh.e_shnum = static_cast<Elf64_Half>(shdrs.size());
  eh.e_shentsize = sizeof(Elf64_Shdr);
  for (const auto& sh : shdrs) detail::append(buf, sh);
  detail::put(buf, 0, eh);

  detail::write_file_atomic(out_path, buf, detail::perms_of(img.path));
  return out_path;
}

// Adds libname as the first DT_NEEDED entry. The new dynamic array and
// string table live in a fresh PT_LOAD obtained by repurposing a PT_NOTE
// program header; existing segments keep their content and addresses.
inline fs::path inject_dependency(const ElfImage& img, const std::string& libname,
                                  std::optional<fs::path> out = std::nullopt) {
  if (img.kind == ImageKind::ExecutableStatic)
    throw Error(ErrorKind::StaticBinary,
                img.path.string() + " has no dynamic section; use the launcher");
  auto out_path = detail::default_output(img, out);
  std::vector<std::uint8_t> buf(img.file().begin(), img.file().end());
  if (std::find(img.dynamic.needed.begin(), img.dynamic.needed.end(), libname) !=
      img.dynamic.needed.end()) {
    detail::write_file_atomic(out_path, buf, detail::perms_of(img.path));
    return out_path;
  }

  detail::ByteReader r(img.file());
  auto eh = r.read<Elf64_Ehdr>(0, "ELF header");
  std::vector<Elf64_Phdr> phdrs;
  for (std::uint16_t i = 0; i < eh.e_phnum; ++i)
    phdrs.push_back(r.read<Elf64_Phdr>(eh.e_phoff + std::uint64_t{i} * sizeof(Elf64_Phdr),
                                       "program header"));

  int dyn_idx = -1, note_idx = -1;
  std::uint64_t max_end = 0;
  for (int i = 0; i < static_cast<int>(phdrs.size()); ++i) {
    const auto& p = phdrs[i];
    if (p.p_type == PT_DYNAMIC) dyn_idx = i;
    if (p.p_type == PT_NOTE) note_idx = i;
    if (p.p_type == PT_LOAD) max_end = std::max(max_end, p.p_vaddr + p.p_memsz);
  }
  if (dyn_idx < 0) throw Error(ErrorKind::StaticBinary, "no PT_DYNAMIC");
  if (note_idx < 0)
    throw Error(ErrorKind::NoRoomForNote, "no spare PT_NOTE program header to repurpose");

  auto info = detail::parse_dynamic(r, Segment{PT_DYNAMIC, 0, phdrs[dyn_idx].p_offset,
                                               phdrs[dyn_idx].p_vaddr, phdrs[dyn_idx].p_filesz,
                                               phdrs[dyn_idx].p_memsz, 8});
  auto str_off = img.offset_of(info.strtab);
  if (!str_off) throw Error(ErrorKind::Truncated, "DT_STRTAB not mapped");
  auto old_str = r.slice(*str_off, info.strsz, "dynamic string table");

  constexpr std::uint64_t kPage = 0x1000;
  detail::pad_to(buf, kPage);
  const std::uint64_t seg_off = buf.size();
  const std::uint64_t seg_vaddr = detail::align_up(max_end, kPage) + (seg_off % kPage);

  std::vector<Elf64_Dyn> dyn;
  std::uint64_t dyn_size = (info.entries.size() + 2) * sizeof(Elf64_Dyn);
  std::uint64_t new_str_vaddr = seg_vaddr + dyn_size;
  std::uint64_t name_off = old_str.size();
  std::uint64_t new_strsz = old_str.size() + libname.size() + 1;
  Elf64_Dyn needed{};
  needed.d_tag = DT_NEEDED;
  needed.d_un.d_val = name_off;
  dyn.push_back(needed);
  for (auto [tag, val] : info.entries) {
    Elf64_Dyn d{};
    d.d_tag = tag;
    d.d_un.d_val = val;
    if (tag == DT_STRTAB) d.d_un.d_ptr = new_str_vaddr;
    if (tag == DT_STRSZ) d.d_un.d_val = new_strsz;
    dyn.push_back(d);
  }
  dyn.push_back(Elf64_Dyn{});
  for (const auto& d : dyn) detail::append(buf, d);
  buf.insert(buf.end(), old_str.begin(), old_str.end());
  buf.insert(buf.end(), libname.begin(), libname.end());
  buf.push_back(0);
  const std::uint64_t seg_size = buf.size() - seg_off;

  Elf64_Phdr load{};
  load.p_type = PT_LOAD;
  load.p_flags = PF_R | PF_W;
  load.p_offset = seg_off;
  load.p_vaddr = load.p_paddr = seg_vaddr;
  load.p_filesz = load.p_memsz = seg_size;
  load.p_align = kPage;
  auto& pd = phdrs[dyn_idx];
  pd.p_offset = seg_off;
  pd.p_vaddr = pd.p_paddr = seg_vaddr;
  pd.p_filesz = pd.p_memsz = dyn_size;

  // Keep PT_LOAD entries sorted by vaddr: the new one goes after the last.
  phdrs.erase(phdrs.begin() + note_idx);
  auto last_load = std::find_if(phdrs.rbegin(), phdrs.rend(),
                                [](const auto& p) { return p.p_type == PT_LOAD; });
  phdrs.insert(last_load.base(), load);
  for (std::size_t i = 0; i < phdrs.size(); ++i)
    detail::put(buf, eh.e_phoff + i * sizeof(Elf64_Phdr), phdrs[i]);

  for (std::size_t i = 0; i < img.sections.size(); ++i) {
    const auto& s = img.sections[i];
    std::uint64_t at = eh.e_shoff + i * sizeof(Elf64_Shdr);
    auto sh = r.read<Elf64_Shdr>(at, "section header");
    if (s.type == SHT_DYNAMIC) {
      sh.sh_offset = seg_off;
      sh.sh_addr = seg_vaddr;
      sh.sh_size = dyn_size;
    } else if (s.type == SHT_STRTAB && s.addr == info.strtab && s.addr) {
      sh.sh_offset = seg_off + dyn_size;
      sh.sh_addr = new_str_vaddr;
      sh.sh_size = new_strsz;
    } else {
      continue;
    }
    detail::put(buf, at, sh);
  }

  detail::write_file_atomic(out_path, buf, detail::perms_of(img.path));
  return out_path;
}

}  // namespace chestnut
