#include <gtest/gtest.h>

#include <random>

#include "chestnut/elf.hpp"
#include "chestnut/func_map.hpp"
#include "support.hpp"

using namespace chestnut;
using testsupport::fixture;

namespace {

bool parses_or_throws_error(std::vector<std::uint8_t> bytes) {
  try {
    auto img = parse_image(std::move(bytes));
    // A parsed image must survive the analysis entry points too.
    (void)extract_all(img);
    return true;
  } catch (const Error&) {
    return true;
  } catch (...) {
    return false;
  }
}

}  // namespace

TEST(ElfImage, ClassifiesFixtures) {
  EXPECT_EQ(load_image(fixture("hello")).kind, ImageKind::ExecutableStatic);
  auto dyn = load_image(fixture("dynmain"));
  EXPECT_EQ(dyn.kind, ImageKind::ExecutableDynamic);
  EXPECT_EQ(dyn.interpreter, "/lib64/ld-linux-x86-64.so.2");
  EXPECT_EQ(dyn.dynamic.needed, std::vector<std::string>{"libfx.so"});

  auto fx = load_image(fixture("libfx.so"));
  EXPECT_EQ(fx.kind, ImageKind::SharedObject);
  EXPECT_EQ(fx.soname, "libfx.so");
  EXPECT_EQ(fx.dynamic.needed, std::vector<std::string>{"libfy.so"});
  std::set<std::string> exports, imports;
  for (const auto& e : fx.dynamic.exports) exports.insert(e.name);
  for (const auto& i : fx.dynamic.imports) imports.insert(i.name);
  EXPECT_TRUE(exports.count("fx_write"));
  EXPECT_TRUE(exports.count("fx_unused"));
  EXPECT_TRUE(imports.count("fy_pid"));
}

TEST(ElfImage, StaticEntryAndSymbols) {
  auto img = load_image(fixture("imm_basic"));
  EXPECT_NE(img.entry_vaddr, 0u);
  EXPECT_FALSE(img.exec_regions.empty());
  EXPECT_TRUE(img.is_mapped(img.entry_vaddr));
  EXPECT_FALSE(img.is_pic);

  // STT_FUNC symbols only; the expect_* labels are NOTYPE.
  auto wrapper = load_image(fixture("musl_wrapper"));
  std::set<std::string> funcs;
  for (const auto& s : wrapper.symtab_functions) funcs.insert(s.name);
  EXPECT_TRUE(funcs.count("sc"));
  for (const auto& f : funcs) EXPECT_NE(f.rfind("expect_", 0), 0u) << f;
}

TEST(ElfImage, RejectsNonElf) {
  std::vector<std::uint8_t> text{'#', '!', '/', 'b', 'i', 'n', '/', 's', 'h', '\n'};
  try {
    parse_image(text);
    FAIL() << "expected NotElf";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NotElf);
  }
}

TEST(ElfImage, RejectsOtherMachines) {
  auto bytes = detail::read_file(fixture("hello"));
  bytes[18] = EM_AARCH64 & 0xff;
  bytes[19] = EM_AARCH64 >> 8;
  try {
    parse_image(bytes);
    FAIL() << "expected UnsupportedArch";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::UnsupportedArch);
  }
}

TEST(ElfImage, TruncatedPrefixesNeverCrash) {
  for (const char* name : {"hello", "dynmain", "libfx.so"}) {
    const auto full = detail::read_file(fixture(name));
    for (std::size_t len = 0; len < full.size(); len += (len < 256 ? 1 : 61)) {
      std::vector<std::uint8_t> cut(full.begin(), full.begin() + static_cast<long>(len));
      ASSERT_TRUE(parses_or_throws_error(std::move(cut))) << name << " cut at " << len;
    }
  }
}

TEST(ElfImage, CorruptedBytesNeverCrash) {
  std::mt19937_64 rng(1234);
  for (const char* name : {"hello", "dynmain", "libfg.so"}) {
    const auto full = detail::read_file(fixture(name));
    std::uniform_int_distribution<std::size_t> pos(0, std::min<std::size_t>(full.size(), 4096) - 1);
    std::uniform_int_distribution<int> byte(0, 255);
    for (int round = 0; round < 300; ++round) {
      auto b = full;
      for (int k = 0; k < 8; ++k) b[pos(rng)] = static_cast<std::uint8_t>(byte(rng));
      ASSERT_TRUE(parses_or_throws_error(std::move(b))) << name << " round " << round;
    }
  }
}

TEST(SyscallListPayload, RoundTripsRandomSets) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::uint32_t> nr(0, 511);
  for (int round = 0; round < 200; ++round) {
    SyscallSet s;
    for (int k = round % 50; k > 0; --k) s.insert(nr(rng));
    auto bytes = encode_syscall_list(s);
    EXPECT_EQ(bytes.size(), 4 + 4 * s.size());
    EXPECT_EQ(decode_syscall_list(bytes), s);
  }
}

TEST(SyscallListPayload, RejectsBadPayloads) {
  auto bytes = encode_syscall_list(SyscallSet{1, 2, 3});
  bytes.pop_back();
  EXPECT_THROW(decode_syscall_list(bytes), Error);
  auto unsorted = encode_syscall_list(SyscallSet{1, 2});
  std::swap(unsorted[4], unsorted[8]);
  EXPECT_THROW(decode_syscall_list(unsorted), Error);
}

TEST(Annotation, WriteThenReadAndReplace) {
  testsupport::TempDir tmp;
  auto img = load_image(fixture("hello"));
  EXPECT_FALSE(read_annotation(img));

  const SyscallSet first{1, 60, 231};
  auto out = write_annotation(img, {NoteType::SyscallList, encode_syscall_list(first)},
                              tmp / "hello.annotated");
  auto annotated = load_image(out);
  auto note = read_annotation(annotated);
  ASSERT_TRUE(note);
  EXPECT_EQ(decode_syscall_list(note->payload), first);

  // A second note type coexists; the same type is replaced.
  const std::vector<std::uint8_t> doc{'{', '}'};
  auto out2 = write_annotation(annotated, {NoteType::CallGraphDoc, doc}, tmp / "hello.2");
  const SyscallSet second{1, 231};
  auto out3 = write_annotation(load_image(out2),
                               {NoteType::SyscallList, encode_syscall_list(second)}, tmp / "hello.3");
  auto last = load_image(out3);
  EXPECT_EQ(decode_syscall_list(read_annotation(last)->payload), second);
  EXPECT_EQ(read_annotation(last, NoteType::CallGraphDoc)->payload, doc);

  // Segments are untouched, so the annotated program still runs.
  auto run = testsupport::run_capture(out3.string());
  EXPECT_EQ(run.status, 0);
  EXPECT_EQ(run.out, "hi\n");
}

TEST(Annotation, PreservesLoadedBytes) {
  testsupport::TempDir tmp;
  auto img = load_image(fixture("libfg.so"));
  auto out = write_annotation(img, {NoteType::SyscallList, encode_syscall_list({1})}, tmp / "x.so");
  auto after = load_image(out);
  // Only the ELF header's section-table fields may change.
  for (const auto& s : img.segments) {
    if (s.type != PT_LOAD) continue;
    const auto skip = s.offset == 0 ? sizeof(Elf64_Ehdr) : 0;
    auto a = img.file().subspan(s.offset + skip, s.filesz - skip);
    auto b = after.file().subspan(s.offset + skip, s.filesz - skip);
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  }
  EXPECT_EQ(extract_all(after).syscalls, extract_all(img).syscalls);
}

TEST(InjectDependency, AddsFirstNeededEntry) {
  testsupport::TempDir tmp;
  auto img = load_image(fixture("dynmain"));
  auto out = inject_dependency(img, "libinjected.so", tmp / "dynmain.inj");
  auto after = load_image(out);
  ASSERT_EQ(after.dynamic.needed.size(), 2u);
  EXPECT_EQ(after.dynamic.needed[0], "libinjected.so");
  EXPECT_EQ(after.dynamic.needed[1], "libfx.so");
  EXPECT_EQ(after.interpreter, img.interpreter);
  EXPECT_EQ(after.entry_vaddr, img.entry_vaddr);
}

TEST(InjectDependency, StaticBinaryIsRejected) {
  testsupport::TempDir tmp;
  try {
    inject_dependency(load_image(fixture("hello")), "libx.so", tmp / "h");
    FAIL() << "expected StaticBinary";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::StaticBinary);
  }
}

TEST(InjectDependency, InjectedLibraryIsLoaded) {
  // The installer with its skip knob set behaves as a plain dependency.
  testsupport::TempDir tmp;
  auto out = inject_dependency(load_image(fixture("dynmain")), CHESTNUT_INSTALLER, tmp / "d");
  auto run = testsupport::run_capture("CHESTNUT_SKIP_INSTALL=1 " + out.string());
  EXPECT_EQ(run.status, 0);
  EXPECT_EQ(run.out, "dyn\n");
}
