#include <gtest/gtest.h>

#include <chrono>

#include "chestnut/syscall_extract.hpp"
#include "chestnut/syscall_table.hpp"
#include "chestnut/x86_decoder.hpp"
#include "support.hpp"

using namespace chestnut;
using testsupport::fixture;

namespace {

const std::vector<std::string> kFixtures = {
    "imm_basic", "reg_chain",   "subreg", "arith",  "extend", "jump_target", "jump_boundary",
    "musl_wrapper", "clobber", "data_in_text", "chain31", "hello", "forker", "execer"};

std::optional<DecodedInstruction> decode(std::vector<std::uint8_t> bytes) {
  return X86_64Decoder{}.decode(bytes, 0x1000);
}

}  // namespace

TEST(Decoder, SyscallAndMoves) {
  auto sc = decode({0x0f, 0x05});
  ASSERT_TRUE(sc);
  EXPECT_EQ(sc->cls, InsnClass::Syscall);
  EXPECT_EQ(sc->length, 2);

  auto mov = decode({0xb8, 0x27, 0x00, 0x00, 0x00});  // mov $39, %eax
  ASSERT_TRUE(mov);
  EXPECT_EQ(mov->cls, InsnClass::MoveImm);
  EXPECT_EQ(mov->dest, (RegRef{kRax, 32, false}));
  EXPECT_EQ(std::get<std::int64_t>(mov->source), 39);

  auto mov64 = decode({0x48, 0xc7, 0xc0, 0x3c, 0x00, 0x00, 0x00});  // mov $60, %rax
  ASSERT_TRUE(mov64);
  EXPECT_EQ(mov64->length, 7);
  EXPECT_EQ(mov64->dest, (RegRef{kRax, 64, false}));
  EXPECT_EQ(std::get<std::int64_t>(mov64->source), 60);

  auto ah = decode({0xb4, 0x01});  // mov $1, %ah
  ASSERT_TRUE(ah);
  EXPECT_EQ(ah->dest, (RegRef{kRax, 8, true}));

  auto rr = decode({0x89, 0xd8});  // mov %ebx, %eax
  ASSERT_TRUE(rr);
  EXPECT_EQ(rr->cls, InsnClass::MoveReg);
  EXPECT_EQ(rr->dest, (RegRef{kRax, 32, false}));
  EXPECT_EQ(std::get<RegRef>(rr->source), (RegRef{kRbx, 32, false}));
}

TEST(Decoder, BranchesAndRipOperands) {
  auto call = decode({0xe8, 0x10, 0x00, 0x00, 0x00});
  ASSERT_TRUE(call);
  EXPECT_EQ(call->cls, InsnClass::Call);
  EXPECT_EQ(call->target, 0x1000u + 5 + 0x10);

  auto jcc = decode({0x75, 0xfe});  // jne .
  ASSERT_TRUE(jcc);
  EXPECT_EQ(jcc->cls, InsnClass::Branch);
  EXPECT_TRUE(jcc->conditional);
  EXPECT_EQ(jcc->target, 0x1000u);

  auto lea = decode({0x48, 0x8d, 0x35, 0x00, 0x01, 0x00, 0x00});  // lea 0x100(%rip), %rsi
  ASSERT_TRUE(lea);
  EXPECT_TRUE(lea->is_lea);
  EXPECT_EQ(lea->rip_target, 0x1000u + 7 + 0x100);

  auto ind = decode({0xff, 0x25, 0x00, 0x00, 0x00, 0x00});  // jmp *0(%rip)
  ASSERT_TRUE(ind);
  EXPECT_EQ(ind->cls, InsnClass::Branch);
  EXPECT_TRUE(ind->indirect);

  auto ret = decode({0xc3});
  ASSERT_TRUE(ret);
  EXPECT_EQ(ret->cls, InsnClass::Return);

  auto int80 = decode({0xcd, 0x80});
  ASSERT_TRUE(int80);
  EXPECT_TRUE(int80->is_int80);
}

TEST(Decoder, TruncatedInputsAreRejected) {
  EXPECT_FALSE(decode({0xb8, 0x27}));
  EXPECT_FALSE(decode({0x0f}));
  EXPECT_FALSE(decode({}));
}

TEST(Extract, DefaultBudgetIsThirty) { EXPECT_EQ(kDefaultBudget, 30u); }

// Exact agreement with the assembler labels, site by site.
class FixtureGroundTruth : public ::testing::TestWithParam<std::string> {};

TEST_P(FixtureGroundTruth, MatchesLabels) {
  const auto path = fixture(GetParam());
  const auto labels = testsupport::nm_labels(path);
  ASSERT_FALSE(labels.sites.empty());

  const auto t0 = std::chrono::steady_clock::now();
  const auto res = extract_all(load_image(path));
  const auto elapsed = std::chrono::steady_clock::now() - t0;
  EXPECT_LT(elapsed, std::chrono::seconds(1));

  EXPECT_EQ(res.syscalls, labels.numbers);
  EXPECT_EQ(res.unresolved, labels.unresolved);
  ASSERT_EQ(res.sites.size(), labels.sites.size());
  for (const auto& s : res.sites) {
    auto it = labels.sites.find(s.vaddr);
    ASSERT_NE(it, labels.sites.end()) << "site " << to_hex(s.vaddr) << " has no label";
    EXPECT_EQ(s.number, it->second) << to_hex(s.vaddr);
    EXPECT_EQ(s.resolution == Resolution::Unresolved, !it->second.has_value());
  }
}

INSTANTIATE_TEST_SUITE_P(Fixtures, FixtureGroundTruth, ::testing::ValuesIn(kFixtures));

TEST(Extract, ResolutionKinds) {
  auto res = extract_all(load_image(fixture("reg_chain")));
  bool chain = false;
  for (const auto& s : res.sites) chain |= s.resolution == Resolution::RegisterChain;
  EXPECT_TRUE(chain);
  auto imm = extract_all(load_image(fixture("imm_basic")));
  for (const auto& s : imm.sites) EXPECT_NE(s.resolution, Resolution::Unresolved);
}

TEST(Extract, Int80IsDiagnosed) {
  auto res = extract_all(load_image(fixture("clobber")));
  ASSERT_EQ(res.diagnostics.size(), 1u);
  EXPECT_NE(res.diagnostics[0].find("int 0x80"), std::string::npos);
}

TEST(Extract, LongChainNeedsLargerBudget) {
  auto img = load_image(fixture("chain31"));
  const auto labels = testsupport::nm_labels(fixture("chain31"));
  std::uint64_t chain_site = 0;
  for (const auto& [vaddr, nr] : labels.sites)
    if (!nr) chain_site = vaddr;
  ASSERT_NE(chain_site, 0u);

  EXPECT_FALSE(backtrack_number(img, chain_site).number);
  EXPECT_FALSE(backtrack_number(img, chain_site, 30).number);
  auto at31 = backtrack_number(img, chain_site, 31);
  EXPECT_EQ(at31.number, 39u);
  EXPECT_EQ(at31.chain_length, 31u);
  EXPECT_EQ(backtrack_number(img, chain_site, 35).number, 39u);
  EXPECT_EQ(extract_all(img, 35).syscalls, (SyscallSet{39, 60}));
}

// A site resolved at budget b stays resolved, to the same number, at b+1.
TEST(ExtractProperty, BudgetMonotone) {
  for (const auto& name : kFixtures) {
    CodeIndex code(load_image(fixture(name)));
    auto prev = extract_all(code, 0);
    for (std::size_t b = 1; b <= 40; ++b) {
      auto cur = extract_all(code, b);
      ASSERT_EQ(cur.sites.size(), prev.sites.size());
      for (std::size_t i = 0; i < cur.sites.size(); ++i) {
        if (prev.sites[i].number) {
          EXPECT_EQ(cur.sites[i].number, prev.sites[i].number) << name << " b=" << b;
        }
      }
      EXPECT_TRUE(prev.syscalls.is_subset_of(cur.syscalls));
      EXPECT_LE(cur.unresolved, prev.unresolved);
      prev = std::move(cur);
    }
  }
}

TEST(ExtractProperty, DeterministicAcrossThreadCounts) {
  for (const char* lib : {"/lib64/ld-linux-x86-64.so.2", CHESTNUT_FIXTURE_DIR "/forker"}) {
    if (!fs::exists(lib)) continue;
    CodeIndex code(load_image(lib));
    auto one = extract_all(code, kDefaultBudget, 1);
    for (unsigned t : {2u, 3u, 8u}) {
      auto many = extract_all(code, kDefaultBudget, t);
      EXPECT_EQ(many.sites, one.sites) << lib << " threads=" << t;
      EXPECT_EQ(many.syscalls, one.syscalls);
    }
  }
}

TEST(ExtractProperty, SitesAreSyscallOpcodes) {
  for (const auto& name : kFixtures) {
    auto img = load_image(fixture(name));
    for (auto v : find_syscall_sites(img)) {
      auto off = img.offset_of(v);
      ASSERT_TRUE(off);
      EXPECT_EQ(img.file()[*off], 0x0f);
      EXPECT_EQ(img.file()[*off + 1], 0x05);
    }
  }
}

TEST(ExtractProperty, ResolvedNumbersArePlausible) {
  // A libc-sized input: every recovered number is a plausible syscall
  // number, so constant propagation did not invent values. Current libcs
  // use calls newer than the 5.0 table (faccessat2 = 439), hence the bound.
  for (const char* lib : {"/lib/x86_64-linux-gnu/libc.so.6", "/lib64/ld-linux-x86-64.so.2"}) {
    if (!fs::exists(lib)) continue;
    auto res = extract_all(load_image(lib));
    EXPECT_GT(res.syscalls.size(), 10u) << lib;
    for (auto n : res.syscalls) EXPECT_LT(n, 512u) << lib;
    EXPECT_TRUE(res.syscalls.contains(*syscall_number("write"))) << lib;
  }
}
