// Installer for patched binaries. Loaded as the first DT_NEEDED entry, its
// constructor reads the syscall-list note of the running executable and
// installs the matching seccomp filter before the program's own code runs.

#include <linux/filter.h>
#include <sys/prctl.h>
#include <sys/syscall.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <cstring>

#include "chestnut/elf.hpp"
#include "chestnut/filtergen.hpp"

namespace {

// Static storage: nothing is freed after the filter is in place, so the
// allocator cannot issue syscalls the allowlist may not contain.
chestnut::BpfInsn g_program[chestnut::kMaxBpfInstructions];

[[noreturn]] void fail(const char* what) {
  std::fprintf(stderr, "libchestnut: %s; refusing to run unfiltered\n", what);
  std::fflush(stderr);
  ::_exit(126);
}

__attribute__((constructor)) void chestnut_install() {
  if (std::getenv("CHESTNUT_SKIP_INSTALL")) return;
  std::size_t count = 0;
  try {
    auto img = chestnut::load_image("/proc/self/exe");
    auto note = chestnut::read_annotation(img, chestnut::NoteType::SyscallList);
    if (!note) fail("executable carries no syscall-list note");
    chestnut::Allowlist list;
    list.numbers = chestnut::decode_syscall_list(note->payload);
    auto prog = chestnut::build_filter(list, chestnut::kill_process());
    count = prog.instructions.size();
    std::memcpy(g_program, prog.instructions.data(), count * sizeof(chestnut::BpfInsn));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "libchestnut: %s\n", e.what());
    fail("cannot build filter");
  }
  sock_fprog fprog{static_cast<unsigned short>(count), reinterpret_cast<sock_filter*>(g_program)};
  if (::prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0) fail("PR_SET_NO_NEW_PRIVS failed");
  if (::syscall(SYS_seccomp, SECCOMP_SET_MODE_FILTER, 0, &fprog) != 0) fail("seccomp failed");
}

}  // namespace
