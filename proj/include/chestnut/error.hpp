#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace chestnut {

enum class ErrorKind {
  NotElf,
  UnsupportedArch,
  Truncated,
  NoRoomForNote,
  StaticBinary,
  DuplicateStrongSymbol,
  MissingEntry,
  MissingLibrary,
  UnresolvedImport,
  MissingExportMap,
  TooManyRules,
  InvalidFilter,
  InvalidAllowlist,
  LoadRejected,
  TargetNotFound,
  AttachFailed,
  TraceeVanished,
  UnknownSyscall,
  BadDocument,
  Io,
};

inline std::string_view to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::NotElf: return "NotElf";
    case ErrorKind::UnsupportedArch: return "UnsupportedArch";
    case ErrorKind::Truncated: return "Truncated";
    case ErrorKind::NoRoomForNote: return "NoRoomForNote";
    case ErrorKind::StaticBinary: return "StaticBinary";
    case ErrorKind::DuplicateStrongSymbol: return "DuplicateStrongSymbol";
    case ErrorKind::MissingEntry: return "MissingEntry";
    case ErrorKind::MissingLibrary: return "MissingLibrary";
    case ErrorKind::UnresolvedImport: return "UnresolvedImport";
    case ErrorKind::MissingExportMap: return "MissingExportMap";
    case ErrorKind::TooManyRules: return "TooManyRules";
    case ErrorKind::InvalidFilter: return "InvalidFilter";
    case ErrorKind::InvalidAllowlist: return "InvalidAllowlist";
    case ErrorKind::LoadRejected: return "LoadRejected";
    case ErrorKind::TargetNotFound: return "TargetNotFound";
    case ErrorKind::AttachFailed: return "AttachFailed";
    case ErrorKind::TraceeVanished: return "TraceeVanished";
    case ErrorKind::UnknownSyscall: return "UnknownSyscall";
    case ErrorKind::BadDocument: return "BadDocument";
    case ErrorKind::Io: return "Io";
  }
  return "Unknown";
}

// Every failure the library reports is an Error carrying its kind; the
// message names the offending structure or symbol.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  // Enforcement failures map to a different CLI exit code than analysis ones.
  bool is_enforcement() const noexcept {
    return kind_ == ErrorKind::LoadRejected ||
           kind_ == ErrorKind::TargetNotFound ||
           kind_ == ErrorKind::AttachFailed ||
           kind_ == ErrorKind::TraceeVanished;
  }

 private:
  ErrorKind kind_;
};

}  // namespace chestnut
