#pragma once

#include <iosfwd>

namespace clipforge::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomain = 1;
inline constexpr int kExitUsage = 2;

/// Entry point of the `clipforge` tool. Returns 0 on success, 1 on a
/// domain error (bad data, empty split, ...), 2 on a usage error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace clipforge::cli
