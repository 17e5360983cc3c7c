#pragma once

#include <iosfwd>

namespace m2occ {

// Exit codes: 0 success, 2 usage or invalid input/configuration, 1 runtime
// failure (generation gave up, training diverged, I/O failure).
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace m2occ
