#pragma once

#include <ostream>

namespace evasion {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

/// Entry point of the `evasion` tool: synth | train | attack | eval.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace evasion
