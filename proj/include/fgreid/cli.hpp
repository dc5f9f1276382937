#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "fgreid/precision.hpp"

namespace fgreid::inline FGREID_PRECISION {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Command-line entry point; `args` excludes the program name. Errors are
/// reported as a single line on `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fgreid::inline FGREID_PRECISION
