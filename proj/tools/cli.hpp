#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace gridfill::cli {

inline constexpr int exit_ok = 0;
inline constexpr int exit_failure = 1;
inline constexpr int exit_config = 2;
inline constexpr int exit_data = 3;
inline constexpr int exit_backend = 4;

/// Runs the gridfill command line (args excludes the program name) and
/// returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gridfill::cli
