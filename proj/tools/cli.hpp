#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace v0::cli {

inline constexpr const char* kToolVersion = "0.1.0";

// Runs one subcommand. `args` excludes the program name. Returns 0 on
// success, 1 on a validation or usage error and 2 on an I/O error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace v0::cli
