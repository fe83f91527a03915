#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace epiguide::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kUnreliable = 3, kNumeric = 4 };

// Entry point behind the `epiguide` binary; args exclude the program name.
// Reports go to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace epiguide::cli
