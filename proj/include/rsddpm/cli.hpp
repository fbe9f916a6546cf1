#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace rsddpm {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

/// Entry point of the `rsddpm` tool. args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rsddpm
