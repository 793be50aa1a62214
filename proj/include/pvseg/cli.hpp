#pragma once

#include <string>
#include <vector>

namespace pvseg {

/// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,
  kExitIo = 3,
  kExitNumeric = 4,
};

/// Entry point of the `pvseg` tool; args[0] is the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace pvseg
