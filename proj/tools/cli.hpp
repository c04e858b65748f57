#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace tsal::cli {

/// Runs the `tsal` command line with `args` (without the program name).
/// Data goes to `out`, logs and errors to `err`. Returns the exit code:
/// 0 on success or --help, 2 on a usage error, 1 on a runtime failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tsal::cli
