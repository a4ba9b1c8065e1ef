#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace csilab::cli {

/// Runs one csilab subcommand. args[0] is the subcommand (no program name).
/// Returns the process exit code; diagnostics go to `err`.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace csilab::cli
