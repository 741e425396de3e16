#pragma once

#include <string>
#include <vector>

namespace beliefqa {

// Entry point behind the command-line binary: parses arguments, dispatches
// to the subcommands, and maps failures onto stable exit codes. Configuration
// and file-format problems exit 2, numerical failures exit 3, anything else
// exits 1, success exits 0.
int run_cli(int argc, const char* const* argv);

// Same, for in-process callers; `args` excludes the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace beliefqa
