#pragma once

#include <iosfwd>

namespace tridiff::cli {

/// Entry point of the `tridiff` command. Returns the process exit status;
/// `--help` exits 0, invalid flags and failures are nonzero.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace tridiff::cli
