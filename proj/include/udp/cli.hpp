#pragma once

#include <ostream>

#include "udp/error.hpp"

namespace udp {

/// Process exit code for an error class. Usage and configuration problems map to 2.
int exit_code_for(ErrorKind kind);

/// Entry point of the `udp` command-line tool.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace udp
