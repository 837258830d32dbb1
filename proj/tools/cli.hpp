#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace peermarket::cli {

/// Runs one CLI invocation. Exit codes: 0 success, 1 validation/input
/// error, 2 infeasible or non-converged (diagnostic JSON on `err`).
int run(const std::vector<std::string>& args, std::ostream& out,
        std::ostream& err);

int run(int argc, const char* const* argv);

}  // namespace peermarket::cli
