#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mimic::cli {

/// Runs one command line (args[0] is the program name). Results go to `out`;
/// failures print a single "error: ..." line to `err` and return nonzero.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mimic::cli
