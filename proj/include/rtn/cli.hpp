#pragma once

#include <string>
#include <vector>

namespace rtn {

// argv-style arguments in natural order, program name excluded.
// Exit status: 0 success, 2 missing config file, 3 corrupt bag archive,
// otherwise nonzero with a one-line diagnostic on stderr.
int run_cli(std::vector<std::string> args);

}  // namespace rtn
