#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ulcerforge {

// Entry point of the ulcerforge executable. args[0] is the program name.
// Returns 0 on success, 2 on usage errors and 1 on runtime failures; failures
// print one line "error: <category>: <message>" to err.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ulcerforge
