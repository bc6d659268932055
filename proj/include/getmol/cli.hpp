#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace getmol {

/// Entry point behind the `getmol` binary; exposed for in-process testing.
/// args excludes the program name. Returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
            std::ostream& err = std::cerr);

}  // namespace getmol
