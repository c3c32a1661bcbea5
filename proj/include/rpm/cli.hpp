#pragma once

namespace rpm::cli {

// Entry point shared by the rpm binary and the CLI tests. Returns 0 on
// success, 1 on runtime failure, 2 on usage errors.
int run(int argc, const char* const* argv);

}  // namespace rpm::cli
