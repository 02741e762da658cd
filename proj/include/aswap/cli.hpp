#pragma once

#include <iosfwd>

namespace aswap {

// Entry point behind the aswap binary; callable in-process for tests.
// Exit codes: 0 success, 1 runtime failure, 2 usage/config error,
// 3 access denied, 4 stale registry state.
int cli_run(int argc, const char* const* argv, std::ostream& out,
            std::ostream& err);

}  // namespace aswap
