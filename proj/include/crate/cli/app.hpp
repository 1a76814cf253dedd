#pragma once

#include <iosfwd>

namespace crate::cli {

/// Exit codes: ok, user error (bad config, bad input, failed check), internal error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUser = 1;
inline constexpr int kExitInternal = 2;

/// Runs one subcommand. Results go to `out`; the resolved config, progress,
/// and the one-line "error code=<code> message=<text>" report go to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace crate::cli
