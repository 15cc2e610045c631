#pragma once

namespace ssalab::cli {

/// Runs the ssalab command line. Returns the process exit code.
int run(int argc, const char* const* argv);

}  // namespace ssalab::cli
