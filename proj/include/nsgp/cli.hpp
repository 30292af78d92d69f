#pragma once

namespace nsgp {

/// Entry point of the `nsgp` tool. Returns the process exit code:
/// 0 success, 2 configuration error, 3 numerical failure.
int run_cli(int argc, char** argv);

}  // namespace nsgp
