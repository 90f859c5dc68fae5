#pragma once

#include <ostream>

namespace contin {

/// Process exit codes of the `contin` tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,         // bad command line
  kExitInput = 2,         // unreadable input, unwritable output, bad config value
  kExitContent = 3,       // invalid prompt, tokens, MIDI, or no training data
  kExitWeights = 4,       // weights missing or failing to load
  kExitTraining = 5,      // training diverged
};

/// Runs the command line. Normal output goes to `out`, diagnostics to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace contin
