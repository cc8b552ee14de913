#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mlqa::cli {

enum ExitCode : int { kOk = 0, kConfigError = 1, kNumericalError = 2, kIoError = 3 };

/// Runs one subcommand (synth, train, eval, ablate, gradcheck). `args` excludes
/// the program name. Progress and results go to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mlqa::cli
