#pragma once

// Command-line driver: generate, train, evaluate, ablate, gradcheck, report.
// Exit codes: 0 success, 1 usage, 2 validation, 3 numerical failure.

#include <iosfwd>
#include <string>
#include <vector>

#include "helo/error.hpp"

namespace helo {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitNumerical = 3;

int exit_code_for(ErrorKind kind);

/// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace helo
