#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace qvit::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kRuntimeError = 1;
inline constexpr int kUsageError = 2;

// Parses argv and runs one subcommand. Normal output goes to `out`,
// diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace qvit::cli
