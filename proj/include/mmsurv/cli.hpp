#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mmsurv::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// Runs one subcommand. `args` excludes the program name.
/// Returns 0 on success, 1 on validation errors (bad flags, files, schema),
/// 2 on runtime failures, including a failed gradient check.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mmsurv::cli
