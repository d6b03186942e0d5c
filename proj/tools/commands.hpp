#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sptn::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kIo = 2,
  kNotTractable = 3,
  kFailure = 4,
};

inline constexpr int kMetricsSchemaVersion = 1;

/// Runs one `sptn` invocation; args excludes the program name. Results go to
/// `out`, diagnostics to `err` as one JSON object per line.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sptn::cli
