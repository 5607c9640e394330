#pragma once
// The `ramp` command line, callable in-process so tests can drive it.
//
// Exit codes:
//   0  success
//   1  unexpected failure
//   2  usage or config error (bad flag, unknown key, failed validation)
//   3  missing input file (checked before anything is written)
//   4  capacity error (a sequence does not fit max_positions)
//   5  malformed or inconsistent data (parse, validation, integrity)
//   6  numeric error (non-finite values)
#include <ostream>
#include <string>
#include <vector>

namespace ramp::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kMissingInput = 3,
  kCapacity = 4,
  kBadData = 5,
  kNumeric = 6,
};

/// args excludes the program name. Artifact paths go to `out`, structured
/// errors (one JSON object per line) to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ramp::cli
