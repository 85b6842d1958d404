#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace compprobe::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kNonFiniteLoss = 3,
  kSplitOverlap = 4,
  kKindUnsupported = 5,
  kVocabMismatch = 6,
};

// Full command line including the program name. Data goes to `out`,
// diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace compprobe::cli
