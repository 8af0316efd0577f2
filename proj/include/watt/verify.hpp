#pragma once

#include <string>
#include <vector>

#include "watt/run.hpp"

namespace watt {

struct VerifyCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Self-contained invariant and oracle checks over the library: operator and
// end-to-end gradients, pseudo-label algebra, loss oracles, reduction
// identities, averaging, landscape geometry and serialization round trips.
// Needs no data or checkpoint on disk.
std::vector<VerifyCheck> run_verify_suite();

// Runs the suite and writes <output_dir>/verify/report.json.
CommandOutput cmd_verify(const RunConfig& config, std::vector<VerifyCheck>* checks = nullptr);

}  // namespace watt
