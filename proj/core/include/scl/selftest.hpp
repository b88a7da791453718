#pragma once

#include <ostream>

namespace scl {

// Runs the numerical property suite (reduction/matmul oracles, convolution
// path equivalence and adjoints, decomposition and fusion identities, the
// patch-side/kernel-side comparison, gradient checks, metric oracles and the
// depth-offset invariances), printing one line per check. Returns true when
// every assertion holds. Designed to finish within a couple of minutes on
// one core.
bool run_selftest(std::ostream& os);

}  // namespace scl
