#pragma once

namespace fafesort {

/// Resolve a worker count: returns `requested` if > 0, else the
/// FAFESORT_THREADS environment variable if set, else the OpenMP default.
int effective_threads(int requested = 0);

}  // namespace fafesort
