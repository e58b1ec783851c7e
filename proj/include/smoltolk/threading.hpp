#pragma once

#include <functional>

#include "smoltolk/common.hpp"

namespace smoltolk {

// Worker threads used by tensor kernels. Capped by the SMOLTOLK_THREADS
// environment variable; defaults to the hardware concurrency.
//
// Determinism contract: parallel_for partitions [0, n) into contiguous
// chunks and every output element is written by exactly one chunk, so
// results are bit-identical for any thread count. Kernels that need a
// cross-chunk reduction must serialize it or use fixed_tree_sum.
int thread_count();

// Force a specific count (0 = reset to env/default). Intended for tests.
void set_thread_count(int n);

void parallel_for(i64 n, const std::function<void(i64 begin, i64 end)>& fn);

}  // namespace smoltolk
