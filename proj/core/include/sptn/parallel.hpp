#pragma once

#include <cstddef>
#include <functional>

namespace sptn {

/// Worker count: SPTN_THREADS if set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
unsigned worker_threads();

/// Runs body(i) for i in [0, n) on up to `threads` workers. The first
/// exception thrown by any body is rethrown after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body, unsigned threads = worker_threads());

}  // namespace sptn
