#pragma once

#include <cstddef>
#include <functional>

namespace privpool {

/// Worker cap: PRIVPOOL_THREADS if set, otherwise hardware concurrency.
std::size_t worker_threads();

/// Runs fn(i) for i in [0, n). Work is split into contiguous chunks; each
/// index is handled by exactly one thread, so results written per index are
/// independent of the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace privpool
