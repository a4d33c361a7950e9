#pragma once

#include <cstddef>
#include <functional>

namespace dpa {

/// Worker count: hardware concurrency, capped by DPA_THREADS when set.
std::size_t worker_count();

/// Runs fn(i) for i in [0, n). Callers write results into slot i so output
/// order never depends on scheduling. The first exception is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace dpa
