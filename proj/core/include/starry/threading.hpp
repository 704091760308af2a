#pragma once

#include <cstddef>
#include <functional>

namespace starry {

// Worker cap: min(hardware_concurrency, STARRY_THREADS if set). At least 1.
std::size_t worker_count();

// Runs fn(i) for i in [0, n) across workers. Tasks must be independent;
// result ordering is the caller's job (index-addressed outputs).
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace starry
