#pragma once

#include <cstddef>
#include <functional>

namespace polarquant {

/// Upper bound on worker threads used by batch operations. 0 restores the
/// default (hardware concurrency).
void set_thread_count(std::size_t threads);
std::size_t thread_count();

/// Runs body(begin, end) over contiguous chunks of [0, n). Chunk boundaries
/// depend only on n and the thread count; each index is visited exactly once.
void parallel_for(std::size_t n,
                  const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace polarquant
