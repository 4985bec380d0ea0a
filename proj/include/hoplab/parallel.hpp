// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace hoplab {

// 0 means "one worker per available core".
int resolve_workers(int requested);

// Calls fn(i) for every i in [0, n). Indices are handed out in contiguous
// chunks; callers write results into slot i so the merged output does not
// depend on scheduling. The first exception thrown by any worker is rethrown
// after all workers have stopped.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace hoplab
