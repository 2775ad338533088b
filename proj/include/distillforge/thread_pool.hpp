#pragma once

#include <functional>

namespace distillforge {

/// Worker threads used by the heavy kernels. The count is taken from the
/// DISTILLFORGE_THREADS env var (capped by hardware concurrency) and can be
/// overridden programmatically before first use.
int worker_threads();
void set_worker_threads(int n);

/// Runs fn(begin, end) over a partition of [0, n). Every index is processed
/// by exactly one invocation, so results do not depend on the thread count
/// as long as fn writes only to index-owned outputs.
void parallel_for(long n, const std::function<void(long, long)>& fn);

}  // namespace distillforge
