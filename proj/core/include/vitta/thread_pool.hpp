#pragma once

#include <cstdint>
#include <functional>

namespace vitta {

// Process-wide worker pool used for data-parallel loops.
//
// Tasks are partitioned statically by index range, each range is computed in
// a fixed serial order inside one worker, so results are bit-identical for a
// fixed thread count regardless of scheduling. Calls made from inside a pool
// worker run inline (no nested fan-out): a harness that parallelizes whole
// streams automatically gets single-threaded kernels underneath.
void set_num_threads(int n);
int num_threads();

// Runs fn(i) for i in [0, count). Blocks until done.
void parallel_for(std::int64_t count, const std::function<void(std::int64_t)>& fn);

// Runs fn(begin, end) over a static partition of [0, count) into chunks.
void parallel_for_chunks(std::int64_t count,
                         const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace vitta
