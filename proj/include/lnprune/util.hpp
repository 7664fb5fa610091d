#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace lnprune {

using i64 = std::int64_t;
using u64 = std::uint64_t;

// Global worker-thread cap. Starts at min(hardware, LNPRUNE_THREADS).
int thread_cap();
void set_thread_cap(int n);

// Runs fn(begin, end, chunk_index) over [0, n) split into a fixed number of
// contiguous chunks. The chunk layout depends only on n, never on the thread
// count, so any per-chunk partial results combined in chunk order give
// bit-identical totals no matter how many workers ran.
void parallel_chunks(i64 n, const std::function<void(i64, i64, int)>& fn);

inline constexpr int kParallelChunks = 16;

// splitmix64; used to derive independent sub-streams from one master seed.
u64 mix_seed(u64 seed, u64 salt);

// FNV-1a over raw bytes; used for weight-freeze checks and content hashes.
u64 fnv1a(const void* data, std::size_t bytes);
u64 fnv1a_extend(u64 h, const void* data, std::size_t bytes);

// Shortest round-trip decimal form of a float, for reproducible text reports.
std::string format_float(double v);

// Seed-determined choice of `count` distinct indices out of [0, total).
std::vector<i64> sample_indices(i64 total, i64 count, u64 seed);

// Writes via <path>.tmp + rename so readers never observe a half-written file.
void write_text_atomic(const std::string& path, const std::string& text);

}  // namespace lnprune
