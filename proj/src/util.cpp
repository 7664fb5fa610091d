#include "lnprune/util.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <thread>
#include <vector>

#include "lnprune/errors.hpp"

namespace lnprune {

namespace {

int initial_thread_cap() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("LNPRUNE_THREADS")) {
        int v = std::atoi(env);
        if (v >= 1) hw = std::min(hw, v);
    }
    return hw;
}

std::atomic<int> g_thread_cap{initial_thread_cap()};

}  // namespace

int thread_cap() { return g_thread_cap.load(); }

void set_thread_cap(int n) { g_thread_cap.store(std::max(1, n)); }

void parallel_chunks(i64 n, const std::function<void(i64, i64, int)>& fn) {
    if (n <= 0) return;
    const int chunks = static_cast<int>(std::min<i64>(n, kParallelChunks));
    auto chunk_range = [&](int c) {
        i64 begin = n * c / chunks;
        i64 end = n * (c + 1) / chunks;
        return std::pair<i64, i64>(begin, end);
    };
    int workers = std::min(thread_cap(), chunks);
    if (workers <= 1) {
        for (int c = 0; c < chunks; ++c) {
            auto [b, e] = chunk_range(c);
            fn(b, e, c);
        }
        return;
    }
    std::atomic<int> next{0};
    auto body = [&] {
        for (;;) {
            int c = next.fetch_add(1);
            if (c >= chunks) break;
            auto [b, e] = chunk_range(c);
            fn(b, e, c);
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers) - 1);
    for (int t = 1; t < workers; ++t) pool.emplace_back(body);
    body();
    for (auto& th : pool) th.join();
}

u64 mix_seed(u64 seed, u64 salt) {
    u64 z = seed + salt * 0x9e3779b97f4a7c15ULL + 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

u64 fnv1a_extend(u64 h, const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

u64 fnv1a(const void* data, std::size_t bytes) {
    return fnv1a_extend(0xcbf29ce484222325ULL, data, bytes);
}

std::string format_float(double v) {
    char buf[40];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::vector<i64> sample_indices(i64 total, i64 count, u64 seed) {
    if (total < 1) throw DataError("cannot sample from an empty dataset");
    if (count < 1 || count > total)
        throw DataError("sample count " + std::to_string(count) + " out of range for dataset of " +
                        std::to_string(total));
    std::vector<i64> idx(static_cast<std::size_t>(total));
    std::iota(idx.begin(), idx.end(), i64{0});
    std::mt19937_64 rng(seed);
    for (i64 i = 0; i < count; ++i) {
        std::uniform_int_distribution<i64> pick(i, total - 1);
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
    }
    idx.resize(static_cast<std::size_t>(count));
    return idx;
}

void write_text_atomic(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open " + tmp + " for writing");
        out << text;
        if (!out) throw DataError("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace lnprune
