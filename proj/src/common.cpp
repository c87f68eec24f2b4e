// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#include "pmx/common.hpp"

#include <array>
#include <atomic>
#include <cstdlib>
#include <thread>

namespace pmx {

namespace {

std::array<std::uint32_t, 256> make_crc_table() {
    std::array<std::uint32_t, 256> table{};
    for (std::uint32_t i = 0; i < 256; ++i) {
        std::uint32_t c = i;
        for (int k = 0; k < 8; ++k) {
            c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
        }
        table[i] = c;
    }
    return table;
}

std::atomic<int> g_threads{0};

}  // namespace

std::uint32_t crc32(const void* data, std::size_t n, std::uint32_t seed) {
    static const std::array<std::uint32_t, 256> table = make_crc_table();
    std::uint32_t c = seed ^ 0xffffffffu;
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        c = table[(c ^ p[i]) & 0xff] ^ (c >> 8);
    }
    return c ^ 0xffffffffu;
}

int thread_count() {
    int n = g_threads.load(std::memory_order_relaxed);
    if (n > 0) return n;
    if (const char* env = std::getenv("PMX_THREADS")) {
        int parsed = std::atoi(env);
        if (parsed > 0) return parsed;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

void set_thread_count(int n) { g_threads.store(n, std::memory_order_relaxed); }

}  // namespace pmx
