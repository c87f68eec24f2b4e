// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace pmx {

using Token = std::uint16_t;

// Exit codes shared between library errors and the CLI.
enum ExitCode : int {
    kExitOk = 0,
    kExitValidation = 2,
    kExitCapacity = 3,
    kExitNumeric = 4,
    kExitMissingInput = 5,
};

class Error : public std::runtime_error {
public:
    Error(std::string msg, int code) : std::runtime_error(std::move(msg)), code_(code) {}
    int exit_code() const { return code_; }

private:
    int code_;
};

class ValidationError : public Error {
public:
    explicit ValidationError(std::string msg) : Error(std::move(msg), kExitValidation) {}
};

class CapacityError : public Error {
public:
    explicit CapacityError(std::string msg) : Error(std::move(msg), kExitCapacity) {}
};

class NumericError : public Error {
public:
    explicit NumericError(std::string msg) : Error(std::move(msg), kExitNumeric) {}
};

class MissingInputError : public Error {
public:
    explicit MissingInputError(std::string msg) : Error(std::move(msg), kExitMissingInput) {}
};

// SplitMix64 finalizer. All procedural generation in the project keys off this
// mix, so token streams are pure functions of (seed, coordinates).
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

constexpr std::uint64_t mix64(std::uint64_t a, std::uint64_t b) { return mix64(mix64(a) ^ b); }

constexpr std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix64(mix64(a, b) ^ c);
}

constexpr std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
    return mix64(mix64(a, b, c) ^ d);
}

// Counter-based deterministic RNG (SplitMix64 stream). The sequence depends
// only on the seed, never on platform or library version.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        std::uint64_t x = state_;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). n must be positive.
    std::uint64_t uniform_int(std::uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller (no spare caching, so the draw count per
    // call is fixed and the stream is easy to reason about).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

private:
    std::uint64_t state_;
};

inline constexpr std::uint64_t kFnvOffsetBasis = 0xcbf29ce484222325ull;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;

// FNV-1a over token ids, two bytes per token, little-endian.
inline std::uint64_t fnv1a_token(std::uint64_t h, Token t) {
    h = (h ^ (t & 0xff)) * kFnvPrime;
    h = (h ^ (t >> 8)) * kFnvPrime;
    return h;
}

inline std::uint64_t fnv1a_bytes(const void* data, std::size_t n, std::uint64_t h = kFnvOffsetBasis) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * kFnvPrime;
    return h;
}

std::uint32_t crc32(const void* data, std::size_t n, std::uint32_t seed = 0);

// Worker count for intra-step parallelism. Resolution order: explicit setter
// (CLI --threads), PMX_THREADS, hardware concurrency. Never affects results.
int thread_count();
void set_thread_count(int n);

}  // namespace pmx
