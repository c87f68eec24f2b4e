// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pmx/common.hpp"

namespace pmx {

// Exclusive lock on a run directory, released on destruction.
class DirLock {
public:
    explicit DirLock(const std::string& dir);
    ~DirLock();
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::string path_;
};

// Run-directory bookkeeping: the manifest copy and tool configuration are
// hashed at creation; every later command verifies the hash before touching
// the directory.
class RunDirectory {
public:
    static RunDirectory create(const std::string& path, const std::string& manifest_json,
                               const std::string& config_json);
    static RunDirectory open(const std::string& path);

    const std::string& path() const { return path_; }
    std::string file(const std::string& name) const;
    std::string manifest_json() const;
    std::string config_json() const;
    std::uint64_t config_hash() const { return config_hash_; }

    // Reads a file, throwing MissingInputError when absent.
    std::string read(const std::string& name) const;
    bool exists(const std::string& name) const;
    // Atomic write (temp file plus rename).
    void write(const std::string& name, const std::string& content) const;

    // Names every missing input out of `names`, empty when all present.
    std::vector<std::string> missing(const std::vector<std::string>& names) const;

private:
    std::string path_;
    std::uint64_t config_hash_ = 0;
};

std::string read_file(const std::string& path);
void write_file_atomic(const std::string& path, const std::string& content);

inline constexpr const char* kToolVersion = "pmx 0.1.0";

}  // namespace pmx
