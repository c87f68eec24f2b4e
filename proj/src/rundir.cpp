// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#include "pmx/rundir.hpp"

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace pmx {

namespace fs = std::filesystem;
using nlohmann::json;

DirLock::DirLock(const std::string& dir) {
    fs::create_directories(dir);
    path_ = (fs::path(dir) / ".lock").string();
    if (fs::exists(path_)) {
        throw ValidationError("run directory is locked by another command: " + dir);
    }
    std::ofstream lock(path_);
    lock << "locked\n";
}

DirLock::~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingInputError("missing input: " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw MissingInputError("cannot write: " + tmp);
        out << content;
    }
    fs::rename(tmp, path);
}

namespace {

std::uint64_t hash_config(const std::string& manifest_json, const std::string& config_json) {
    std::uint64_t h = fnv1a_bytes(manifest_json.data(), manifest_json.size());
    return fnv1a_bytes(config_json.data(), config_json.size(), h);
}

}  // namespace

RunDirectory RunDirectory::create(const std::string& path, const std::string& manifest_json,
                                  const std::string& config_json) {
    fs::create_directories(path);
    RunDirectory dir;
    dir.path_ = path;
    dir.config_hash_ = hash_config(manifest_json, config_json);
    dir.write("manifest.json", manifest_json);
    dir.write("config.json", config_json);
    json meta;
    meta["config_hash"] = dir.config_hash_;
    meta["tool_version"] = kToolVersion;
    dir.write("meta.json", meta.dump(2) + "\n");
    return dir;
}

RunDirectory RunDirectory::open(const std::string& path) {
    RunDirectory dir;
    dir.path_ = path;
    const std::string meta_text = dir.read("meta.json");
    const json meta = json::parse(meta_text);
    dir.config_hash_ = meta.at("config_hash").get<std::uint64_t>();
    const std::uint64_t actual = hash_config(dir.read("manifest.json"), dir.read("config.json"));
    if (actual != dir.config_hash_) {
        throw ValidationError("run directory config hash mismatch: " + path);
    }
    return dir;
}

std::string RunDirectory::file(const std::string& name) const {
    return (fs::path(path_) / name).string();
}

std::string RunDirectory::manifest_json() const { return read("manifest.json"); }
std::string RunDirectory::config_json() const { return read("config.json"); }

std::string RunDirectory::read(const std::string& name) const { return read_file(file(name)); }

bool RunDirectory::exists(const std::string& name) const { return fs::exists(file(name)); }

void RunDirectory::write(const std::string& name, const std::string& content) const {
    fs::create_directories(fs::path(file(name)).parent_path());
    write_file_atomic(file(name), content);
}

std::vector<std::string> RunDirectory::missing(const std::vector<std::string>& names) const {
    std::vector<std::string> out;
    for (const auto& name : names) {
        if (!exists(name)) out.push_back(name);
    }
    return out;
}

}  // namespace pmx
