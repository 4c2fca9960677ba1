#pragma once

// Run manifest written beside every command's outputs:
//
//   { "format": "tunnelfp.manifest", "version": 1,
//     "command": "...", "arguments": [...],
//     "config": { full RunConfig snapshot },
//     "inputs":  [ {"path": ..., "bytes": ..., "sha256": ...}, ... ],
//     "outputs": [ "relative/path", ... ] }
//
// No timestamps or host details, so reruns produce identical manifests.

#include <filesystem>
#include <string>
#include <vector>

#include "tunnelfp/config.hpp"

namespace tunnelfp {

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

struct Manifest {
  std::string command;
  std::vector<std::string> arguments;
  RunConfig config;
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;
};

nlohmann::json to_json(const Manifest& m);
void write_manifest(const std::filesystem::path& path, const Manifest& m);

}  // namespace tunnelfp
