#pragma once

// Run bookkeeping for the CLI: line-delimited JSON event log and an
// atomically written per-run manifest with input/output hashes.

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <string>

namespace seeg::runio {

/// FNV-1a over a file's bytes (content fingerprint for manifests).
std::uint64_t hash_file(const std::filesystem::path& file);
/// Combined hash over every regular file under a directory, path-ordered.
std::uint64_t hash_tree(const std::filesystem::path& dir);

struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  nlohmann::json artifact_hashes;  // path -> hex hash
  double seconds = 0.0;

  /// Writes to <dir>/run_manifest.json via temp-file rename.
  void write(const std::filesystem::path& dir) const;
};

/// JSON-lines event log on stderr.
void log_event(const std::string& event, const nlohmann::json& fields = {});

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace seeg::runio
