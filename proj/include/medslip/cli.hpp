#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace medslip::cli {

/// Exit codes: 0 ok, 1 check failure, 2 config/input, 3 I/O, 4 numeric, 5 compatibility.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// SHA-256 of a file, or of every regular file below a directory (sorted relative paths
/// and contents). Hex encoded.
std::string content_hash(const std::filesystem::path& path);

/// Provenance record written as <out>/run_manifest.json when a command finishes.
struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> inputs;   // path, hash
  std::vector<std::pair<std::string, std::string>> outputs;  // path relative to out, hash
  nlohmann::json extra = nlohmann::json::object();
  double seconds = 0.0;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  /// Writes via a temporary file and rename.
  void write(const std::filesystem::path& out_dir) const;
};

}  // namespace medslip::cli
