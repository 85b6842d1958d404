#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace compprobe {

inline constexpr std::string_view kToolName = "compprobe";
std::string_view code_version();

// Run record written beside a command's outputs. Paths of outputs are stored
// relative to the output directory, so reruns into another directory yield
// the same bytes.
struct Manifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::filesystem::path> inputs;
  std::vector<std::string> outputs;           // checksummed
  std::vector<std::string> volatile_outputs;  // listed only (wall-clock content)
  nlohmann::json extra = nlohmann::json::object();
};

nlohmann::json manifest_json(const Manifest& m, const std::filesystem::path& out_dir);
void write_manifest(const std::filesystem::path& path, const Manifest& m, const std::filesystem::path& out_dir);

}  // namespace compprobe
