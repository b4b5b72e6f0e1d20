#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

namespace ocmr::cli {

using Json = nlohmann::ordered_json;

// Record of one command invocation, written next to its outputs.
class Manifest {
 public:
  explicit Manifest(std::string command);

  Json& config() { return doc_["config"]; }
  void seed(std::uint64_t seed) { doc_["seed"] = seed; }
  void input(const std::string& name, const std::filesystem::path& path);
  void output(const std::string& name, const std::filesystem::path& path);
  Json& extra(const std::string& key) { return doc_[key]; }
  void write(const std::filesystem::path& path) const;

 private:
  Json doc_;
};

// JSON text to a file, newline-terminated.
void write_json(const std::filesystem::path& path, const Json& doc);

}  // namespace ocmr::cli
