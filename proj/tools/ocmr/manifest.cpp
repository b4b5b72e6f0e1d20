#include "manifest.hpp"

#include <chrono>
#include <ctime>
#include <fstream>

#include "ocmr/common.hpp"

#ifndef OCMR_VERSION
#define OCMR_VERSION "unknown"
#endif

namespace ocmr::cli {
namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

Manifest::Manifest(std::string command) {
  doc_["command"] = std::move(command);
  doc_["version"] = OCMR_VERSION;
  doc_["timestamp"] = utc_now();
  doc_["seed"] = nullptr;
  doc_["config"] = Json::object();
  doc_["inputs"] = Json::object();
  doc_["outputs"] = Json::object();
}

void Manifest::input(const std::string& name, const std::filesystem::path& path) {
  doc_["inputs"][name] = path.string();
}

void Manifest::output(const std::string& name, const std::filesystem::path& path) {
  doc_["outputs"][name] = path.string();
}

void Manifest::write(const std::filesystem::path& path) const { write_json(path, doc_); }

void write_json(const std::filesystem::path& path, const Json& doc) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::io, "cannot open " + path.string() + " for writing");
  out << doc.dump(2) << '\n';
  out.flush();
  require(static_cast<bool>(out), ErrorCode::io, "write to " + path.string() + " failed");
}

}  // namespace ocmr::cli
