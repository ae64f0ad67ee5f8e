#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "binder/errors.hpp"

#include <json.hpp>

namespace binder {

inline constexpr const char* kVersion = "0.1.0";

// FNV-1a over the raw bytes of a file, as a fixed-width hex string.
inline std::string fnv64_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open for hashing: " + path);
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 14];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    const std::streamsize n = in.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  char out[17];
  std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
  return out;
}

// Every command that writes artifacts drops one of these next to them. Two
// runs of the same command on the same inputs produce manifests that differ
// only in the timing block.
struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, std::string> input_hashes;
  std::vector<std::string> outputs;
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;

  void add_input(const std::string& path) { input_hashes[path] = fnv64_file(path); }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["command"] = command;
    j["version"] = kVersion;
    j["seed"] = seed;
    j["config"] = config;
    j["inputs"] = input_hashes;
    j["outputs"] = outputs;
    j["timing"] = {{"wall_seconds", wall_seconds}};
    return j;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write manifest: " + path);
    out << to_json().dump(2) << '\n';
  }
};

}  // namespace binder
