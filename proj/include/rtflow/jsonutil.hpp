#pragma once

// Small JSON conveniences shared by corpus/checkpoint/report writers.
// nlohmann::json keeps object keys sorted, so dump() is already a canonical
// serialization and stable for hashing.

#include <fstream>
#include <string>

#include <json.hpp>

#include "rtflow/common.hpp"

namespace rtflow {

using Json = nlohmann::json;

inline std::string canonical_json_hash(const Json& j) {
  return to_hex(fnv1a64(j.dump()));
}

inline void save_json(const std::string& path, const Json& j, int indent = 2) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw InvalidInput("cannot write '" + path + "'");
  f << j.dump(indent) << "\n";
  if (!f) throw Error("short write to '" + path + "'");
}

inline Json load_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InvalidInput("cannot open '" + path + "'");
  Json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("'" + path + "': " + e.what());
  }
  return j;
}

}  // namespace rtflow
