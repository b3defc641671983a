#include "rtflow/checkpoint.hpp"

namespace rtflow {

std::string container_kind(const Json& j) {
  if (!j.is_object() || !j.contains("kind") || !j.at("kind").is_string())
    throw ValidationError("container: missing string 'kind'");
  return j.at("kind").get<std::string>();
}

Json load_container(const std::string& path) {
  Json j = load_json(path);
  container_kind(j);
  if (j.value("format_version", 0) != 1)
    throw ValidationError("'" + path + "': unsupported container format_version");
  return j;
}

}  // namespace rtflow
