#pragma once

// Self-describing JSON checkpoint containers. Parameter matrices are stored
// as base64 of their raw little-endian bytes (column-major, Eigen's storage
// order) tagged with dtype and shape, so round trips are bit-exact.

#include <cstring>
#include <string>
#include <type_traits>

#include "rtflow/graph.hpp"
#include "rtflow/jsonutil.hpp"

namespace rtflow {

template <typename S>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<S, float>) return "f32";
  else if constexpr (std::is_same_v<S, double>) return "f64";
  else static_assert(!sizeof(S), "unsupported scalar type");
}

template <typename S>
Json mat_to_json(const Mat<S>& m) {
  return Json{{"rows", m.rows()},
              {"cols", m.cols()},
              {"dtype", dtype_name<S>()},
              {"data", base64_encode(m.data(), sizeof(S) * m.size())}};
}

template <typename S>
Mat<S> mat_from_json(const Json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  if (j.at("dtype").get<std::string>() != dtype_name<S>())
    throw ValidationError("checkpoint matrix: dtype mismatch (expected " +
                          std::string(dtype_name<S>()) + ")");
  const auto bytes = base64_decode(j.at("data").get<std::string>());
  if (bytes.size() != static_cast<std::size_t>(rows * cols) * sizeof(S))
    throw ValidationError("checkpoint matrix: payload size mismatch");
  Mat<S> m(rows, cols);
  std::memcpy(m.data(), bytes.data(), bytes.size());
  return m;
}

// Order-sensitive content hash over parameter bytes; used to pin a frozen
// model to the checkpoint that references it.
template <typename S>
std::uint64_t params_hash(const std::vector<const Mat<S>*>& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto* m : params)
    h = fnv1a64(m->data(), sizeof(S) * m->size(), h);
  return h;
}

// The envelope every JSON container in this codebase shares: a string
// `kind` naming the payload plus a format_version. container_kind validates
// and returns the kind; load_container additionally reads the file and
// checks the version, so callers can dispatch on the result.
std::string container_kind(const Json& j);
Json load_container(const std::string& path);

}  // namespace rtflow
