#pragma once

// Shared basics: error types, small geometry structs, content hashing and
// base64 used by the checkpoint/report containers.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rtflow {

// Error taxonomy. InvalidInput: a caller handed us data that violates a
// documented precondition. ConfigError: an impossible or contradictory
// configuration. ValidationError: an internal consistency check failed on
// otherwise well-formed data (e.g. a file that parses but fails its checksum).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InvalidInput : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ValidationError : Error {
  using Error::Error;
};

// Integer grid shape, order (h, w, s): h indexes the lateral axis, s the
// superior-inferior axis. Linear index = (h * w_dim + w) * s_dim + s, i.e.
// row-major with s fastest.
struct Dims3 {
  int h = 0;
  int w = 0;
  int s = 0;

  long count() const { return static_cast<long>(h) * w * s; }
  bool operator==(const Dims3&) const = default;
};

// Physical voxel spacing in millimetres, same axis order as Dims3.
struct Spacing3 {
  double h = 1.0;
  double w = 1.0;
  double s = 1.0;
  bool operator==(const Spacing3&) const = default;
};

inline long linear_index(const Dims3& d, int h, int w, int s) {
  return (static_cast<long>(h) * d.w + w) * d.s + s;
}

// FNV-1a, 64-bit. Used for config hashes and checkpoint/parameter checksums;
// stable across platforms because it only sees explicit byte sequences.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  return fnv1a64(s.data(), s.size());
}

std::string inline to_hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// Plain base64 (RFC 4648, with padding). Checkpoints store raw little-endian
// parameter bytes through this.
inline std::string base64_encode(const void* data, std::size_t n) {
  static const char* tbl =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  const auto* p = static_cast<const unsigned char*>(data);
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 3 <= n; i += 3) {
    std::uint32_t v = (p[i] << 16) | (p[i + 1] << 8) | p[i + 2];
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(tbl[(v >> 6) & 63]);
    out.push_back(tbl[v & 63]);
  }
  if (i + 1 == n) {
    std::uint32_t v = p[i] << 16;
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out += "==";
  } else if (i + 2 == n) {
    std::uint32_t v = (p[i] << 16) | (p[i + 1] << 8);
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(tbl[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

inline std::vector<unsigned char> base64_decode(std::string_view s) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    if (c == '=') return -1;
    throw InvalidInput("base64_decode: illegal character");
  };
  if (s.size() % 4 != 0) throw InvalidInput("base64_decode: length not a multiple of 4");
  std::vector<unsigned char> out;
  out.reserve(s.size() / 4 * 3);
  for (std::size_t i = 0; i < s.size(); i += 4) {
    int a = val(s[i]), b = val(s[i + 1]), c = val(s[i + 2]), d = val(s[i + 3]);
    if (a < 0 || b < 0) throw InvalidInput("base64_decode: malformed padding");
    std::uint32_t v = (a << 18) | (b << 12) | ((c < 0 ? 0 : c) << 6) | (d < 0 ? 0 : d);
    out.push_back((v >> 16) & 0xff);
    if (c >= 0) out.push_back((v >> 8) & 0xff);
    if (d >= 0) out.push_back(v & 0xff);
  }
  return out;
}

}  // namespace rtflow
