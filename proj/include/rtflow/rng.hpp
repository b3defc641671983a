#pragma once

// Seed discipline: every stochastic component takes an explicit seed and
// derives child streams by hashing (parent_seed, label, index). Work items
// get independent streams, so the order in which items are processed cannot
// change their content.

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

#include "rtflow/common.hpp"

namespace rtflow {

// Derive a child seed from a parent seed plus a label and index. The label
// keeps unrelated consumers (e.g. "noise" vs "shuffle") decorrelated even at
// the same index.
inline std::uint64_t derive_seed(std::uint64_t parent, std::string_view label,
                                 std::uint64_t index = 0) {
  std::uint64_t h = fnv1a64(&parent, sizeof(parent));
  h = fnv1a64(label.data(), label.size(), h);
  h = fnv1a64(&index, sizeof(index), h);
  // One final avalanche so consecutive indices do not map to nearby states.
  h ^= h >> 33;
  h *= 0xff51afd7ed558ccdull;
  h ^= h >> 33;
  return h;
}

// A seeded stream. Thin wrapper over mt19937_64 with the handful of draw
// shapes this project needs; callers own the object (no global state).
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : eng_(seed), seed_(seed) {}

  // Child streams derive from the construction seed, not the current engine
  // state, so derivation is stable regardless of how many draws happened.
  RngStream child(std::string_view label, std::uint64_t index = 0) const {
    return RngStream(derive_seed(seed_, label, index));
  }

  std::uint64_t seed() const { return seed_; }

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(eng_);
  }
  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(eng_);
  }
  // Integer in [0, n).
  std::uint64_t index(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(eng_);
  }
  bool bernoulli(double p) { return std::bernoulli_distribution(p)(eng_); }

  std::mt19937_64& engine() { return eng_; }

  std::string state_string() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }
  void restore_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (!is) throw ValidationError("RngStream: malformed serialized state");
  }

 private:
  std::mt19937_64 eng_;
  std::uint64_t seed_ = 0;
};

}  // namespace rtflow
