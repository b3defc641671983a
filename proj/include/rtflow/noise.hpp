#pragma once

// Additive embedding noise for robustness training. Each sequence gets iid
// per-component noise scaled by alpha / sqrt(L * C), where L is that
// sequence's token count (non-padding by default) and C the embedding width.
// Uniform noise draws from U(-1, 1); the Gaussian alternative draws from
// N(0, 1/3), which matches the uniform component variance so the two are
// comparable at equal alpha.

#include <cmath>
#include <cstdint>
#include <vector>

#include "rtflow/graph.hpp"
#include "rtflow/jsonutil.hpp"
#include "rtflow/rng.hpp"

namespace rtflow {

enum class NoiseType { kUniform, kGaussian };

inline std::string to_string(NoiseType t) {
  return t == NoiseType::kUniform ? "uniform" : "gaussian";
}
inline NoiseType noise_type_from_string(const std::string& s) {
  if (s == "uniform") return NoiseType::kUniform;
  if (s == "gaussian") return NoiseType::kGaussian;
  throw ValidationError("unknown noise type '" + s + "'");
}

struct NoiseSpec {
  double alpha = 5.0;
  NoiseType type = NoiseType::kUniform;
  std::uint64_t seed = 0;
  // When true, L is the padded sequence length instead of the non-pad token
  // count. Off by default: padding should not dilute the noise scale.
  bool length_includes_padding = false;

  Json to_json() const {
    return Json{{"alpha", alpha},
                {"type", to_string(type)},
                {"seed", seed},
                {"length_includes_padding", length_includes_padding}};
  }
  static NoiseSpec from_json(const Json& j) {
    NoiseSpec s;
    s.alpha = j.at("alpha").get<double>();
    s.type = noise_type_from_string(j.at("type").get<std::string>());
    s.seed = j.at("seed").get<std::uint64_t>();
    s.length_includes_padding = j.at("length_includes_padding").get<bool>();
    return s;
  }
};

// The scale law itself, kept as a tiny function so tests can pin it.
inline double noise_scale(double alpha, long tokens, long channels) {
  if (tokens <= 0 || channels <= 0)
    throw InvalidInput("noise_scale: tokens and channels must be positive");
  return alpha / std::sqrt(static_cast<double>(tokens) * static_cast<double>(channels));
}

// A batch of padded embedding sequences: B matrices of shape L x C with a
// per-row padding flag (1 = padding row).
template <typename S>
struct TokenEmbeddingBatch {
  std::vector<Mat<S>> embeddings;
  std::vector<std::vector<std::uint8_t>> is_pad;

  int batch() const { return static_cast<int>(embeddings.size()); }
  int token_count(int b) const {
    int n = 0;
    for (auto p : is_pad[b]) n += p ? 0 : 1;
    return n;
  }
  void validate() const {
    if (embeddings.size() != is_pad.size())
      throw InvalidInput("TokenEmbeddingBatch: pad mask count != sequence count");
    for (std::size_t b = 0; b < embeddings.size(); ++b)
      if (static_cast<Eigen::Index>(is_pad[b].size()) != embeddings[b].rows())
        throw InvalidInput("TokenEmbeddingBatch: pad mask length != rows");
  }
};

// Noise for one sequence of the batch; padding rows are exactly zero. Every
// sequence uses its own child stream of spec.seed, so batch elements are
// independent and insertion order cannot leak across elements.
template <typename S>
Mat<S> sample_noise_rows(const NoiseSpec& spec, std::uint64_t element_index,
                         const std::vector<std::uint8_t>& is_pad,
                         Eigen::Index channels) {
  const Eigen::Index rows = static_cast<Eigen::Index>(is_pad.size());
  Mat<S> out = Mat<S>::Zero(rows, channels);
  if (spec.alpha == 0.0) return out;

  long tokens = 0;
  if (spec.length_includes_padding) {
    tokens = rows;
  } else {
    for (auto p : is_pad) tokens += p ? 0 : 1;
  }
  if (tokens == 0) return out;  // nothing but padding: nothing to perturb

  const double scale = noise_scale(spec.alpha, tokens, channels);
  RngStream rng = RngStream(spec.seed).child("embedding-noise", element_index);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (is_pad[r]) continue;
    for (Eigen::Index c = 0; c < channels; ++c) {
      const double e = spec.type == NoiseType::kUniform
                           ? rng.uniform(-1.0, 1.0)
                           : rng.normal(0.0, std::sqrt(1.0 / 3.0));
      out(r, c) = static_cast<S>(scale * e);
    }
  }
  return out;
}

// Pure function: returns a perturbed copy, leaving the input untouched.
// alpha == 0 returns a bitwise-equal copy.
template <typename S>
TokenEmbeddingBatch<S> inject_noise(const TokenEmbeddingBatch<S>& x,
                                    const NoiseSpec& spec) {
  x.validate();
  TokenEmbeddingBatch<S> out = x;
  if (spec.alpha == 0.0) return out;
  for (int b = 0; b < out.batch(); ++b)
    out.embeddings[b] +=
        sample_noise_rows<S>(spec, static_cast<std::uint64_t>(b), out.is_pad[b],
                             out.embeddings[b].cols());
  return out;
}

}  // namespace rtflow
