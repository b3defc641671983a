#pragma once

// Sentence embeddings for consistency losses and analysis. Two modes: a
// fixed random bag-of-tokens table (mean of token embeddings), or the same
// table plus a projection trained contrastively so paired texts land closer
// than mismatched ones. Distances are cosine-style with a choice of norm in
// the denominator.

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rtflow/graph.hpp"
#include "rtflow/jsonutil.hpp"
#include "rtflow/ops.hpp"
#include "rtflow/text.hpp"

namespace rtflow {

enum class EncoderMode { kBagOfTokens, kTrainedContrastive };
enum class DistanceNorm { kL1, kL2 };

inline std::string to_string(DistanceNorm n) {
  return n == DistanceNorm::kL1 ? "l1" : "l2";
}
inline DistanceNorm distance_norm_from_string(const std::string& s) {
  if (s == "l1") return DistanceNorm::kL1;
  if (s == "l2") return DistanceNorm::kL2;
  throw ValidationError("unknown distance norm '" + s + "'");
}

struct EncodeResult {
  Eigen::RowVectorXd v;
  bool degenerate = false;  // empty text: v is all zeros
};

struct DistanceResult {
  double value = 0.0;
  bool degenerate = false;  // some input had zero norm: value pinned to 1
};

struct ContrastiveTrainConfig {
  int epochs = 30;
  int batch_pairs = 8;
  double lr = 3e-3;
  double margin = 0.2;
  std::uint64_t seed = 11;
};

class SentenceEncoder {
 public:
  SentenceEncoder(Vocab vocab, int dim, EncoderMode mode, std::uint64_t seed);

  const Vocab& vocab() const { return vocab_; }
  int dim() const { return dim_; }
  EncoderMode mode() const { return mode_; }

  EncodeResult encode(std::string_view text) const;

  // The row-space composition shared by plain text and expected-embedding
  // inputs: mean over rows, then the projection (identity in bag mode).
  // `rows` is T x dim.
  Eigen::RowVectorXd encode_rows(const Mat<double>& rows) const;

  // 1 - <a,b> / (N(a) * N(b)) with N the chosen norm. Identical inputs under
  // the l2 norm return exactly zero (the mathematically correct value, which
  // plain floating-point evaluation would miss by ~1e-16). Zero-norm inputs
  // pin the distance to 1 and set the degenerate flag.
  static DistanceResult distance(const Eigen::RowVectorXd& a,
                                 const Eigen::RowVectorXd& b, DistanceNorm norm);

  // Pulls paired texts together against shuffled negatives with a hinge on
  // the distance gap. Only meaningful in trained-contrastive mode.
  void train_contrastive(const std::vector<std::pair<std::string, std::string>>& pairs,
                         const ContrastiveTrainConfig& cfg);

  const Mat<double>& token_table() const { return table_; }
  const Mat<double>& projection() const { return proj_; }

  Json to_json() const;
  static SentenceEncoder from_json(const Json& j);

 private:
  Vocab vocab_;
  int dim_;
  EncoderMode mode_;
  Mat<double> table_;  // vocab.size() x dim
  Mat<double> proj_;   // dim x dim, identity in bag mode
};

// On-tape mirror of encode_rows for differentiable inputs (e.g. expected
// embeddings built from token distributions). The encoder parameters enter
// as constants: the consistency loss trains the language model, not the
// encoder.
template <typename S>
Var<S> encode_rows_on_tape(Graph<S>& g, Var<S> rows, const SentenceEncoder& enc) {
  if (rows.cols() != enc.dim())
    throw InvalidInput("encode_rows_on_tape: row width != encoder dim");
  Var<S> pooled = colwise_mean(rows);  // 1 x dim
  if (enc.mode() == EncoderMode::kBagOfTokens) return pooled;
  return matmul(pooled, g.constant(enc.projection().template cast<S>()));
}

// On-tape distance between two 1 x dim sentence vectors, matching
// SentenceEncoder::distance up to the epsilon guard inside the norms.
template <typename S>
Var<S> distance_on_tape(Var<S> a, Var<S> b, DistanceNorm norm) {
  Graph<S>& g = *a.g;
  Var<S> num = dot_all(a, b);
  Var<S> na, nb;
  if (norm == DistanceNorm::kL2) {
    na = sqrt_op(add_scalar(dot_all(a, a), S(1e-24)));
    nb = sqrt_op(add_scalar(dot_all(b, b), S(1e-24)));
  } else {
    na = add_scalar(sum_all(abs_op(a)), S(1e-24));
    nb = add_scalar(sum_all(abs_op(b)), S(1e-24));
  }
  return sub(g.scalar(S(1)), cdiv(num, cmul(na, nb)));
}

}  // namespace rtflow
