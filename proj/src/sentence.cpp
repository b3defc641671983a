#include "rtflow/sentence.hpp"

#include <algorithm>
#include <memory>

#include "rtflow/adamw.hpp"
#include "rtflow/checkpoint.hpp"
#include "rtflow/rng.hpp"

namespace rtflow {

SentenceEncoder::SentenceEncoder(Vocab vocab, int dim, EncoderMode mode,
                                 std::uint64_t seed)
    : vocab_(std::move(vocab)), dim_(dim), mode_(mode) {
  if (dim <= 0) throw ConfigError("SentenceEncoder: dim must be positive");
  RngStream rng(derive_seed(seed, "sentence-encoder"));
  table_.resize(vocab_.size(), dim_);
  for (Eigen::Index i = 0; i < table_.rows(); ++i)
    for (Eigen::Index j = 0; j < table_.cols(); ++j)
      table_(i, j) = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim_)));
  // Padding embeds to zero so it can never dominate a mean.
  table_.row(vocab_.pad_id()).setZero();
  proj_ = Mat<double>::Identity(dim_, dim_);
}

EncodeResult SentenceEncoder::encode(std::string_view text) const {
  const std::vector<int> ids = vocab_.encode(text);
  if (ids.empty())
    return EncodeResult{Eigen::RowVectorXd::Zero(dim_), /*degenerate=*/true};
  Mat<double> rows(static_cast<Eigen::Index>(ids.size()), dim_);
  for (std::size_t i = 0; i < ids.size(); ++i) rows.row(i) = table_.row(ids[i]);
  return EncodeResult{encode_rows(rows), false};
}

Eigen::RowVectorXd SentenceEncoder::encode_rows(const Mat<double>& rows) const {
  if (rows.cols() != dim_)
    throw InvalidInput("encode_rows: row width != encoder dim");
  if (rows.rows() == 0)
    throw InvalidInput("encode_rows: no rows");
  Eigen::RowVectorXd pooled = rows.colwise().mean();
  if (mode_ == EncoderMode::kBagOfTokens) return pooled;
  return pooled * proj_;
}

DistanceResult SentenceEncoder::distance(const Eigen::RowVectorXd& a,
                                         const Eigen::RowVectorXd& b,
                                         DistanceNorm norm) {
  if (a.size() != b.size())
    throw InvalidInput("distance: dimension mismatch");
  // Identical vectors have exactly zero l2 cosine distance; take that exit
  // before rounding can manufacture ~1e-16 residue.
  if (norm == DistanceNorm::kL2 && a == b && a.squaredNorm() > 0.0)
    return DistanceResult{0.0, false};
  const double num = a.dot(b);
  const double na = norm == DistanceNorm::kL2 ? a.norm() : a.lpNorm<1>();
  const double nb = norm == DistanceNorm::kL2 ? b.norm() : b.lpNorm<1>();
  if (na == 0.0 || nb == 0.0) return DistanceResult{1.0, true};
  return DistanceResult{1.0 - num / (na * nb), false};
}

void SentenceEncoder::train_contrastive(
    const std::vector<std::pair<std::string, std::string>>& pairs,
    const ContrastiveTrainConfig& cfg) {
  if (mode_ != EncoderMode::kTrainedContrastive)
    throw ConfigError("train_contrastive: encoder is in bag-of-tokens mode");
  if (pairs.size() < 2)
    throw InvalidInput("train_contrastive: need at least two pairs");

  auto ids_of = [&](const std::string& text) {
    auto ids = std::make_shared<std::vector<int>>(vocab_.encode(text));
    if (ids->empty()) ids->push_back(vocab_.unk_id());
    return std::shared_ptr<const std::vector<int>>(ids);
  };
  std::vector<std::shared_ptr<const std::vector<int>>> anchors, positives;
  for (const auto& [a, p] : pairs) {
    anchors.push_back(ids_of(a));
    positives.push_back(ids_of(p));
  }

  RngStream rng(derive_seed(cfg.seed, "contrastive-train"));
  AdamWConfig<double> opt_cfg;
  opt_cfg.lr = cfg.lr;
  AdamW<double> opt(opt_cfg);

  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_pairs)) {
      Graph<double> g;
      Var<double> table = g.leaf(table_, true);
      Var<double> proj = g.leaf(proj_, true);
      auto embed = [&](const std::shared_ptr<const std::vector<int>>& ids) {
        return matmul(colwise_mean(gather_rows(table, ids)), proj);
      };
      Var<double> loss = g.scalar(0.0);
      const std::size_t end = std::min(order.size(), start + cfg.batch_pairs);
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        std::size_t j = rng.index(order.size());
        if (j == i) j = (j + 1) % order.size();
        Var<double> a = embed(anchors[i]);
        Var<double> dpos = distance_on_tape(a, embed(positives[i]), DistanceNorm::kL2);
        Var<double> dneg = distance_on_tape(a, embed(positives[j]), DistanceNorm::kL2);
        Var<double> hinge = relu(add_scalar(sub(dpos, dneg), cfg.margin));
        loss = add(loss, hinge);
      }
      loss = scale(loss, 1.0 / static_cast<double>(end - start));
      g.backward(loss);
      opt.step({&table_, &proj_}, {g.grad(table), g.grad(proj)});
      // Keep padding inert even as gradients flow through the table.
      table_.row(vocab_.pad_id()).setZero();
    }
  }
}

Json SentenceEncoder::to_json() const {
  return Json{{"kind", "sentence-encoder"},
              {"mode", mode_ == EncoderMode::kBagOfTokens ? "bag_of_tokens"
                                                          : "trained_contrastive"},
              {"dim", dim_},
              {"vocab", vocab_.tokens()},
              {"table", mat_to_json(table_)},
              {"projection", mat_to_json(proj_)}};
}

SentenceEncoder SentenceEncoder::from_json(const Json& j) {
  if (j.value("kind", "") != "sentence-encoder")
    throw ValidationError("sentence encoder: wrong container kind");
  const std::string mode_s = j.at("mode").get<std::string>();
  EncoderMode mode;
  if (mode_s == "bag_of_tokens") mode = EncoderMode::kBagOfTokens;
  else if (mode_s == "trained_contrastive") mode = EncoderMode::kTrainedContrastive;
  else throw ValidationError("sentence encoder: unknown mode '" + mode_s + "'");

  SentenceEncoder enc(Vocab::from_token_list(j.at("vocab").get<std::vector<std::string>>()),
                      j.at("dim").get<int>(), mode, /*seed=*/0);
  enc.table_ = mat_from_json<double>(j.at("table"));
  enc.proj_ = mat_from_json<double>(j.at("projection"));
  if (enc.table_.rows() != enc.vocab_.size() || enc.table_.cols() != enc.dim_ ||
      enc.proj_.rows() != enc.dim_ || enc.proj_.cols() != enc.dim_)
    throw ValidationError("sentence encoder: parameter shapes inconsistent");
  return enc;
}

}  // namespace rtflow
