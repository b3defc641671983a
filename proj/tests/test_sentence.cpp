#include <doctest.h>

#include "rtflow/sentence.hpp"
#include "rtflow/synth.hpp"

using namespace rtflow;

namespace {

SentenceEncoder bag_encoder() {
  return SentenceEncoder(Vocab::build(grammar_vocabulary()), 16,
                         EncoderMode::kBagOfTokens, 3);
}

}  // namespace

TEST_CASE("encode: determinism, degenerate input, mean pooling") {
  SentenceEncoder enc = bag_encoder();

  EncodeResult a = enc.encode("left whole breast");
  EncodeResult b = enc.encode("left whole breast");
  CHECK(a.v == b.v);
  CHECK_FALSE(a.degenerate);

  EncodeResult empty = enc.encode("   ");
  CHECK(empty.degenerate);
  CHECK(empty.v.isZero());

  // Bag mode means word order cannot matter (up to summation-order rounding).
  CHECK(enc.encode("whole left breast").v.isApprox(a.v, 1e-14));
  // Mean pooling: a repeated word equals the single word.
  CHECK(enc.encode("left left").v.isApprox(enc.encode("left").v, 1e-12));
}

TEST_CASE("distance: norms, symmetry, identity, degenerate flags") {
  SentenceEncoder enc = bag_encoder();
  Eigen::RowVectorXd a = enc.encode("left whole breast").v;
  Eigen::RowVectorXd b = enc.encode("right chest wall").v;

  SUBCASE("l2 self-distance is exactly zero; l1 generally is not") {
    CHECK(SentenceEncoder::distance(a, a, DistanceNorm::kL2).value == 0.0);
    const double l1_self = SentenceEncoder::distance(a, a, DistanceNorm::kL1).value;
    CHECK(l1_self > 0.0);  // |.|_1 >= |.|_2 with equality only for 1-sparse
  }

  SUBCASE("symmetry and range") {
    for (DistanceNorm n : {DistanceNorm::kL1, DistanceNorm::kL2}) {
      const double dab = SentenceEncoder::distance(a, b, n).value;
      const double dba = SentenceEncoder::distance(b, a, n).value;
      CHECK(dab == doctest::Approx(dba).epsilon(1e-12));
      CHECK(dab >= 0.0);
      CHECK(dab <= 2.0);
    }
  }

  SUBCASE("zero vectors are flagged and pinned to 1") {
    Eigen::RowVectorXd z = Eigen::RowVectorXd::Zero(a.size());
    DistanceResult r = SentenceEncoder::distance(a, z, DistanceNorm::kL2);
    CHECK(r.value == 1.0);
    CHECK(r.degenerate);
    r = SentenceEncoder::distance(z, z, DistanceNorm::kL1);
    CHECK(r.degenerate);
  }

  SUBCASE("on-tape distance matches the plain implementation") {
    Graph<double> g;
    Var<double> va = g.constant(a);
    Var<double> vb = g.constant(b);
    for (DistanceNorm n : {DistanceNorm::kL1, DistanceNorm::kL2}) {
      const double plain = SentenceEncoder::distance(a, b, n).value;
      CHECK(distance_on_tape(va, vb, n).item() ==
            doctest::Approx(plain).epsilon(1e-9));
    }
    // Identical on-tape inputs: within 1e-12 of zero (epsilon-guarded norms).
    CHECK(distance_on_tape(va, va, DistanceNorm::kL2).item() ==
          doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("encode_rows matches encode, on and off tape") {
  SentenceEncoder enc = bag_encoder();
  const std::string text = "postoperative radiotherapy to the right chest wall";
  const std::vector<int> ids = enc.vocab().encode(text);
  Mat<double> rows(static_cast<Eigen::Index>(ids.size()), enc.dim());
  for (std::size_t i = 0; i < ids.size(); ++i)
    rows.row(i) = enc.token_table().row(ids[i]);

  CHECK(enc.encode_rows(rows) == enc.encode(text).v);

  Graph<double> g;
  Var<double> v = encode_rows_on_tape(g, g.constant(rows), enc);
  CHECK(v.val().row(0).isApprox(enc.encode(text).v, 1e-12));
}

TEST_CASE("contrastive training pulls paired texts together") {
  Vocab vocab = Vocab::build(grammar_vocabulary());
  SentenceEncoder enc(vocab, 16, EncoderMode::kTrainedContrastive, 3);

  // Pairs: summary <-> plan of the same case; mismatched cases differ in
  // laterality/surgery so separation is learnable.
  CorpusConfig ccfg;
  ccfg.n_cases = 24;
  ccfg.seed = 9;
  ccfg.raw_dims = Dims3{8, 8, 8};
  auto corpus = make_corpus(ccfg);
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& c : corpus) pairs.emplace_back(c.summary, c.plan);

  auto gap = [&](const SentenceEncoder& e) {
    double pos = 0.0, neg = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto a = e.encode(pairs[i].first).v;
      pos += SentenceEncoder::distance(a, e.encode(pairs[i].second).v,
                                       DistanceNorm::kL2).value;
      const std::size_t j = (i + 7) % pairs.size();
      neg += SentenceEncoder::distance(a, e.encode(pairs[j].second).v,
                                       DistanceNorm::kL2).value;
      ++n;
    }
    return (neg - pos) / n;
  };

  const double before = gap(enc);
  ContrastiveTrainConfig tcfg;
  tcfg.epochs = 20;
  enc.train_contrastive(pairs, tcfg);
  const double after = gap(enc);
  CHECK(after > before);
  CHECK(after > 0.02);  // paired texts measurably closer than mismatched

  SUBCASE("bag mode refuses to train") {
    SentenceEncoder bag = bag_encoder();
    CHECK_THROWS_AS(bag.train_contrastive(pairs, tcfg), ConfigError);
  }
}

TEST_CASE("sentence encoder JSON round trip is bit-exact") {
  SentenceEncoder enc(Vocab::build(grammar_vocabulary()), 12,
                      EncoderMode::kTrainedContrastive, 21);
  Json j = enc.to_json();
  SentenceEncoder back = SentenceEncoder::from_json(j);
  CHECK(back.dim() == enc.dim());
  CHECK(back.mode() == enc.mode());
  CHECK(back.token_table() == enc.token_table());
  CHECK(back.projection() == enc.projection());
  CHECK(back.encode("left breast").v == enc.encode("left breast").v);

  Json bad = j;
  bad["mode"] = "no_such_mode";
  CHECK_THROWS_AS(SentenceEncoder::from_json(bad), ValidationError);
}
