#include <doctest.h>

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "rtflow/lm.hpp"

using namespace rtflow;
using rtflow::testing::rel_err;

namespace {

Vocab micro_vocab() {
  return Vocab::build({"plan", "the", "side", "left", "right", "breast",
                       "chest", "wall", "dose"});
}

LMConfig micro_config() {
  LMConfig c;
  c.embed_dim = 8;
  c.layers = 1;
  c.heads = 2;
  c.context_len = 16;
  return c;
}

std::vector<InstructionSample> micro_batch() {
  return {{"plan the side", "left breast", "left"},
          {"plan the side", "right chest wall", "right dose"}};
}

// Central-difference check of d(loss)/d(params) with the model perturbed in
// place; `make_loss` sees whatever the current parameter values are.
template <typename LossFn>
double lm_fd_error(TinyLM<double>& model, LossFn&& make_loss, double h = 1e-5) {
  std::vector<Mat<double>> analytic;
  {
    Graph<double> g;
    auto b = model.bind(g, /*trainable=*/true);
    Var<double> loss = make_loss(g, b);
    g.backward(loss);
    for (const auto& leaf : b.leaves) analytic.push_back(g.grad(leaf));
  }
  auto value = [&] {
    Graph<double> g;
    auto b = model.bind(g, /*trainable=*/false);
    return make_loss(g, b).item();
  };
  double worst = 0.0;
  const auto params = model.trainable_params();
  REQUIRE(params.size() == analytic.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    Mat<double>& m = *params[p];
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const double orig = m(i, j);
        m(i, j) = orig + h;
        const double fp = value();
        m(i, j) = orig - h;
        const double fm = value();
        m(i, j) = orig;
        worst = std::max(worst, rel_err(analytic[p](i, j), (fp - fm) / (2 * h)));
      }
  }
  return worst;
}

}  // namespace

TEST_CASE("forward: shapes, context guard, causality") {
  TinyLM<double> m(micro_vocab(), micro_config(), 5);
  auto e = m.encode_sample(micro_batch()[0]);

  Graph<double> g;
  auto b = m.bind(g, false);
  Var<double> logits = m.forward_from_embeddings(g, b, m.embed_tokens(g, b, e.ids));
  CHECK(logits.rows() == static_cast<Eigen::Index>(e.ids->size()));
  CHECK(logits.cols() == m.vocab().size());

  SUBCASE("changing a later token leaves earlier rows untouched") {
    auto ids2 = std::make_shared<std::vector<int>>(*e.ids);
    const std::size_t k = e.ids->size() - 2;
    (*ids2)[k] = m.vocab().id("dose");
    REQUIRE((*ids2)[k] != (*e.ids)[k]);
    Graph<double> g2;
    auto b2 = m.bind(g2, false);
    Var<double> logits2 =
        m.forward_from_embeddings(g2, b2, m.embed_tokens(g2, b2, ids2));
    CHECK(logits2.val().topRows(k) == logits.val().topRows(k));
    CHECK_FALSE(logits2.val().row(k) == logits.val().row(k));
  }

  SUBCASE("sequences beyond the context are rejected") {
    auto long_ids = std::make_shared<std::vector<int>>(
        micro_config().context_len + 1, m.vocab().id("plan"));
    Graph<double> g2;
    auto b2 = m.bind(g2, false);
    CHECK_THROWS_AS(
        m.forward_from_embeddings(g2, b2, m.embed_tokens(g2, b2, long_ids)),
        InvalidInput);
  }
}

TEST_CASE("encode_sample: layout, mask, errors") {
  TinyLM<double> m(micro_vocab(), micro_config(), 5);
  auto e = m.encode_sample({"plan the side", "left breast", "left dose"});

  const auto& ids = *e.ids;
  CHECK(ids.front() == m.vocab().bos_id());
  CHECK(ids.back() == m.vocab().eos_id());
  CHECK(ids[e.prompt_len - 1] == m.vocab().tgt_id());
  CHECK(e.target_tokens == 3);  // two target words + <eos>

  int masked = 0;
  for (std::size_t t = 0; t < e.target_mask->size(); ++t) {
    if (!(*e.target_mask)[t]) continue;
    ++masked;
    CHECK(t >= static_cast<std::size_t>(e.prompt_len - 1));
    CHECK((*e.labels)[t] == ids[t + 1]);
  }
  CHECK(masked == e.target_tokens);

  CHECK_THROWS_AS(m.encode_sample({"plan", "left", ""}), InvalidInput);

  SUBCASE("over-length input is head-truncated to fit") {
    std::string big;
    for (int i = 0; i < 40; ++i) big += "breast ";
    auto t = m.encode_sample({"plan", big, "left"});
    CHECK(static_cast<int>(t.ids->size()) <= micro_config().context_len);
    CHECK(t.ids->back() == m.vocab().eos_id());
  }
}

TEST_CASE("loss_vanilla: uniform-logits value, batch mean, label masking") {
  TinyLM<double> m(micro_vocab(), micro_config(), 5);
  const auto batch = micro_batch();

  SUBCASE("zeroed unembedding gives exactly ln V per token") {
    Json j = m.to_json();
    const Mat<double> zeros =
        Mat<double>::Zero(micro_config().embed_dim, m.vocab().size());
    j["params"]["unembed"] = mat_to_json(zeros);
    j.erase("params_hash");
    TinyLM<double> uniform = TinyLM<double>::from_json(j);
    Graph<double> g;
    auto b = uniform.bind(g, false);
    const double loss = uniform.loss_vanilla(g, b, batch).item();
    CHECK(rel_err(loss, std::log(static_cast<double>(m.vocab().size()))) < 1e-12);
  }

  SUBCASE("batch loss is the token-weighted mean of per-sample losses") {
    Graph<double> g;
    auto b = m.bind(g, false);
    const double both = m.loss_vanilla(g, b, batch).item();
    const double l0 = m.loss_vanilla(g, b, {&batch[0], 1}).item();
    const double l1 = m.loss_vanilla(g, b, {&batch[1], 1}).item();
    const double c0 = m.encode_sample(batch[0]).target_tokens;
    const double c1 = m.encode_sample(batch[1]).target_tokens;
    CHECK(rel_err(both, (l0 * c0 + l1 * c1) / (c0 + c1)) < 1e-12);
  }

  SUBCASE("labels outside the answer mask cannot reach the loss") {
    auto e = m.encode_sample(batch[0]);
    Graph<double> g;
    auto b = m.bind(g, false);
    Var<double> logits =
        m.forward_from_embeddings(g, b, m.embed_tokens(g, b, e.ids));
    const double base = masked_ce_sum(logits, e.labels, e.target_mask).item();
    auto mangled = std::make_shared<std::vector<int>>(*e.labels);
    for (std::size_t t = 0; t < mangled->size(); ++t)
      if (!(*e.target_mask)[t]) (*mangled)[t] = m.vocab().id("dose");
    CHECK(masked_ce_sum(logits, mangled, e.target_mask).item() == base);
  }

  SUBCASE("empty batch is rejected") {
    Graph<double> g;
    auto b = m.bind(g, false);
    CHECK_THROWS_AS(m.loss_vanilla(g, b, {}), InvalidInput);
  }
}

TEST_CASE("objective reduction chain: alpha=0 and lambda=0 are exact") {
  TinyLM<double> m(micro_vocab(), micro_config(), 6);
  SentenceEncoder enc(micro_vocab(), 6, EncoderMode::kBagOfTokens, 2);
  const auto batch = micro_batch();

  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    NoiseSpec off;
    off.alpha = 0.0;
    off.seed = trial;
    NoiseSpec on;
    on.alpha = 5.0;
    on.seed = trial;
    ConsistencySpec reg_off;
    reg_off.lambda = 0.0;

    Graph<double> g;
    auto b = m.bind(g, false);
    CHECK(m.loss_neftune(g, b, batch, off).item() ==
          m.loss_vanilla(g, b, batch).item());
    CHECK(m.loss_ceftune(g, b, batch, on, reg_off, enc).item() ==
          m.loss_neftune(g, b, batch, on).item());
  }
}

TEST_CASE("loss_neftune: seed reproducibility and perturbation") {
  TinyLM<double> m(micro_vocab(), micro_config(), 6);
  const auto batch = micro_batch();
  NoiseSpec spec;
  spec.alpha = 5.0;
  spec.seed = 123;

  Graph<double> g;
  auto b = m.bind(g, false);
  const double a = m.loss_neftune(g, b, batch, spec).item();
  const double a2 = m.loss_neftune(g, b, batch, spec).item();
  spec.seed = 124;
  const double c = m.loss_neftune(g, b, batch, spec).item();
  CHECK(a == a2);
  CHECK(a != c);
  CHECK(a != m.loss_vanilla(g, b, batch).item());
}

TEST_CASE("gradcheck: all three objectives against central differences") {
  TinyLM<double> m(micro_vocab(), micro_config(), 7);
  SentenceEncoder enc(micro_vocab(), 6, EncoderMode::kBagOfTokens, 2);
  const auto batch = micro_batch();
  NoiseSpec nspec;
  nspec.alpha = 5.0;
  nspec.seed = 31;

  SUBCASE("vanilla") {
    CHECK(lm_fd_error(m, [&](Graph<double>& g, const TinyLM<double>::Bound& b) {
            return m.loss_vanilla(g, b, batch);
          }) < 1e-6);
  }
  SUBCASE("noise-perturbed") {
    CHECK(lm_fd_error(m, [&](Graph<double>& g, const TinyLM<double>::Bound& b) {
            return m.loss_neftune(g, b, batch, nspec);
          }) < 1e-6);
  }
  SUBCASE("consistency, soft relaxation, frozen reference as FD oracle") {
    // The reference branch must behave as a constant: finite differences
    // computed with the reference pinned to a frozen copy must match the
    // analytic gradient of the ordinary self-referencing loss.
    const TinyLM<double> frozen = m;
    ConsistencySpec cspec;
    cspec.lambda = 1.0;
    for (DistanceNorm norm : {DistanceNorm::kL2, DistanceNorm::kL1}) {
      cspec.norm = norm;
      CHECK(lm_fd_error(m, [&](Graph<double>& g, const TinyLM<double>::Bound& b) {
              return m.loss_ceftune(g, b, batch, nspec, cspec, enc, &frozen);
            }) < 1e-6);
    }
  }
}

TEST_CASE("stop gradient: reference branch contributes exactly nothing") {
  TinyLM<double> m(micro_vocab(), micro_config(), 8);
  SentenceEncoder enc(micro_vocab(), 6, EncoderMode::kBagOfTokens, 2);
  const auto batch = micro_batch();
  NoiseSpec nspec;
  nspec.alpha = 5.0;
  nspec.seed = 9;
  ConsistencySpec cspec;

  // Gradients with the clean branch evaluated through `this` vs through a
  // frozen copy must be bitwise identical: the branch is constants either way.
  const TinyLM<double> frozen = m;
  auto grads_with = [&](const TinyLM<double>* ref) {
    Graph<double> g;
    auto b = m.bind(g, true);
    g.backward(m.loss_ceftune(g, b, batch, nspec, cspec, enc, ref));
    std::vector<Mat<double>> out;
    for (const auto& leaf : b.leaves) out.push_back(g.grad(leaf));
    return out;
  };
  const auto g_self = grads_with(nullptr);
  const auto g_frozen = grads_with(&frozen);
  REQUIRE(g_self.size() == g_frozen.size());
  for (std::size_t i = 0; i < g_self.size(); ++i)
    CHECK(g_self[i] == g_frozen[i]);

  SUBCASE("regularizer actually bites: loss exceeds the noise loss") {
    Graph<double> g;
    auto b = m.bind(g, false);
    CHECK(m.loss_ceftune(g, b, batch, nspec, cspec, enc).item() >
          m.loss_neftune(g, b, batch, nspec).item());
  }

  SUBCASE("hard relaxation reports the term but never backpropagates it") {
    ConsistencySpec hard;
    hard.relaxation = Relaxation::kHard;
    Graph<double> g;
    auto b = m.bind(g, true);
    Var<double> total = m.loss_ceftune(g, b, batch, nspec, hard, enc);
    Var<double> noisy = m.loss_neftune(g, b, batch, nspec);
    CHECK(total.item() >= noisy.item());
    g.backward(total);
    std::vector<Mat<double>> g_hard;
    for (const auto& leaf : b.leaves) g_hard.push_back(g.grad(leaf));

    Graph<double> g2;
    auto b2 = m.bind(g2, true);
    g2.backward(m.loss_neftune(g2, b2, batch, nspec));
    for (std::size_t i = 0; i < g_hard.size(); ++i)
      CHECK(g_hard[i] == g2.grad(b2.leaves[i]));
  }

  SUBCASE("encoder over a different vocabulary is rejected") {
    SentenceEncoder other(Vocab::build({"alien", "tokens"}), 6,
                          EncoderMode::kBagOfTokens, 2);
    Graph<double> g;
    auto b = m.bind(g, false);
    CHECK_THROWS_AS(m.loss_ceftune(g, b, batch, nspec, cspec, other),
                    ConfigError);
  }
}

TEST_CASE("generation: determinism, budgets, guards") {
  TinyLM<double> m(micro_vocab(), micro_config(), 11);

  const auto p = m.format_prompt("plan the side", "left breast");
  CHECK(m.generate_ids(p, 6) == m.generate_ids(p, 6));
  CHECK(m.generate_ids(p, 0).empty());

  const auto out = m.generate_ids(p, 100);
  // Either hit <eos> or the context boundary; never the 100-token budget.
  const bool hit_eos = !out.empty() && out.back() == m.vocab().eos_id();
  const bool hit_context = static_cast<int>(p.size() + out.size()) ==
                           micro_config().context_len;
  CHECK((hit_eos || hit_context));

  CHECK_THROWS_AS(m.generate_ids({}, 4), InvalidInput);
  CHECK_THROWS_AS(
      m.generate_ids(std::vector<int>(micro_config().context_len + 1, 7), 4),
      InvalidInput);
}

TEST_CASE("checkpoint: bit-exact round trip and corruption detection") {
  TinyLM<float> m(micro_vocab(), micro_config(), 13);
  const Json j = m.to_json("rng-state-here");
  TinyLM<float> back = TinyLM<float>::from_json(j);

  CHECK(back.weights_hash() == m.weights_hash());
  const auto p = m.format_prompt("plan the side", "right chest");
  CHECK(back.generate_ids(p, 8) == m.generate_ids(p, 8));
  CHECK(j.at("rng_state").get<std::string>() == "rng-state-here");

  SUBCASE("tampered parameter bytes fail the hash check") {
    Json bad = j;
    std::string b64 = bad["params"]["wte"]["data"].get<std::string>();
    b64[8] = b64[8] == 'A' ? 'B' : 'A';
    bad["params"]["wte"]["data"] = b64;
    CHECK_THROWS_AS(TinyLM<float>::from_json(bad), ValidationError);
  }
  SUBCASE("wrong container kind is rejected") {
    Json bad = j;
    bad["kind"] = "sentence-encoder";
    CHECK_THROWS_AS(TinyLM<float>::from_json(bad), ValidationError);
  }
}

TEST_CASE("low-rank adapter mode trains adapters only") {
  LMConfig cfg = micro_config();
  cfg.finetune_mode = FinetuneMode::kLowRankAdapters;
  cfg.adapter_rank = 2;
  TinyLM<double> m(micro_vocab(), cfg, 17);

  CHECK(m.trainable_params().size() == 4u * cfg.layers);

  // Zero-initialized up-projections: the adapted model starts exactly at the
  // base model, so a full-weight twin with the same seed generates the same.
  TinyLM<double> base(micro_vocab(), micro_config(), 17);
  const auto prompt = m.format_prompt("plan the side", "left breast");
  CHECK(m.generate_ids(prompt, 8) == base.generate_ids(prompt, 8));

  std::vector<ExpertSample> train;
  int idx = 0;
  for (const auto& s : micro_batch())
    train.push_back({"case-" + std::to_string(idx++), s});
  TrainLMConfig tcfg;
  tcfg.objective = TrainObjective::kVanilla;
  tcfg.epochs = 2;
  const Json before = m.to_json();
  train_lm(m, train, {}, tcfg);
  const Json after = m.to_json();
  for (const auto& [name, blob] : after.at("params").items()) {
    const bool is_adapter = name.find(".a") != std::string::npos ||
                            name.find(".b") != std::string::npos;
    if (is_adapter)
      CHECK(blob != before.at("params").at(name));
    else
      CHECK(blob == before.at("params").at(name));
  }
}

TEST_CASE("train_lm: learns, validates splits, guards config") {
  TinyLM<double> m(micro_vocab(), micro_config(), 19);
  std::vector<ExpertSample> train, val;
  const std::vector<InstructionSample> samples = {
      {"plan the side", "left breast", "left"},
      {"plan the side", "right breast", "right"},
      {"plan the side", "left chest wall", "left"},
      {"plan the side", "right chest wall", "right"},
  };
  for (std::size_t i = 0; i < samples.size(); ++i)
    train.push_back({"case-" + std::to_string(i), samples[i]});
  val.push_back({"case-9", {"plan the side", "right breast", "right"}});

  TrainLMConfig cfg;
  cfg.objective = TrainObjective::kNeftune;
  cfg.epochs = 6;
  cfg.batch_size = 2;
  cfg.lr = 3e-3;
  const TrainCurve curve = train_lm(m, train, val, cfg);
  REQUIRE(curve.train_loss.size() == 6);
  REQUIRE(curve.val_loss.size() == 6);
  CHECK(curve.train_loss.back() < curve.train_loss.front());

  SUBCASE("case leakage between splits is rejected") {
    val.push_back({"case-2", samples[2]});
    CHECK_THROWS_AS(train_lm(m, train, val, cfg), ValidationError);
  }
  SUBCASE("consistency objective requires an encoder") {
    cfg.objective = TrainObjective::kCeftune;
    CHECK_THROWS_AS(train_lm(m, train, val, cfg, nullptr), ConfigError);
  }
}

TEST_CASE("a small model memorizes a tiny instruction set") {
  LMConfig cfg;
  cfg.embed_dim = 24;
  cfg.heads = 4;
  cfg.layers = 2;
  cfg.context_len = 32;
  TinyLM<double> m(micro_vocab(), cfg, 23);

  const std::vector<InstructionSample> samples = {
      {"plan the side", "left breast", "left breast dose"},
      {"plan the side", "right chest wall", "right chest dose"},
      {"plan the side", "left chest wall", "left chest dose"},
  };
  std::vector<ExpertSample> train;
  for (std::size_t i = 0; i < samples.size(); ++i)
    train.push_back({"case-" + std::to_string(i), samples[i]});

  TrainLMConfig tcfg;
  tcfg.objective = TrainObjective::kVanilla;
  tcfg.epochs = 200;
  tcfg.batch_size = 3;
  tcfg.lr = 3e-3;
  tcfg.seed = 4;
  const TrainCurve curve = train_lm(m, train, {}, tcfg);
  CHECK(curve.train_loss.back() < 0.1);
  for (const auto& s : samples)
    CHECK(m.generate(s.instruction, s.input, 8) == s.target);
}
