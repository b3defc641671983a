#pragma once

// A miniature decoder-only transformer over the closed clinical grammar, plus
// the three instruction-tuning objectives used throughout: plain token
// cross-entropy, cross-entropy on noise-perturbed input embeddings, and the
// latter augmented with a consistency regularizer that compares noisy-branch
// and clean-branch generations in sentence-embedding space. The clean branch
// always runs with gradients stopped: its parameters are bound to the tape as
// constants, so no gradient can flow into it by construction.
//
// Samples follow one fixed layout:
//   <bos> instruction <inp> input <tgt> target <eos>
// The loss covers predictions of the target tokens and the closing <eos>
// only. Positional embeddings are added inside the forward pass, which is why
// embedding noise is injected before them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rtflow/adamw.hpp"
#include "rtflow/checkpoint.hpp"
#include "rtflow/common.hpp"
#include "rtflow/graph.hpp"
#include "rtflow/jsonutil.hpp"
#include "rtflow/noise.hpp"
#include "rtflow/ops.hpp"
#include "rtflow/rng.hpp"
#include "rtflow/sentence.hpp"
#include "rtflow/text.hpp"

namespace rtflow {

struct InstructionSample {
  std::string instruction;
  std::string input;
  std::string target;
};

// How the consistency regularizer turns model outputs into sentences. Soft
// pushes each position's token distribution through the sentence encoder's
// table as an expected embedding, keeping the term differentiable. Hard
// greedy-decodes actual strings and reports the distance as a monitored,
// non-backpropagated value.
enum class Relaxation { kSoft, kHard };

inline std::string to_string(Relaxation r) {
  return r == Relaxation::kSoft ? "soft" : "hard";
}
inline Relaxation relaxation_from_string(const std::string& s) {
  if (s == "soft") return Relaxation::kSoft;
  if (s == "hard") return Relaxation::kHard;
  throw ValidationError("unknown relaxation '" + s + "'");
}

struct ConsistencySpec {
  double lambda = 1.0;
  DistanceNorm norm = DistanceNorm::kL2;
  Relaxation relaxation = Relaxation::kSoft;

  Json to_json() const {
    return Json{{"lambda", lambda},
                {"norm", to_string(norm)},
                {"relaxation", to_string(relaxation)}};
  }
  static ConsistencySpec from_json(const Json& j) {
    ConsistencySpec s;
    s.lambda = j.at("lambda").get<double>();
    s.norm = distance_norm_from_string(j.at("norm").get<std::string>());
    s.relaxation = relaxation_from_string(j.at("relaxation").get<std::string>());
    return s;
  }
};

// Full fine-tuning trains every weight; the low-rank mode freezes the base
// model and trains rank-limited adapters on the attention query/value
// projections only.
enum class FinetuneMode { kFull, kLowRankAdapters };

inline std::string to_string(FinetuneMode m) {
  return m == FinetuneMode::kFull ? "full" : "low_rank_adapters";
}

inline FinetuneMode finetune_mode_from_string(const std::string& s) {
  if (s == "full") return FinetuneMode::kFull;
  if (s == "low_rank_adapters") return FinetuneMode::kLowRankAdapters;
  throw ValidationError("unknown finetune mode '" + s + "'");
}

struct LMConfig {
  int embed_dim = 64;
  int layers = 2;
  int heads = 4;
  int context_len = 256;
  FinetuneMode finetune_mode = FinetuneMode::kFull;
  int adapter_rank = 2;

  void validate() const {
    if (embed_dim <= 0 || layers <= 0 || heads <= 0 || context_len <= 0)
      throw ConfigError("LMConfig: dimensions must be positive");
    if (embed_dim % heads != 0)
      throw ConfigError("LMConfig: embed_dim must divide evenly into heads");
    if (finetune_mode == FinetuneMode::kLowRankAdapters && adapter_rank <= 0)
      throw ConfigError("LMConfig: adapter_rank must be positive");
  }

  Json to_json() const {
    return Json{{"embed_dim", embed_dim},     {"layers", layers},
                {"heads", heads},             {"context_len", context_len},
                {"finetune_mode", to_string(finetune_mode)},
                {"adapter_rank", adapter_rank}};
  }
  static LMConfig from_json(const Json& j) {
    LMConfig c;
    c.embed_dim = j.at("embed_dim").get<int>();
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.context_len = j.at("context_len").get<int>();
    c.finetune_mode = finetune_mode_from_string(j.at("finetune_mode").get<std::string>());
    c.adapter_rank = j.at("adapter_rank").get<int>();
    c.validate();
    return c;
  }
};

template <typename S>
class TinyLM {
 public:
  struct LayerParams {
    Mat<S> wq, wk, wv, wo;  // embed_dim x embed_dim
    Mat<S> w1, w2;          // embed_dim x 4*embed_dim and back
    Mat<S> aq, bq, av, bv;  // low-rank adapters; empty in full mode
  };

  TinyLM(Vocab vocab, LMConfig cfg, std::uint64_t seed)
      : vocab_(std::move(vocab)), cfg_(cfg) {
    cfg_.validate();
    RngStream rng(derive_seed(seed, "tiny-lm-init"));
    const int C = cfg_.embed_dim;
    const S w = S(1) / S(std::sqrt(static_cast<double>(C)));
    auto init = [&](Eigen::Index r, Eigen::Index c) {
      Mat<S> m(r, c);
      for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j)
          m(i, j) = static_cast<S>(rng.normal(0.0, static_cast<double>(w)));
      return m;
    };
    wte_ = init(vocab_.size(), C);
    wpe_ = init(cfg_.context_len, C);
    unembed_ = init(C, vocab_.size());
    layers_.resize(cfg_.layers);
    for (auto& l : layers_) {
      l.wq = init(C, C);
      l.wk = init(C, C);
      l.wv = init(C, C);
      l.wo = init(C, C);
      l.w1 = init(C, 4 * C);
      l.w2 = init(4 * C, C);
      if (cfg_.finetune_mode == FinetuneMode::kLowRankAdapters) {
        const int r = cfg_.adapter_rank;
        // bq/bv start at zero so the adapted model equals the base model.
        l.aq = init(C, r);
        l.bq = Mat<S>::Zero(r, C);
        l.av = init(C, r);
        l.bv = Mat<S>::Zero(r, C);
      }
    }
  }

  const Vocab& vocab() const { return vocab_; }
  const LMConfig& config() const { return cfg_; }

  // ------------------------------------------------------------- parameters

  // Every parameter in a fixed order (serialization, hashing).
  std::vector<const Mat<S>*> all_params() const {
    std::vector<const Mat<S>*> out{&wte_, &wpe_, &unembed_};
    for (const auto& l : layers_) {
      out.insert(out.end(), {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2});
      if (cfg_.finetune_mode == FinetuneMode::kLowRankAdapters)
        out.insert(out.end(), {&l.aq, &l.bq, &l.av, &l.bv});
    }
    return out;
  }

  // The subset the optimizer may touch, in the same order bind() exposes its
  // leaves. Full mode trains everything; adapter mode trains adapters only.
  std::vector<Mat<S>*> trainable_params() {
    std::vector<Mat<S>*> out;
    if (cfg_.finetune_mode == FinetuneMode::kFull) {
      out = {&wte_, &wpe_, &unembed_};
      for (auto& l : layers_)
        out.insert(out.end(), {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2});
    } else {
      for (auto& l : layers_) out.insert(out.end(), {&l.aq, &l.bq, &l.av, &l.bv});
    }
    return out;
  }

  std::uint64_t weights_hash() const { return params_hash<S>(all_params()); }

  // Parameters bound onto one tape. `leaves` lines up with trainable_params()
  // when trainable, and stays empty otherwise (everything bound as constants,
  // which is what makes the clean branch gradient-free).
  struct Bound {
    struct Layer {
      Var<S> wq, wk, wv, wo, w1, w2;
      Var<S> aq, bq, av, bv;
      bool adapters = false;
    };
    Var<S> wte, wpe, unembed;
    std::vector<Layer> layers;
    std::vector<Var<S>> leaves;
  };

  Bound bind(Graph<S>& g, bool trainable) const {
    const bool adapters = cfg_.finetune_mode == FinetuneMode::kLowRankAdapters;
    Bound b;
    auto base = [&](const Mat<S>& m) {
      // In adapter mode the base weights are frozen even during training.
      if (trainable && !adapters) {
        Var<S> v = g.leaf(m, true);
        b.leaves.push_back(v);
        return v;
      }
      return g.constant(m);
    };
    auto adapter = [&](const Mat<S>& m) {
      if (trainable) {
        Var<S> v = g.leaf(m, true);
        b.leaves.push_back(v);
        return v;
      }
      return g.constant(m);
    };
    b.wte = base(wte_);
    b.wpe = base(wpe_);
    b.unembed = base(unembed_);
    for (const auto& l : layers_) {
      typename Bound::Layer bl;
      bl.wq = base(l.wq);
      bl.wk = base(l.wk);
      bl.wv = base(l.wv);
      bl.wo = base(l.wo);
      bl.w1 = base(l.w1);
      bl.w2 = base(l.w2);
      if (adapters) {
        bl.aq = adapter(l.aq);
        bl.bq = adapter(l.bq);
        bl.av = adapter(l.av);
        bl.bv = adapter(l.bv);
        bl.adapters = true;
      }
      b.layers.push_back(bl);
    }
    return b;
  }

  // ------------------------------------------------------------ tokenization

  struct EncodedSample {
    std::shared_ptr<std::vector<int>> ids;        // <bos> ... <eos>, length T
    std::shared_ptr<std::vector<int>> labels;     // labels[t] = ids[t+1]
    std::shared_ptr<std::vector<std::uint8_t>> target_mask;  // loss positions
    int prompt_len = 0;  // tokens up to and including <tgt>
    int target_tokens = 0;  // masked positions = |target| + 1 for <eos>
  };

  std::vector<int> format_prompt(const std::string& instruction,
                                 const std::string& input) const {
    std::vector<int> ids{vocab_.bos_id()};
    for (int t : vocab_.encode(instruction)) ids.push_back(t);
    ids.push_back(vocab_.inp_id());
    for (int t : vocab_.encode(input)) ids.push_back(t);
    ids.push_back(vocab_.tgt_id());
    return ids;
  }

  EncodedSample encode_sample(const InstructionSample& s) const {
    std::vector<int> instr = vocab_.encode(s.instruction);
    std::vector<int> input = vocab_.encode(s.input);
    std::vector<int> target = vocab_.encode(s.target);
    if (target.empty()) throw InvalidInput("encode_sample: empty target");

    // Head truncation: over-length samples lose their oldest input tokens
    // first (then instruction tokens) until the sequence fits the context.
    const std::size_t overhead = 4;  // <bos> <inp> <tgt> <eos>
    const std::size_t budget = static_cast<std::size_t>(cfg_.context_len);
    std::size_t total = overhead + instr.size() + input.size() + target.size();
    if (total > budget) {
      std::cerr << "warning: sample exceeds context (" << total << " > "
                << budget << " tokens), head-truncating input\n";
      const std::size_t excess = total - budget;
      const std::size_t from_input = std::min(excess, input.size());
      input.erase(input.begin(), input.begin() + static_cast<long>(from_input));
      const std::size_t from_instr = std::min(excess - from_input, instr.size());
      instr.erase(instr.begin(), instr.begin() + static_cast<long>(from_instr));
      if (overhead + instr.size() + input.size() + target.size() > budget)
        throw InvalidInput("encode_sample: target alone exceeds context");
    }

    EncodedSample e;
    e.ids = std::make_shared<std::vector<int>>();
    e.ids->push_back(vocab_.bos_id());
    e.ids->insert(e.ids->end(), instr.begin(), instr.end());
    e.ids->push_back(vocab_.inp_id());
    e.ids->insert(e.ids->end(), input.begin(), input.end());
    e.ids->push_back(vocab_.tgt_id());
    e.prompt_len = static_cast<int>(e.ids->size());
    e.ids->insert(e.ids->end(), target.begin(), target.end());
    e.ids->push_back(vocab_.eos_id());

    const int T = static_cast<int>(e.ids->size());
    e.labels = std::make_shared<std::vector<int>>(T, vocab_.pad_id());
    e.target_mask = std::make_shared<std::vector<std::uint8_t>>(T, 0);
    for (int t = 0; t + 1 < T; ++t) {
      (*e.labels)[t] = (*e.ids)[t + 1];
      // Position prompt_len-1 holds <tgt> and emits the first target token.
      if (t >= e.prompt_len - 1) (*e.target_mask)[t] = 1;
    }
    e.target_tokens = static_cast<int>(target.size()) + 1;
    return e;
  }

  // ---------------------------------------------------------------- forward

  // x is T x C token embeddings WITHOUT positions; they are added here so
  // that callers perturb raw token embeddings only. Returns the normalized
  // T x C hidden states (the representation consumers pool from).
  Var<S> hidden_from_embeddings(Graph<S>& g, const Bound& b, Var<S> x) const {
    if (x.g != &g)
      throw InvalidInput("forward: embeddings live on a different tape");
    const int T = static_cast<int>(x.rows());
    if (T < 1 || T > cfg_.context_len)
      throw InvalidInput("forward: sequence length outside [1, context_len]");
    if (x.cols() != cfg_.embed_dim)
      throw InvalidInput("forward: embedding width != embed_dim");

    x = add(x, slice_rows(b.wpe, 0, T));
    const int H = cfg_.heads;
    const int dh = cfg_.embed_dim / H;
    const S inv_sqrt_dh = S(1) / S(std::sqrt(static_cast<double>(dh)));

    for (const auto& l : b.layers) {
      Var<S> xn = rmsnorm_rows(x);
      Var<S> wq = l.adapters ? add(l.wq, matmul(l.aq, l.bq)) : l.wq;
      Var<S> wv = l.adapters ? add(l.wv, matmul(l.av, l.bv)) : l.wv;
      Var<S> q = matmul(xn, wq);
      Var<S> k = matmul(xn, l.wk);
      Var<S> v = matmul(xn, wv);
      std::vector<Var<S>> heads;
      for (int h = 0; h < H; ++h) {
        Var<S> qh = slice_cols(q, h * dh, dh);
        Var<S> kh = slice_cols(k, h * dh, dh);
        Var<S> vh = slice_cols(v, h * dh, dh);
        Var<S> att = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_dh),
                                  /*causal=*/true);
        heads.push_back(matmul(att, vh));
      }
      x = add(x, matmul(concat_cols(heads), l.wo));
      Var<S> yn = rmsnorm_rows(x);
      x = add(x, matmul(gelu(matmul(yn, l.w1)), l.w2));
    }
    return rmsnorm_rows(x);
  }

  Var<S> forward_from_embeddings(Graph<S>& g, const Bound& b, Var<S> x) const {
    return matmul(hidden_from_embeddings(g, b, x), b.unembed);
  }

  Var<S> embed_tokens(Graph<S>& g, const Bound& b,
                      std::shared_ptr<const std::vector<int>> ids) const {
    (void)g;
    return gather_rows(b.wte, std::move(ids));
  }

  // ------------------------------------------------------------------ losses

  // Mean cross-entropy over target-token predictions across the batch.
  Var<S> loss_vanilla(Graph<S>& g, const Bound& b,
                      std::span<const InstructionSample> batch) const {
    return ce_loss_(g, b, batch, nullptr);
  }

  // Same cross-entropy, computed on embeddings perturbed before positions are
  // added. alpha == 0 builds the identical tape as loss_vanilla.
  Var<S> loss_neftune(Graph<S>& g, const Bound& b,
                      std::span<const InstructionSample> batch,
                      const NoiseSpec& nspec) const {
    return ce_loss_(g, b, batch, &nspec);
  }

  // Noisy-branch cross-entropy plus lambda times the sentence-space distance
  // between the noisy branch's answer and a clean reference branch's answer.
  // The reference (defaults to this model: same parameters, stopped gradient)
  // is bound as constants, so the distance gradient reaches the noisy branch
  // only. lambda == 0 returns the noise loss untouched.
  Var<S> loss_ceftune(Graph<S>& g, const Bound& b,
                      std::span<const InstructionSample> batch,
                      const NoiseSpec& nspec, const ConsistencySpec& cspec,
                      const SentenceEncoder& enc,
                      const TinyLM* reference = nullptr) const {
    if (!(cspec.lambda >= 0.0) || !std::isfinite(cspec.lambda))
      throw ConfigError("loss_ceftune: lambda must be finite and >= 0");
    Var<S> noisy_ce = loss_neftune(g, b, batch, nspec);
    if (cspec.lambda == 0.0) return noisy_ce;
    if (enc.vocab().tokens() != vocab_.tokens())
      throw ConfigError("loss_ceftune: sentence encoder vocabulary mismatch");

    const TinyLM& ref = reference ? *reference : *this;
    if (reference && reference->vocab().tokens() != vocab_.tokens())
      throw ConfigError("loss_ceftune: reference vocabulary mismatch");
    Bound ref_b = ref.bind(g, /*trainable=*/false);

    Var<S> r_sum = g.scalar(S(0));
    double r_hard_sum = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const EncodedSample e = encode_sample(batch[i]);
      if (cspec.relaxation == Relaxation::kSoft) {
        Var<S> s_noisy = soft_answer_(g, b, e, &nspec, i, enc);
        Var<S> s_clean = soft_answer_(g, ref_b, e, nullptr, i, enc);
        r_sum = add(r_sum, distance_on_tape(s_noisy, s_clean, cspec.norm));
      } else {
        r_hard_sum += hard_answer_distance_(ref, e, nspec, i, cspec.norm, enc);
      }
    }
    const S inv_b = S(1) / S(static_cast<double>(batch.size()));
    if (cspec.relaxation == Relaxation::kSoft)
      return add(noisy_ce, scale(r_sum, S(cspec.lambda) * inv_b));
    // Hard mode: the decoded-string distance is reported in the loss value
    // but deliberately carries no gradient.
    return add(noisy_ce,
               g.scalar(S(cspec.lambda) * inv_b * S(r_hard_sum)));
  }

  // -------------------------------------------------------------- generation

  // Greedy continuation of a prompt; stops at <eos>, the token budget, or the
  // context boundary, whichever comes first. Returns only the new tokens.
  std::vector<int> generate_ids(const std::vector<int>& prompt,
                                int max_new_tokens) const {
    if (prompt.empty()) throw InvalidInput("generate: empty prompt");
    if (static_cast<int>(prompt.size()) > cfg_.context_len)
      throw InvalidInput("generate: prompt exceeds context");
    std::vector<int> ids = prompt;
    std::vector<int> out;
    for (int n = 0; n < max_new_tokens &&
                    static_cast<int>(ids.size()) < cfg_.context_len; ++n) {
      const int next = next_token_(ids, nullptr, 0);
      out.push_back(next);
      ids.push_back(next);
      if (next == vocab_.eos_id()) break;
    }
    return out;
  }

  std::string generate(const std::string& instruction, const std::string& input,
                       int max_new_tokens) const {
    const std::vector<int> completion =
        generate_ids(format_prompt(instruction, input), max_new_tokens);
    return vocab_.decode(completion);
  }

  // ------------------------------------------------------------ persistence

  Json to_json(const std::string& rng_state = "") const {
    Json params = Json::object();
    const auto names = param_names_();
    const auto ptrs = all_params();
    for (std::size_t i = 0; i < ptrs.size(); ++i)
      params[names[i]] = mat_to_json(*ptrs[i]);
    return Json{{"kind", "tiny-lm"},
                {"format_version", 1},
                {"config", cfg_.to_json()},
                {"vocab", vocab_.tokens()},
                {"params", std::move(params)},
                {"params_hash", to_hex(weights_hash())},
                {"rng_state", rng_state}};
  }

  static TinyLM from_json(const Json& j) {
    if (j.value("kind", "") != "tiny-lm")
      throw ValidationError("tiny-lm checkpoint: wrong container kind");
    TinyLM m(Vocab::from_token_list(j.at("vocab").get<std::vector<std::string>>()),
             LMConfig::from_json(j.at("config")), /*seed=*/0);
    const auto names = m.param_names_();
    const Json& params = j.at("params");
    std::vector<Mat<S>*> ptrs = m.all_params_mut_();
    for (std::size_t i = 0; i < ptrs.size(); ++i) {
      if (!params.contains(names[i]))
        throw ValidationError("tiny-lm checkpoint: missing parameter " + names[i]);
      Mat<S> loaded = mat_from_json<S>(params.at(names[i]));
      if (loaded.rows() != ptrs[i]->rows() || loaded.cols() != ptrs[i]->cols())
        throw ValidationError("tiny-lm checkpoint: shape mismatch for " + names[i]);
      *ptrs[i] = std::move(loaded);
    }
    if (j.contains("params_hash") &&
        j.at("params_hash").get<std::string>() != to_hex(m.weights_hash()))
      throw ValidationError("tiny-lm checkpoint: parameter hash mismatch");
    return m;
  }

 private:
  std::vector<Mat<S>*> all_params_mut_() {
    std::vector<Mat<S>*> out{&wte_, &wpe_, &unembed_};
    for (auto& l : layers_) {
      out.insert(out.end(), {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2});
      if (cfg_.finetune_mode == FinetuneMode::kLowRankAdapters)
        out.insert(out.end(), {&l.aq, &l.bq, &l.av, &l.bv});
    }
    return out;
  }

  std::vector<std::string> param_names_() const {
    std::vector<std::string> names{"wte", "wpe", "unembed"};
    for (int i = 0; i < cfg_.layers; ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      for (const char* n : {"wq", "wk", "wv", "wo", "w1", "w2"})
        names.push_back(p + n);
      if (cfg_.finetune_mode == FinetuneMode::kLowRankAdapters)
        for (const char* n : {"aq", "bq", "av", "bv"}) names.push_back(p + n);
    }
    return names;
  }

  // Shared CE body; nspec == nullptr means no perturbation at all.
  Var<S> ce_loss_(Graph<S>& g, const Bound& b,
                  std::span<const InstructionSample> batch,
                  const NoiseSpec* nspec) const {
    if (batch.empty()) throw InvalidInput("loss: empty batch");
    Var<S> total = g.scalar(S(0));
    long count = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const EncodedSample e = encode_sample(batch[i]);
      Var<S> logits = answer_logits_(g, b, e, nspec, i);
      total = add(total, masked_ce_sum(logits, e.labels, e.target_mask));
      count += e.target_tokens;
    }
    return scale(total, S(1) / S(static_cast<double>(count)));
  }

  // Token embeddings (optionally perturbed) pushed through the model.
  Var<S> answer_logits_(Graph<S>& g, const Bound& b, const EncodedSample& e,
                        const NoiseSpec* nspec, std::size_t element_index) const {
    Var<S> x = embed_tokens(g, b, e.ids);
    if (nspec && nspec->alpha != 0.0) {
      const std::vector<std::uint8_t> no_pad(e.ids->size(), 0);
      Mat<S> noise = sample_noise_rows<S>(
          *nspec, static_cast<std::uint64_t>(element_index), no_pad,
          cfg_.embed_dim);
      x = add(x, g.constant(std::move(noise)));
    }
    return forward_from_embeddings(g, b, x);
  }

  // The differentiable "sentence" of one branch: per-position distributions
  // over the answer region, pushed through the sentence encoder's table as
  // expected embeddings and pooled.
  Var<S> soft_answer_(Graph<S>& g, const Bound& b, const EncodedSample& e,
                      const NoiseSpec* nspec, std::size_t element_index,
                      const SentenceEncoder& enc) const {
    Var<S> logits = answer_logits_(g, b, e, nspec, element_index);
    auto rows = std::make_shared<std::vector<int>>();
    for (std::size_t t = 0; t < e.target_mask->size(); ++t)
      if ((*e.target_mask)[t]) rows->push_back(static_cast<int>(t));
    Var<S> probs = gather_rows(softmax_rows(logits), rows);
    Var<S> expected =
        matmul(probs, g.constant(enc.token_table().template cast<S>()));
    return encode_rows_on_tape(g, expected, enc);
  }

  // Hard relaxation: greedy-decode both branches (prompt embeddings noised on
  // the noisy branch) and measure the plain sentence distance between texts.
  double hard_answer_distance_(const TinyLM& ref, const EncodedSample& e,
                               const NoiseSpec& nspec, std::size_t element_index,
                               DistanceNorm norm, const SentenceEncoder& enc) const {
    const std::vector<int> prompt(e.ids->begin(), e.ids->begin() + e.prompt_len);
    const int budget = e.target_tokens + 4;
    const std::vector<std::uint8_t> no_pad(prompt.size(), 0);
    const Mat<S> noise = sample_noise_rows<S>(
        nspec, static_cast<std::uint64_t>(element_index), no_pad, cfg_.embed_dim);

    std::vector<int> noisy_ids = prompt, clean_ids = prompt;
    std::vector<int> noisy_out, clean_out;
    for (int n = 0; n < budget; ++n) {
      if (static_cast<int>(noisy_ids.size()) >= cfg_.context_len) break;
      const int next = next_token_(noisy_ids, &noise, e.prompt_len);
      noisy_out.push_back(next);
      noisy_ids.push_back(next);
      if (next == vocab_.eos_id()) break;
    }
    for (int n = 0; n < budget; ++n) {
      if (static_cast<int>(clean_ids.size()) >= ref.cfg_.context_len) break;
      const int next = ref.next_token_(clean_ids, nullptr, 0);
      clean_out.push_back(next);
      clean_ids.push_back(next);
      if (next == ref.vocab_.eos_id()) break;
    }
    const Eigen::RowVectorXd a = enc.encode(vocab_.decode(noisy_out)).v;
    const Eigen::RowVectorXd c = enc.encode(ref.vocab_.decode(clean_out)).v;
    return SentenceEncoder::distance(a, c, norm).value;
  }

  // One greedy step. `prompt_noise`, when given, perturbs the first
  // noise_rows embedding rows (the original prompt); generated tokens embed
  // clean. Ties resolve to the lowest token id.
  int next_token_(const std::vector<int>& ids, const Mat<S>* prompt_noise,
                  int noise_rows) const {
    Graph<S> g;
    Bound b = bind(g, /*trainable=*/false);
    auto ids_ptr = std::make_shared<std::vector<int>>(ids);
    Var<S> x = embed_tokens(g, b, ids_ptr);
    if (prompt_noise) {
      Mat<S> shifted = Mat<S>::Zero(x.rows(), x.cols());
      shifted.topRows(std::min<Eigen::Index>(noise_rows, x.rows())) =
          prompt_noise->topRows(std::min<Eigen::Index>(noise_rows, x.rows()));
      x = add(x, g.constant(std::move(shifted)));
    }
    Var<S> logits = forward_from_embeddings(g, b, x);
    Eigen::Index best = 0;
    logits.val().row(logits.rows() - 1).maxCoeff(&best);
    return static_cast<int>(best);
  }

  Vocab vocab_;
  LMConfig cfg_;
  Mat<S> wte_;      // vocab x embed_dim
  Mat<S> wpe_;      // context_len x embed_dim
  Mat<S> unembed_;  // embed_dim x vocab
  std::vector<LayerParams> layers_;
};

// ------------------------------------------------------------------ training

enum class TrainObjective { kVanilla, kNeftune, kCeftune };

inline std::string to_string(TrainObjective o) {
  switch (o) {
    case TrainObjective::kVanilla: return "vanilla";
    case TrainObjective::kNeftune: return "neftune";
    case TrainObjective::kCeftune: return "ceftune";
  }
  throw InvalidInput("unknown objective");
}

inline TrainObjective objective_from_string(const std::string& s) {
  if (s == "vanilla") return TrainObjective::kVanilla;
  if (s == "neftune") return TrainObjective::kNeftune;
  if (s == "ceftune") return TrainObjective::kCeftune;
  throw ValidationError("unknown objective '" + s + "'");
}

// One training sample tagged with its case of origin, so splits can be
// checked for leakage between train and validation.
struct ExpertSample {
  std::string case_id;
  InstructionSample sample;
};

struct TrainLMConfig {
  TrainObjective objective = TrainObjective::kCeftune;
  NoiseSpec noise;                // seed field is overridden per step
  ConsistencySpec consistency;
  int epochs = 30;
  int batch_size = 4;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;

  Json to_json() const {
    return Json{{"objective", to_string(objective)},
                {"noise", noise.to_json()},
                {"consistency", consistency.to_json()},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"lr", lr},
                {"weight_decay", weight_decay},
                {"seed", seed}};
  }
  static TrainLMConfig from_json(const Json& j) {
    TrainLMConfig c;
    c.objective = objective_from_string(j.at("objective").get<std::string>());
    c.noise = NoiseSpec::from_json(j.at("noise"));
    c.consistency = ConsistencySpec::from_json(j.at("consistency"));
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.lr = j.at("lr").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  }
};

struct TrainCurve {
  std::vector<double> train_loss;  // mean batch loss per epoch
  std::vector<double> val_loss;    // clean cross-entropy per epoch

  Json to_json() const {
    return Json{{"train_loss", train_loss}, {"val_loss", val_loss}};
  }
};

// Fits a model on the train split. Validation loss is always the clean
// cross-entropy, whatever the training objective, so curves are comparable.
// Train/val must not share a case id.
template <typename S>
TrainCurve train_lm(TinyLM<S>& model, std::span<const ExpertSample> train,
                    std::span<const ExpertSample> val, const TrainLMConfig& cfg,
                    const SentenceEncoder* enc = nullptr) {
  if (train.empty()) throw InvalidInput("train_lm: empty training split");
  if (cfg.objective == TrainObjective::kCeftune && !enc)
    throw ConfigError("train_lm: consistency objective needs a sentence encoder");
  {
    std::set<std::string> train_ids;
    for (const auto& s : train) train_ids.insert(s.case_id);
    for (const auto& s : val)
      if (train_ids.count(s.case_id))
        throw ValidationError("train_lm: case '" + s.case_id +
                              "' appears in both train and validation");
  }

  AdamWConfig<S> ocfg;
  ocfg.lr = static_cast<S>(cfg.lr);
  ocfg.weight_decay = static_cast<S>(cfg.weight_decay);
  AdamW<S> opt(ocfg);
  RngStream rng(derive_seed(cfg.seed, "train-lm"));

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainCurve curve;
  std::uint64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<InstructionSample> batch;
      for (std::size_t k = start; k < end; ++k)
        batch.push_back(train[order[k]].sample);

      NoiseSpec step_noise = cfg.noise;
      step_noise.seed = derive_seed(cfg.seed, "noise-step", step);
      ++step;

      Graph<S> g;
      typename TinyLM<S>::Bound b = model.bind(g, /*trainable=*/true);
      Var<S> loss = g.scalar(S(0));
      switch (cfg.objective) {
        case TrainObjective::kVanilla:
          loss = model.loss_vanilla(g, b, batch);
          break;
        case TrainObjective::kNeftune:
          loss = model.loss_neftune(g, b, batch, step_noise);
          break;
        case TrainObjective::kCeftune:
          loss = model.loss_ceftune(g, b, batch, step_noise, cfg.consistency, *enc);
          break;
      }
      g.backward(loss);
      std::vector<Mat<S>> grads;
      for (const Var<S>& leaf : b.leaves) grads.push_back(g.grad(leaf));
      opt.step(model.trainable_params(), grads);
      epoch_loss += static_cast<double>(loss.item());
      ++batches;
    }
    curve.train_loss.push_back(epoch_loss / std::max(batches, 1));

    if (!val.empty()) {
      Graph<S> g;
      typename TinyLM<S>::Bound b = model.bind(g, /*trainable=*/false);
      std::vector<InstructionSample> vbatch;
      for (const auto& s : val) vbatch.push_back(s.sample);
      curve.val_loss.push_back(
          static_cast<double>(model.loss_vanilla(g, b, vbatch).item()));
    }
  }
  return curve;
}

}  // namespace rtflow
