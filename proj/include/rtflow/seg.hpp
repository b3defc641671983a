#pragma once

// Text-conditioned volumetric segmentation. A 3D residual U-Net consumes a
// normalized volume (plus absolute-coordinate channels, so crops know where
// they came from); a frozen language model turns the free-text plan into one
// conditioning token via learnable prompt vectors; at each skip level the
// image and text streams exchange information through self- and
// cross-attention, with the image-from-text pass last so the image stream is
// the final conditioned one.
//
// Feature maps are stored channels x voxels with the voxel axis ordered
// (h, w, s), s fastest — the same linearization Dims3 uses. Convolutions are
// gather_patches + GEMM: weights are C_out x (27 * C_in), tap-major.
//
// Gradients only ever reach the U-Net, alignment blocks, and prompt vectors.
// The language model is bound to the tape as constants, and the consistency
// regularizer's clean branch additionally uses a constant (stop-gradient)
// copy of the prompts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
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
#include "rtflow/lm.hpp"
#include "rtflow/noise.hpp"
#include "rtflow/ops.hpp"
#include "rtflow/rng.hpp"
#include "rtflow/volume.hpp"

namespace rtflow {

// ------------------------------------------------------------- index maps

inline Dims3 strided_dims(Dims3 in, int stride) {
  return Dims3{(in.h + stride - 1) / stride, (in.w + stride - 1) / stride,
               (in.s + stride - 1) / stride};
}

// 3x3x3 neighbourhood taps at the given stride, zero-padded at borders.
// Tap k enumerates offsets (dh, dw, ds) in {-1,0,1}^3 with ds fastest.
inline std::shared_ptr<const PatchIndexMap> make_conv3_index(Dims3 in, int stride) {
  if (in.h <= 0 || in.w <= 0 || in.s <= 0 || stride <= 0)
    throw InvalidInput("make_conv3_index: dims and stride must be positive");
  const Dims3 out = strided_dims(in, stride);
  auto map = std::make_shared<PatchIndexMap>();
  map->k_taps = 27;
  map->n_in = in.count();
  map->n_out = out.count();
  map->idx.resize(27, map->n_out);
  long j = 0;
  for (int oh = 0; oh < out.h; ++oh)
    for (int ow = 0; ow < out.w; ++ow)
      for (int os = 0; os < out.s; ++os, ++j) {
        int k = 0;
        for (int dh = -1; dh <= 1; ++dh)
          for (int dw = -1; dw <= 1; ++dw)
            for (int ds = -1; ds <= 1; ++ds, ++k) {
              const int h = oh * stride + dh;
              const int w = ow * stride + dw;
              const int s = os * stride + ds;
              const bool inside = h >= 0 && h < in.h && w >= 0 && w < in.w &&
                                  s >= 0 && s < in.s;
              map->idx(k, j) =
                  inside ? static_cast<int>(linear_index(in, h, w, s)) : -1;
            }
      }
  return map;
}

// Nearest-neighbour 2x upsampling as a single-tap gather from the coarse grid.
inline std::shared_ptr<const PatchIndexMap> make_upsample2_index(Dims3 coarse) {
  const Dims3 fine{coarse.h * 2, coarse.w * 2, coarse.s * 2};
  auto map = std::make_shared<PatchIndexMap>();
  map->k_taps = 1;
  map->n_in = coarse.count();
  map->n_out = fine.count();
  map->idx.resize(1, map->n_out);
  long j = 0;
  for (int h = 0; h < fine.h; ++h)
    for (int w = 0; w < fine.w; ++w)
      for (int s = 0; s < fine.s; ++s, ++j)
        map->idx(0, j) =
            static_cast<int>(linear_index(coarse, h / 2, w / 2, s / 2));
  return map;
}

// Index maps depend only on geometry, so cache them per shape.
inline std::shared_ptr<const PatchIndexMap> conv3_index_cached(Dims3 in, int stride) {
  static std::map<std::array<int, 4>, std::shared_ptr<const PatchIndexMap>> cache;
  const std::array<int, 4> key{in.h, in.w, in.s, stride};
  auto it = cache.find(key);
  if (it == cache.end())
    it = cache.emplace(key, make_conv3_index(in, stride)).first;
  return it->second;
}

inline std::shared_ptr<const PatchIndexMap> upsample2_index_cached(Dims3 coarse) {
  static std::map<std::array<int, 3>, std::shared_ptr<const PatchIndexMap>> cache;
  const std::array<int, 3> key{coarse.h, coarse.w, coarse.s};
  auto it = cache.find(key);
  if (it == cache.end())
    it = cache.emplace(key, make_upsample2_index(coarse)).first;
  return it->second;
}

// ------------------------------------------------------------- coordinates

// Where a patch sits inside the full volume; `full` are the dims coordinates
// normalize against, so crops carry absolute position into the network.
struct CoordFrame {
  Dims3 origin{0, 0, 0};
  Dims3 full{0, 0, 0};
};

template <typename S>
Mat<S> coord_rows(Dims3 dims, const CoordFrame& frame) {
  if (frame.full.h <= 0 || frame.full.w <= 0 || frame.full.s <= 0)
    throw InvalidInput("coord_rows: frame dims must be positive");
  Mat<S> out(3, dims.count());
  long j = 0;
  auto norm = [](int a, int full) {
    return 2.0 * ((a + 0.5) / static_cast<double>(full)) - 1.0;
  };
  for (int h = 0; h < dims.h; ++h)
    for (int w = 0; w < dims.w; ++w)
      for (int s = 0; s < dims.s; ++s, ++j) {
        out(0, j) = static_cast<S>(norm(frame.origin.h + h, frame.full.h));
        out(1, j) = static_cast<S>(norm(frame.origin.w + w, frame.full.w));
        out(2, j) = static_cast<S>(norm(frame.origin.s + s, frame.full.s));
      }
  return out;
}

// ------------------------------------------------------------------ config

enum class PoolMode { kLastToken, kMeanTokens };

inline std::string to_string(PoolMode p) {
  return p == PoolMode::kLastToken ? "last_token" : "mean_tokens";
}
inline PoolMode pool_mode_from_string(const std::string& s) {
  if (s == "last_token") return PoolMode::kLastToken;
  if (s == "mean_tokens") return PoolMode::kMeanTokens;
  throw ValidationError("unknown pool mode '" + s + "'");
}

struct SegConfig {
  int levels = 3;
  int base_channels = 8;
  int text_dim = 64;   // must equal the conditioning LM's embedding width
  int n_prompts = 8;
  bool use_text = true;
  bool use_dice = true;        // CE + soft-Dice; false = plain CE
  bool coord_channels = true;  // absolute-position input channels
  std::vector<int> align_levels;  // skip levels with alignment; empty = all
  PoolMode pool = PoolMode::kLastToken;

  void validate() const {
    if (levels < 2) throw ConfigError("SegConfig: need at least two levels");
    if (base_channels <= 0 || text_dim <= 0 || n_prompts <= 0)
      throw ConfigError("SegConfig: sizes must be positive");
    for (int l : align_levels)
      if (l < 0 || l >= levels - 1)
        throw ConfigError("SegConfig: align level outside skip range");
  }

  int channels_at(int level) const { return base_channels << level; }
  int in_channels() const { return 1 + (coord_channels ? 3 : 0); }
  int pool_factor() const { return 1 << (levels - 1); }
  bool align_at(int level) const {
    if (!use_text) return false;
    if (align_levels.empty()) return true;
    return std::find(align_levels.begin(), align_levels.end(), level) !=
           align_levels.end();
  }

  Json to_json() const {
    return Json{{"levels", levels},
                {"base_channels", base_channels},
                {"text_dim", text_dim},
                {"n_prompts", n_prompts},
                {"use_text", use_text},
                {"use_dice", use_dice},
                {"coord_channels", coord_channels},
                {"align_levels", align_levels},
                {"pool", to_string(pool)}};
  }
  static SegConfig from_json(const Json& j) {
    SegConfig c;
    c.levels = j.at("levels").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.text_dim = j.at("text_dim").get<int>();
    c.n_prompts = j.at("n_prompts").get<int>();
    c.use_text = j.at("use_text").get<bool>();
    c.use_dice = j.at("use_dice").get<bool>();
    c.coord_channels = j.at("coord_channels").get<bool>();
    c.align_levels = j.at("align_levels").get<std::vector<int>>();
    c.pool = pool_mode_from_string(j.at("pool").get<std::string>());
    c.validate();
    return c;
  }
};

// --------------------------------------------------------------- prompts

// The learnable prompt vectors prepended to plan embeddings. The shadow
// (stop-gradient) view is realized by binding the current values as tape
// constants, so it equals the prompts at read time by construction.
template <typename S>
struct PromptBank {
  Mat<S> prompts;  // n_prompts x text_dim

  PromptBank() = default;
  PromptBank(int n, int dim, std::uint64_t seed) {
    RngStream rng(derive_seed(seed, "prompt-bank"));
    prompts.resize(n, dim);
    const double w = 1.0 / std::sqrt(static_cast<double>(dim));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < dim; ++j)
        prompts(i, j) = static_cast<S>(rng.normal(0.0, w));
  }
};

// ------------------------------------------------------------- plan encoder

// Prompts + (optionally noise-perturbed) plan token embeddings through the
// frozen LM; the answer is one pooled hidden-state row (1 x embed_dim).
// Bind the LM with trainable=false: gradients then reach the prompts only.
template <typename S>
Var<S> encode_plan(Graph<S>& g, const TinyLM<S>& lm,
                   const typename TinyLM<S>::Bound& lm_b, Var<S> prompts,
                   std::shared_ptr<const std::vector<int>> plan_ids,
                   const NoiseSpec* nspec, std::uint64_t element_index,
                   PoolMode pool) {
  if (prompts.cols() != lm.config().embed_dim)
    throw ConfigError("encode_plan: prompt width != LM embedding width");
  if (!plan_ids || plan_ids->empty())
    throw InvalidInput("encode_plan: empty plan token sequence");
  Var<S> emb = gather_rows(lm_b.wte, plan_ids);
  if (nspec && nspec->alpha != 0.0) {
    const std::vector<std::uint8_t> no_pad(plan_ids->size(), 0);
    Mat<S> noise = sample_noise_rows<S>(*nspec, element_index, no_pad,
                                        lm.config().embed_dim);
    emb = add(emb, g.constant(std::move(noise)));
  }
  Var<S> x = concat_rows<S>({prompts, emb});
  Var<S> h = lm.hidden_from_embeddings(g, lm_b, x);
  if (pool == PoolMode::kMeanTokens) return colwise_mean(h);
  return slice_rows(h, static_cast<int>(h.rows()) - 1, 1);
}

// ------------------------------------------------------------------- model

template <typename S>
class SegModel {
 public:
  struct ConvUnit {
    Mat<S> w, gamma, beta;  // weights + instance-norm affine
  };
  struct ResBlockP {
    ConvUnit c1, c2;
    Mat<S> skip;  // 1x1 projection when channel count changes, else 0x0
  };
  struct AlignP {
    Mat<S> t_in;                // text_dim -> level channels
    Mat<S> sq, sk, sv, so;      // text self-attention
    Mat<S> tq, ik, iv, to;      // text attends image
    Mat<S> iq, tk, tv, io;      // image attends text (last)
  };

  SegModel() = default;
  SegModel(SegConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    // Separate streams per parameter group: models that share a seed share
    // the U-Net weights whether or not the text pathway exists.
    RngStream unet_rng(derive_seed(seed, "seg-unet"));
    RngStream align_rng(derive_seed(seed, "seg-align"));
    auto init = [](RngStream& rng, Eigen::Index r, Eigen::Index c) {
      Mat<S> m(r, c);
      const double w = 1.0 / std::sqrt(static_cast<double>(c));
      for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j)
          m(i, j) = static_cast<S>(rng.normal(0.0, w));
      return m;
    };
    auto conv_unit = [&](int c_out, int c_in, int taps) {
      ConvUnit u;
      u.w = init(unet_rng, c_out, static_cast<Eigen::Index>(taps) * c_in);
      u.gamma = Mat<S>::Ones(c_out, 1);
      u.beta = Mat<S>::Zero(c_out, 1);
      return u;
    };
    auto res_block = [&](int c_out, int c_in) {
      ResBlockP r;
      r.c1 = conv_unit(c_out, c_in, 27);
      r.c2 = conv_unit(c_out, c_out, 27);
      if (c_in != c_out) r.skip = init(unet_rng, c_out, c_in);
      return r;
    };

    stem_ = conv_unit(cfg_.base_channels, cfg_.in_channels(), 27);
    for (int l = 0; l < cfg_.levels; ++l)
      enc_.push_back(res_block(cfg_.channels_at(l), cfg_.channels_at(l)));
    for (int l = 0; l + 1 < cfg_.levels; ++l)
      down_.push_back(conv_unit(cfg_.channels_at(l + 1), cfg_.channels_at(l), 27));
    for (int l = 0; l + 1 < cfg_.levels; ++l) {
      up_.push_back(conv_unit(cfg_.channels_at(l), cfg_.channels_at(l + 1), 27));
      dec_.push_back(res_block(cfg_.channels_at(l), 2 * cfg_.channels_at(l)));
    }
    head_w_ = init(unet_rng, 1, cfg_.base_channels);
    head_b_ = Mat<S>::Zero(1, 1);

    if (cfg_.use_text) {
      for (int l = 0; l + 1 < cfg_.levels; ++l) {
        if (!cfg_.align_at(l)) continue;
        const int c = cfg_.channels_at(l);
        AlignP a;
        a.t_in = init(align_rng, cfg_.text_dim, c);
        for (Mat<S>* m : {&a.sq, &a.sk, &a.sv, &a.so, &a.tq, &a.ik, &a.iv,
                          &a.to, &a.iq, &a.tk, &a.tv, &a.io})
          *m = init(align_rng, c, c);
        align_[l] = std::move(a);
      }
    }
  }

  const SegConfig& config() const { return cfg_; }

  // ------------------------------------------------------------ parameters

  template <typename Self, typename Fn>
  static void visit_params(Self& self, Fn&& fn) {
    auto unit = [&](const std::string& p, auto& u) {
      fn(p + ".w", u.w);
      fn(p + ".gamma", u.gamma);
      fn(p + ".beta", u.beta);
    };
    auto block = [&](const std::string& p, auto& r) {
      unit(p + ".c1", r.c1);
      unit(p + ".c2", r.c2);
      if (r.skip.size() > 0) fn(p + ".skip", r.skip);
    };
    unit("stem", self.stem_);
    for (std::size_t l = 0; l < self.enc_.size(); ++l)
      block("enc" + std::to_string(l), self.enc_[l]);
    for (std::size_t l = 0; l < self.down_.size(); ++l)
      unit("down" + std::to_string(l), self.down_[l]);
    for (std::size_t l = 0; l < self.up_.size(); ++l) {
      unit("up" + std::to_string(l), self.up_[l]);
      block("dec" + std::to_string(l), self.dec_[l]);
    }
    fn("head.w", self.head_w_);
    fn("head.b", self.head_b_);
    for (auto& [l, a] : self.align_) {
      const std::string p = "align" + std::to_string(l);
      fn(p + ".t_in", a.t_in);
      fn(p + ".sq", a.sq);
      fn(p + ".sk", a.sk);
      fn(p + ".sv", a.sv);
      fn(p + ".so", a.so);
      fn(p + ".tq", a.tq);
      fn(p + ".ik", a.ik);
      fn(p + ".iv", a.iv);
      fn(p + ".to", a.to);
      fn(p + ".iq", a.iq);
      fn(p + ".tk", a.tk);
      fn(p + ".tv", a.tv);
      fn(p + ".io", a.io);
    }
  }

  std::vector<const Mat<S>*> all_params() const {
    std::vector<const Mat<S>*> out;
    visit_params(*this, [&](const std::string&, const Mat<S>& m) {
      out.push_back(&m);
    });
    return out;
  }
  std::vector<Mat<S>*> trainable_params() {
    std::vector<Mat<S>*> out;
    visit_params(*this, [&](const std::string&, Mat<S>& m) { out.push_back(&m); });
    return out;
  }
  std::uint64_t weights_hash() const { return params_hash<S>(all_params()); }

  struct BoundUnit {
    Var<S> w, gamma, beta;
  };
  struct BoundRes {
    BoundUnit c1, c2;
    Var<S> skip;
    bool has_skip = false;
  };
  struct BoundAlign {
    Var<S> t_in, sq, sk, sv, so, tq, ik, iv, to, iq, tk, tv, io;
  };
  struct Bound {
    BoundUnit stem;
    std::vector<BoundRes> enc;
    std::vector<BoundUnit> down;
    std::vector<BoundUnit> up;
    std::vector<BoundRes> dec;
    Var<S> head_w, head_b;
    std::map<int, BoundAlign> align;
    std::vector<Var<S>> leaves;  // same order as trainable_params()
  };

  // Must walk parameters in exactly the visit_params order so that `leaves`
  // lines up with trainable_params(); the finite-difference tests pin this.
  Bound bind(Graph<S>& g, bool trainable) const {
    Bound b;
    auto P = [&](const Mat<S>& m) {
      if (trainable) {
        Var<S> v = g.leaf(m, true);
        b.leaves.push_back(v);
        return v;
      }
      return g.constant(m);
    };
    auto unit = [&](const ConvUnit& u) {
      return BoundUnit{P(u.w), P(u.gamma), P(u.beta)};
    };
    auto block = [&](const ResBlockP& r) {
      BoundRes br;
      br.c1 = unit(r.c1);
      br.c2 = unit(r.c2);
      if (r.skip.size() > 0) {
        br.skip = P(r.skip);
        br.has_skip = true;
      }
      return br;
    };
    b.stem = unit(stem_);
    for (const auto& e : enc_) b.enc.push_back(block(e));
    for (const auto& d : down_) b.down.push_back(unit(d));
    for (std::size_t l = 0; l < up_.size(); ++l) {
      b.up.push_back(unit(up_[l]));
      b.dec.push_back(block(dec_[l]));
    }
    b.head_w = P(head_w_);
    b.head_b = P(head_b_);
    for (const auto& [l, a] : align_) {
      BoundAlign ba{P(a.t_in), P(a.sq), P(a.sk), P(a.sv), P(a.so),
                    P(a.tq),  P(a.ik), P(a.iv), P(a.to),
                    P(a.iq),  P(a.tk), P(a.tv), P(a.io)};
      b.align.emplace(l, ba);
    }
    return b;
  }

  // --------------------------------------------------------------- forward

  // Voxel logits (1 x N) for one volume. `text` is the 1 x text_dim plan
  // embedding; pass nullptr for the pure U-Net path (the alignment blocks
  // are skipped entirely, which is the unimodal ablation).
  Var<S> fuse_and_segment(Graph<S>& g, const Bound& b, const VolumeGrid& vol,
                          const Var<S>* text, const CoordFrame& frame) const {
    if (vol.unit != VoxelUnit::kNormalized)
      throw InvalidInput("fuse_and_segment: volume must be preprocessed to [0,1]");
    const int pf = cfg_.pool_factor();
    if (vol.dims.h % pf || vol.dims.w % pf || vol.dims.s % pf)
      throw InvalidInput(
          "fuse_and_segment: dims must be multiples of " + std::to_string(pf) +
          "; pad the volume first");
    if (text) {
      if (!cfg_.use_text)
        throw ConfigError("fuse_and_segment: model was built without text");
      if (text->rows() != 1 || text->cols() != cfg_.text_dim)
        throw ConfigError("fuse_and_segment: text embedding must be 1 x text_dim");
    }

    const long n = vol.dims.count();
    Mat<S> in(cfg_.in_channels(), n);
    for (long j = 0; j < n; ++j) in(0, j) = static_cast<S>(vol.data[j]);
    if (cfg_.coord_channels) {
      CoordFrame f = frame;
      if (f.full.h <= 0) f = CoordFrame{{0, 0, 0}, vol.dims};
      in.bottomRows(3) = coord_rows<S>(vol.dims, f);
    }

    Var<S> x = conv_norm_relu_(b.stem, g.constant(std::move(in)),
                               conv3_index_cached(vol.dims, 1));
    std::vector<Var<S>> skips;
    std::vector<Dims3> dims_at(cfg_.levels);
    Dims3 d = vol.dims;
    for (int l = 0; l < cfg_.levels; ++l) {
      dims_at[l] = d;
      x = res_block_(b.enc[l], x, conv3_index_cached(d, 1));
      if (l + 1 < cfg_.levels) {
        skips.push_back(x);
        x = conv_norm_relu_(b.down[l], x, conv3_index_cached(d, 2));
        d = strided_dims(d, 2);
      }
    }
    for (int l = cfg_.levels - 2; l >= 0; --l) {
      x = gather_patches(x, upsample2_index_cached(dims_at[l + 1]));
      x = conv_norm_relu_(b.up[l], x, conv3_index_cached(dims_at[l], 1));
      Var<S> skip = skips[l];
      if (text && b.align.count(l))
        skip = cross_align_(b.align.at(l), skip, *text, cfg_.channels_at(l));
      x = res_block_(b.dec[l], concat_rows<S>({skip, x}),
                     conv3_index_cached(dims_at[l], 1));
    }
    return add_colvec(matmul(b.head_w, x), b.head_b);
  }

  // ------------------------------------------------------------ persistence

  Json to_json() const {
    Json params = Json::object();
    visit_params(*this, [&](const std::string& name, const Mat<S>& m) {
      params[name] = mat_to_json(m);
    });
    return Json{{"kind", "seg-model"},
                {"format_version", 1},
                {"config", cfg_.to_json()},
                {"params", std::move(params)},
                {"params_hash", to_hex(weights_hash())}};
  }

  static SegModel from_json(const Json& j) {
    if (j.value("kind", "") != "seg-model")
      throw ValidationError("seg checkpoint: wrong container kind");
    SegModel m(SegConfig::from_json(j.at("config")), /*seed=*/0);
    const Json& params = j.at("params");
    visit_params(m, [&](const std::string& name, Mat<S>& dst) {
      if (!params.contains(name))
        throw ValidationError("seg checkpoint: missing parameter " + name);
      Mat<S> loaded = mat_from_json<S>(params.at(name));
      if (loaded.rows() != dst.rows() || loaded.cols() != dst.cols())
        throw ValidationError("seg checkpoint: shape mismatch for " + name);
      dst = std::move(loaded);
    });
    if (j.contains("params_hash") &&
        j.at("params_hash").get<std::string>() != to_hex(m.weights_hash()))
      throw ValidationError("seg checkpoint: parameter hash mismatch");
    return m;
  }

 private:
  static Var<S> instance_norm_(const BoundUnit& u, Var<S> x) {
    return add_colvec(mul_colvec(standardize_rows(x), u.gamma), u.beta);
  }
  static Var<S> conv_norm_relu_(const BoundUnit& u, Var<S> x,
                                std::shared_ptr<const PatchIndexMap> map) {
    return relu(instance_norm_(u, matmul(u.w, gather_patches(x, map))));
  }
  static Var<S> res_block_(const BoundRes& r, Var<S> x,
                           std::shared_ptr<const PatchIndexMap> map) {
    Var<S> y = conv_norm_relu_(r.c1, x, map);
    y = instance_norm_(r.c2, matmul(r.c2.w, gather_patches(y, map)));
    Var<S> shortcut = r.has_skip ? matmul(r.skip, x) : x;
    return relu(add(shortcut, y));
  }

  // One alignment exchange. Image features arrive channels x voxels; the
  // attention math runs token-major and converts back at the end.
  static Var<S> cross_align_(const BoundAlign& a, Var<S> img_cn, Var<S> text_raw,
                             int channels) {
    const S inv_sqrt_c = S(1) / S(std::sqrt(static_cast<double>(channels)));
    Var<S> img = transpose(img_cn);              // N x C
    Var<S> t = matmul(text_raw, a.t_in);         // 1 x C

    // Text self-attention (a single token: softmax is exactly 1).
    {
      Var<S> att = softmax_rows(
          scale(matmul(matmul(t, a.sq), transpose(matmul(t, a.sk))), inv_sqrt_c));
      t = add(t, matmul(matmul(att, matmul(t, a.sv)), a.so));
    }
    // Text gathers from the image.
    {
      Var<S> att = softmax_rows(scale(
          matmul(matmul(t, a.tq), transpose(matmul(img, a.ik))), inv_sqrt_c));
      t = add(t, matmul(matmul(att, matmul(img, a.iv)), a.to));
    }
    // Image conditioned on text, last, so the image stream leaves fused.
    {
      Var<S> att = softmax_rows(scale(
          matmul(matmul(img, a.iq), transpose(matmul(t, a.tk))), inv_sqrt_c));
      img = add(img, matmul(matmul(att, matmul(t, a.tv)), a.io));
    }
    return transpose(img);
  }

  SegConfig cfg_;
  ConvUnit stem_;
  std::vector<ResBlockP> enc_;
  std::vector<ConvUnit> down_;
  std::vector<ConvUnit> up_;
  std::vector<ResBlockP> dec_;
  Mat<S> head_w_, head_b_;
  std::map<int, AlignP> align_;
};

// ------------------------------------------------------------------ losses

// One prepared training item: a crop with its absolute coordinate frame and
// the tokenized conditioning text.
template <typename S>
struct SegTapeItem {
  const VolumeGrid* vol = nullptr;
  const MaskGrid* mask = nullptr;
  CoordFrame frame;
  std::shared_ptr<const std::vector<int>> plan_ids;
};

template <typename S>
Var<S> soft_dice_loss(Graph<S>& g, Var<S> logits, const Mat<S>& targets,
                      S eps = S(1e-6)) {
  Var<S> p = sigmoid(logits);
  Var<S> inter = sum_all(cmul(p, g.constant(targets)));
  Var<S> num = add_scalar(scale(inter, S(2)), eps);
  Var<S> den = add_scalar(sum_all(p), static_cast<S>(targets.sum()) + eps);
  return sub(g.scalar(S(1)), cdiv(num, den));
}

namespace detail_seg {

template <typename S>
Mat<S> mask_row(const MaskGrid& mask) {
  Mat<S> y(1, mask.dims.count());
  for (long j = 0; j < mask.dims.count(); ++j)
    y(0, j) = static_cast<S>(mask.data[j]);
  return y;
}

template <typename S>
Var<S> seg_item_loss(Graph<S>& g, const SegModel<S>& model,
                     const typename SegModel<S>::Bound& b,
                     const SegTapeItem<S>& item, const Var<S>* emb) {
  if (!item.vol->same_shape(*item.mask))
    throw InvalidInput("seg loss: volume and mask shapes differ");
  Var<S> logits = model.fuse_and_segment(g, b, *item.vol, emb, item.frame);
  const Mat<S> y = mask_row<S>(*item.mask);
  Var<S> loss = bce_with_logits_mean(logits, y);
  if (model.config().use_dice) loss = add(loss, soft_dice_loss(g, logits, y));
  return loss;
}

}  // namespace detail_seg

// Voxelwise loss on noise-perturbed plan embeddings (nspec == nullptr or
// alpha == 0 is the plain multimodal loss). In unimodal mode (model built
// with use_text=false) the text arguments may be null and are ignored.
template <typename S>
Var<S> loss_neseg(Graph<S>& g, const SegModel<S>& model,
                  const typename SegModel<S>::Bound& b, const TinyLM<S>* lm,
                  const typename TinyLM<S>::Bound* lm_b, const Var<S>* prompts,
                  std::span<const SegTapeItem<S>> batch, const NoiseSpec* nspec) {
  if (batch.empty()) throw InvalidInput("loss_neseg: empty batch");
  const bool with_text = model.config().use_text;
  if (with_text && (!lm || !lm_b || !prompts))
    throw ConfigError("loss_neseg: text-conditioned model needs lm and prompts");
  Var<S> total = g.scalar(S(0));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Var<S> emb;
    if (with_text)
      emb = encode_plan(g, *lm, *lm_b, *prompts, batch[i].plan_ids, nspec,
                        static_cast<std::uint64_t>(i), model.config().pool);
    total = add(total, detail_seg::seg_item_loss(g, model, b, batch[i],
                                                 with_text ? &emb : nullptr));
  }
  return scale(total, S(1) / S(static_cast<double>(batch.size())));
}

// loss_neseg plus lambda * (1 - cos) between the noisy-prompt embedding and
// the clean embedding computed under the stop-gradient prompt view. Callers
// pass that view as `shadow_prompts` — bind the CURRENT prompt values as a
// constant. lambda == 0 returns the base loss untouched. `raw_cos_out`, when
// given, receives the mean raw cosine (inspection only, not part of the loss).
template <typename S>
Var<S> loss_ceseg(Graph<S>& g, const SegModel<S>& model,
                  const typename SegModel<S>::Bound& b, const TinyLM<S>& lm,
                  const typename TinyLM<S>::Bound& lm_b, const Var<S>& prompts,
                  const Var<S>& shadow_prompts,
                  std::span<const SegTapeItem<S>> batch, const NoiseSpec* nspec,
                  double lambda, double* raw_cos_out = nullptr) {
  if (!model.config().use_text)
    throw ConfigError("loss_ceseg: consistency needs a text-conditioned model");
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw ConfigError("loss_ceseg: lambda must be finite and >= 0");
  Var<S> base = loss_neseg<S>(g, model, b, &lm, &lm_b, &prompts, batch, nspec);
  if (lambda == 0.0 && !raw_cos_out) return base;

  Var<S> r_sum = g.scalar(S(0));
  double cos_sum = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Var<S> noisy = encode_plan(g, lm, lm_b, prompts, batch[i].plan_ids, nspec,
                               static_cast<std::uint64_t>(i), model.config().pool);
    Var<S> clean = encode_plan(g, lm, lm_b, shadow_prompts, batch[i].plan_ids,
                               nullptr, static_cast<std::uint64_t>(i),
                               model.config().pool);
    Var<S> cos = cosine_sim_flat(noisy, clean);
    cos_sum += static_cast<double>(cos.item());
    r_sum = add(r_sum, sub(g.scalar(S(1)), cos));
  }
  if (raw_cos_out) *raw_cos_out = cos_sum / static_cast<double>(batch.size());
  if (lambda == 0.0) return base;
  return add(base, scale(r_sum, S(lambda) / S(static_cast<double>(batch.size()))));
}

// --------------------------------------------------------------- inference

// Pads to the model's pooling granularity, tiles the volume with the given
// window and fractional overlap, averages logits uniformly in overlaps, and
// thresholds at probability 0.5 (logit 0). A window equal to the padded
// volume is exactly direct inference.
template <typename S>
MaskGrid sliding_window_infer(const SegModel<S>& model, const PromptBank<S>& bank,
                              const TinyLM<S>& lm, const VolumeGrid& vol,
                              const std::string& plan, Dims3 window,
                              double overlap) {
  if (!(overlap >= 0.0 && overlap < 1.0))
    throw InvalidInput("sliding_window_infer: overlap must be in [0, 1)");
  const int pf = model.config().pool_factor();
  if (window.h <= 0 || window.w <= 0 || window.s <= 0 || window.h % pf ||
      window.w % pf || window.s % pf)
    throw InvalidInput("sliding_window_infer: window dims must be positive multiples of " +
                       std::to_string(pf));
  auto pad_up = [&](int d) { return ((d + pf - 1) / pf) * pf; };
  const Dims3 padded{pad_up(vol.dims.h), pad_up(vol.dims.w), pad_up(vol.dims.s)};
  if (window.h > padded.h || window.w > padded.w || window.s > padded.s)
    throw InvalidInput("sliding_window_infer: window exceeds the padded volume");

  VolumeGrid work = vol;
  if (!(padded.h == vol.dims.h && padded.w == vol.dims.w && padded.s == vol.dims.s)) {
    work = VolumeGrid::zeros(padded, vol.spacing, vol.unit);
    for (int h = 0; h < vol.dims.h; ++h)
      for (int w = 0; w < vol.dims.w; ++w)
        for (int s = 0; s < vol.dims.s; ++s)
          work.at(h, w, s) = vol.at(h, w, s);
  }

  // The plan embedding is tile-independent: encode it once, clean.
  Mat<S> emb_val;
  if (model.config().use_text) {
    Graph<S> g;
    auto lm_b = lm.bind(g, false);
    Var<S> prompts = g.constant(bank.prompts);
    auto ids = std::make_shared<std::vector<int>>(lm.vocab().encode(plan));
    emb_val = encode_plan(g, lm, lm_b, prompts, ids, nullptr, 0,
                          model.config().pool).val();
  }

  auto starts = [&](int full, int win) {
    std::vector<int> out;
    const int step = std::max(1, static_cast<int>(std::floor(win * (1.0 - overlap))));
    for (int s = 0; s + win < full; s += step) out.push_back(s);
    out.push_back(full - win);
    return out;
  };
  const auto hs = starts(padded.h, window.h);
  const auto ws = starts(padded.w, window.w);
  const auto ss = starts(padded.s, window.s);

  std::vector<double> logit_sum(static_cast<std::size_t>(padded.count()), 0.0);
  std::vector<int> hits(static_cast<std::size_t>(padded.count()), 0);
  for (int h0 : hs)
    for (int w0 : ws)
      for (int s0 : ss) {
        VolumeGrid tile = VolumeGrid::zeros(window, work.spacing, work.unit);
        for (int h = 0; h < window.h; ++h)
          for (int w = 0; w < window.w; ++w)
            for (int s = 0; s < window.s; ++s)
              tile.at(h, w, s) = work.at(h0 + h, w0 + w, s0 + s);
        Graph<S> g;
        auto b = model.bind(g, false);
        Var<S> text;
        const bool with_text = model.config().use_text;
        if (with_text) text = g.constant(emb_val);
        const CoordFrame frame{{h0, w0, s0}, vol.dims};
        Var<S> logits = model.fuse_and_segment(g, b, tile,
                                               with_text ? &text : nullptr, frame);
        long j = 0;
        for (int h = 0; h < window.h; ++h)
          for (int w = 0; w < window.w; ++w)
            for (int s = 0; s < window.s; ++s, ++j) {
              const long dst = linear_index(padded, h0 + h, w0 + w, s0 + s);
              logit_sum[static_cast<std::size_t>(dst)] +=
                  static_cast<double>(logits.val()(0, j));
              hits[static_cast<std::size_t>(dst)] += 1;
            }
      }

  MaskGrid out = MaskGrid::zeros(vol.dims, vol.spacing, VoxelUnit::kLabel);
  for (int h = 0; h < vol.dims.h; ++h)
    for (int w = 0; w < vol.dims.w; ++w)
      for (int s = 0; s < vol.dims.s; ++s) {
        const long src = linear_index(padded, h, w, s);
        const double avg = logit_sum[static_cast<std::size_t>(src)] /
                           std::max(1, hits[static_cast<std::size_t>(src)]);
        out.at(h, w, s) = avg > 0.0 ? 1 : 0;
      }
  return out;
}

// ---------------------------------------------------------------- training

enum class SegObjective { kDefault, kNeseg, kCeseg };

inline std::string to_string(SegObjective o) {
  switch (o) {
    case SegObjective::kDefault: return "default";
    case SegObjective::kNeseg: return "neseg";
    case SegObjective::kCeseg: return "ceseg";
  }
  throw InvalidInput("unknown seg objective");
}
inline SegObjective seg_objective_from_string(const std::string& s) {
  if (s == "default") return SegObjective::kDefault;
  if (s == "neseg") return SegObjective::kNeseg;
  if (s == "ceseg") return SegObjective::kCeseg;
  throw ValidationError("unknown seg objective '" + s + "'");
}

struct SegCase {
  std::string case_id;
  VolumeGrid vol;  // preprocessed
  MaskGrid mask;
  std::string plan;
};

struct TrainSegConfig {
  SegObjective objective = SegObjective::kCeseg;
  NoiseSpec noise;  // seed field overridden per step
  double lambda = 1.0;
  Dims3 crop{16, 16, 8};
  int epochs = 10;
  int batch_size = 2;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;

  Json to_json() const {
    return Json{{"objective", to_string(objective)},
                {"noise", noise.to_json()},
                {"lambda", lambda},
                {"crop", {crop.h, crop.w, crop.s}},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"lr", lr},
                {"weight_decay", weight_decay},
                {"seed", seed}};
  }
  static TrainSegConfig from_json(const Json& j) {
    TrainSegConfig c;
    c.objective = seg_objective_from_string(j.at("objective").get<std::string>());
    c.noise = NoiseSpec::from_json(j.at("noise"));
    c.lambda = j.at("lambda").get<double>();
    c.crop = Dims3{j.at("crop").at(0).get<int>(), j.at("crop").at(1).get<int>(),
                   j.at("crop").at(2).get<int>()};
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.lr = j.at("lr").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  }
};

// Fits the U-Net (+ alignment + prompts) while the language model stays
// frozen. Validation loss is the clean full-volume loss each epoch.
template <typename S>
TrainCurve train_seg(SegModel<S>& model, PromptBank<S>& bank, const TinyLM<S>& lm,
                     std::span<const SegCase> train, std::span<const SegCase> val,
                     const TrainSegConfig& cfg) {
  if (train.empty()) throw InvalidInput("train_seg: empty training split");
  const bool with_text = model.config().use_text;
  if (cfg.objective == SegObjective::kCeseg && !with_text)
    throw ConfigError("train_seg: consistency objective needs text conditioning");
  if (with_text && bank.prompts.cols() != lm.config().embed_dim)
    throw ConfigError("train_seg: prompt width != LM embedding width");
  {
    std::set<std::string> ids;
    for (const auto& c : train) ids.insert(c.case_id);
    for (const auto& c : val)
      if (ids.count(c.case_id))
        throw ValidationError("train_seg: case '" + c.case_id +
                              "' appears in both train and validation");
  }

  std::vector<std::shared_ptr<const std::vector<int>>> plan_ids;
  for (const auto& c : train)
    plan_ids.push_back(
        std::make_shared<const std::vector<int>>(lm.vocab().encode(c.plan)));
  std::vector<std::shared_ptr<const std::vector<int>>> val_ids;
  for (const auto& c : val)
    val_ids.push_back(
        std::make_shared<const std::vector<int>>(lm.vocab().encode(c.plan)));

  AdamWConfig<S> ocfg;
  ocfg.lr = static_cast<S>(cfg.lr);
  ocfg.weight_decay = static_cast<S>(cfg.weight_decay);
  AdamW<S> opt(ocfg);
  RngStream rng(derive_seed(cfg.seed, "train-seg"));

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainCurve curve;
  std::uint64_t step = 0, crop_counter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));

      std::vector<VolumeGrid> vols;
      std::vector<MaskGrid> masks;
      std::vector<SegTapeItem<S>> items;
      vols.reserve(end - start);
      masks.reserve(end - start);
      for (std::size_t k = start; k < end; ++k) {
        const SegCase& c = train[order[k]];
        Dims3 origin;
        auto [pv, pm] = crop_patch(c.vol, c.mask, cfg.crop,
                                   derive_seed(cfg.seed, "crop", crop_counter++),
                                   &origin);
        vols.push_back(std::move(pv));
        masks.push_back(std::move(pm));
        SegTapeItem<S> item;
        item.vol = &vols.back();
        item.mask = &masks.back();
        item.frame = CoordFrame{origin, c.vol.dims};
        item.plan_ids = plan_ids[order[k]];
        items.push_back(std::move(item));
      }

      NoiseSpec step_noise = cfg.noise;
      step_noise.seed = derive_seed(cfg.seed, "noise-step", step);
      ++step;

      Graph<S> g;
      typename SegModel<S>::Bound b = model.bind(g, /*trainable=*/true);
      typename TinyLM<S>::Bound lm_b;
      Var<S> prompts, shadow;
      if (with_text) {
        lm_b = lm.bind(g, /*trainable=*/false);
        prompts = g.leaf(bank.prompts, true);
        shadow = g.constant(bank.prompts);
      }

      Var<S> loss;
      switch (cfg.objective) {
        case SegObjective::kDefault:
          loss = loss_neseg<S>(g, model, b, with_text ? &lm : nullptr,
                               with_text ? &lm_b : nullptr,
                               with_text ? &prompts : nullptr, items, nullptr);
          break;
        case SegObjective::kNeseg:
          loss = loss_neseg<S>(g, model, b, with_text ? &lm : nullptr,
                               with_text ? &lm_b : nullptr,
                               with_text ? &prompts : nullptr, items, &step_noise);
          break;
        case SegObjective::kCeseg:
          loss = loss_ceseg<S>(g, model, b, lm, lm_b, prompts, shadow, items,
                               &step_noise, cfg.lambda);
          break;
      }
      g.backward(loss);

      std::vector<Mat<S>*> params = model.trainable_params();
      std::vector<Mat<S>> grads;
      for (const Var<S>& leaf : b.leaves) grads.push_back(g.grad(leaf));
      if (with_text) {
        params.push_back(&bank.prompts);
        grads.push_back(g.grad(prompts));
      }
      opt.step(params, grads);
      epoch_loss += static_cast<double>(loss.item());
      ++batches;
    }
    curve.train_loss.push_back(epoch_loss / std::max(batches, 1));

    if (!val.empty()) {
      Graph<S> g;
      typename SegModel<S>::Bound b = model.bind(g, false);
      typename TinyLM<S>::Bound lm_b;
      Var<S> prompts;
      if (with_text) {
        lm_b = lm.bind(g, false);
        prompts = g.constant(bank.prompts);
      }
      std::vector<SegTapeItem<S>> items;
      for (std::size_t i = 0; i < val.size(); ++i) {
        SegTapeItem<S> item;
        item.vol = &val[i].vol;
        item.mask = &val[i].mask;
        item.frame = CoordFrame{{0, 0, 0}, val[i].vol.dims};
        item.plan_ids = val_ids[i];
        items.push_back(std::move(item));
      }
      curve.val_loss.push_back(static_cast<double>(
          loss_neseg<S>(g, model, b, with_text ? &lm : nullptr,
                        with_text ? &lm_b : nullptr,
                        with_text ? &prompts : nullptr, items, nullptr)
              .item()));
    }
  }
  return curve;
}

// ------------------------------------------------------------- checkpoints

// Container bundling the segmentation weights, the prompt bank, and the hash
// of the frozen LM they were trained against.
template <typename S>
Json seg_checkpoint_to_json(const SegModel<S>& model, const PromptBank<S>& bank,
                            const TinyLM<S>& lm) {
  return Json{{"kind", "seg-checkpoint"},
              {"format_version", 1},
              {"model", model.to_json()},
              {"prompts", mat_to_json(bank.prompts)},
              {"frozen_lm_hash", to_hex(lm.weights_hash())}};
}

template <typename S>
std::pair<SegModel<S>, PromptBank<S>> seg_checkpoint_from_json(const Json& j,
                                                               const TinyLM<S>& lm) {
  if (j.value("kind", "") != "seg-checkpoint")
    throw ValidationError("seg checkpoint: wrong container kind");
  if (j.at("frozen_lm_hash").get<std::string>() != to_hex(lm.weights_hash()))
    throw ValidationError(
        "seg checkpoint: frozen LM differs from the one used in training");
  SegModel<S> model = SegModel<S>::from_json(j.at("model"));
  PromptBank<S> bank;
  bank.prompts = mat_from_json<S>(j.at("prompts"));
  if (model.config().use_text &&
      (bank.prompts.rows() != model.config().n_prompts ||
       bank.prompts.cols() != model.config().text_dim))
    throw ValidationError("seg checkpoint: prompt bank shape mismatch");
  return {std::move(model), std::move(bank)};
}

}  // namespace rtflow
