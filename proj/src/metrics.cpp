#include "rtflow/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <set>
#include <unordered_map>

#include "rtflow/rng.hpp"
#include "rtflow/text.hpp"

namespace rtflow {

namespace {

double f1_of(double precision, double recall) {
  const double s = precision + recall;
  return s > 0.0 ? 2.0 * precision * recall / s : 0.0;
}

// N-grams as joined strings; '\x1f' cannot appear in word tokens.
std::unordered_map<std::string, long> ngram_counts(
    const std::vector<std::string>& tokens, int n) {
  std::unordered_map<std::string, long> counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (int k = 1; k < n; ++k) {
      key.push_back('\x1f');
      key += tokens[i + k];
    }
    ++counts[key];
  }
  return counts;
}

long lcs_length(const std::vector<std::string>& a,
                const std::vector<std::string>& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<long> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1
                                    : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[m];
}

struct SurfacePoint {
  double x, y, z;
};

// Mask voxels with a 6-neighbour outside the mask (or outside the grid),
// positioned in mm via the anisotropic spacing.
std::vector<SurfacePoint> surface_points(const MaskGrid& m) {
  static constexpr std::array<std::array<int, 3>, 6> kSteps{
      {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};
  std::vector<SurfacePoint> out;
  for (int h = 0; h < m.dims.h; ++h)
    for (int w = 0; w < m.dims.w; ++w)
      for (int s = 0; s < m.dims.s; ++s) {
        if (!m.at(h, w, s)) continue;
        bool boundary = false;
        for (const auto& d : kSteps) {
          const int hh = h + d[0], ww = w + d[1], ss = s + d[2];
          if (hh < 0 || hh >= m.dims.h || ww < 0 || ww >= m.dims.w || ss < 0 ||
              ss >= m.dims.s || !m.at(hh, ww, ss)) {
            boundary = true;
            break;
          }
        }
        if (boundary)
          out.push_back(SurfacePoint{h * m.spacing.h, w * m.spacing.w,
                                     s * m.spacing.s});
      }
  return out;
}

// Distance from each point of `from` to its nearest point of `to`.
std::vector<double> directed_distances(const std::vector<SurfacePoint>& from,
                                       const std::vector<SurfacePoint>& to) {
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& a : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : to) {
      const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    out.push_back(std::sqrt(best));
  }
  return out;
}

double bbox_diagonal_mm(const MaskGrid& m) {
  const double x = m.dims.h * m.spacing.h;
  const double y = m.dims.w * m.spacing.w;
  const double z = m.dims.s * m.spacing.s;
  return std::sqrt(x * x + y * y + z * z);
}

long count_set(const MaskGrid& m) {
  long n = 0;
  for (auto v : m.data) n += v ? 1 : 0;
  return n;
}

const std::set<std::string>& sanctioned_plan_tokens() {
  static const std::set<std::string> tokens(plan_vocabulary().begin(),
                                            plan_vocabulary().end());
  return tokens;
}

}  // namespace

// ------------------------------------------------------------------ text

std::string to_string(RougeVariant v) {
  switch (v) {
    case RougeVariant::kRouge1: return "rouge1";
    case RougeVariant::kRouge2: return "rouge2";
    case RougeVariant::kRougeL: return "rougeL";
  }
  throw InvalidInput("unknown rouge variant");
}

RougeVariant rouge_variant_from_string(const std::string& s) {
  if (s == "rouge1") return RougeVariant::kRouge1;
  if (s == "rouge2") return RougeVariant::kRouge2;
  if (s == "rougeL") return RougeVariant::kRougeL;
  throw ValidationError("unknown rouge variant '" + s + "'");
}

RougeScore rouge(std::string_view candidate, std::string_view reference,
                 RougeVariant variant) {
  const std::vector<std::string> cand = tokenize_words(candidate);
  const std::vector<std::string> ref = tokenize_words(reference);
  RougeScore score;

  if (variant == RougeVariant::kRougeL) {
    if (ref.empty()) {
      score.degenerate = true;
      return score;
    }
    if (cand.empty()) return score;
    const long lcs = lcs_length(cand, ref);
    score.precision = static_cast<double>(lcs) / cand.size();
    score.recall = static_cast<double>(lcs) / ref.size();
    score.f1 = f1_of(score.precision, score.recall);
    return score;
  }

  const int n = variant == RougeVariant::kRouge1 ? 1 : 2;
  const auto ref_counts = ngram_counts(ref, n);
  long ref_total = 0;
  for (const auto& [_, c] : ref_counts) ref_total += c;
  if (ref_total == 0) {
    score.degenerate = true;
    return score;
  }
  const auto cand_counts = ngram_counts(cand, n);
  long cand_total = 0, match = 0;
  for (const auto& [gram, c] : cand_counts) {
    cand_total += c;
    auto it = ref_counts.find(gram);
    if (it != ref_counts.end()) match += std::min(c, it->second);
  }
  if (cand_total == 0) return score;
  score.precision = static_cast<double>(match) / cand_total;
  score.recall = static_cast<double>(match) / ref_total;
  score.f1 = f1_of(score.precision, score.recall);
  return score;
}

// ---------------------------------------------------------------- overlap

OverlapScore dice_iou(const MaskGrid& pred, const MaskGrid& gt) {
  if (!pred.same_shape(gt)) throw InvalidInput("dice_iou: shape mismatch");
  long inter = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
    inter += (p && g) ? 1 : 0;
    np += p ? 1 : 0;
    ng += g ? 1 : 0;
  }
  OverlapScore s;
  if (np + ng == 0) {
    s.dice = 1.0;
    s.iou = 1.0;
    s.both_empty = true;
    return s;
  }
  s.dice = 2.0 * inter / (np + ng);
  s.iou = static_cast<double>(inter) / (np + ng - inter);
  return s;
}

// ------------------------------------------------------------- surfaces

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw InvalidInput("percentile: empty values");
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidInput("percentile: p outside [0,1]");
  std::sort(values.begin(), values.end());
  const double pos = p * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] * (1.0 - frac) + values[lo + 1] * frac;
}

SurfaceDistanceResult hd95(const MaskGrid& pred, const MaskGrid& gt,
                           bool per_direction) {
  if (!pred.same_shape(gt)) throw InvalidInput("hd95: shape mismatch");
  SurfaceDistanceResult r;
  if (count_set(pred) == 0 || count_set(gt) == 0) {
    r.value = bbox_diagonal_mm(pred);
    r.empty_mask = true;
    return r;
  }
  const auto sp = surface_points(pred);
  const auto sg = surface_points(gt);
  std::vector<double> fwd = directed_distances(sp, sg);
  std::vector<double> bwd = directed_distances(sg, sp);
  if (per_direction) {
    r.value = std::max(percentile(std::move(fwd), 0.95),
                       percentile(std::move(bwd), 0.95));
    return r;
  }
  fwd.insert(fwd.end(), bwd.begin(), bwd.end());
  r.value = percentile(std::move(fwd), 0.95);
  return r;
}

SurfaceDistanceResult surface_dice(const MaskGrid& pred, const MaskGrid& gt,
                                   double tolerance_mm) {
  if (!pred.same_shape(gt)) throw InvalidInput("surface_dice: shape mismatch");
  if (!(tolerance_mm >= 0.0) || !std::isfinite(tolerance_mm))
    throw InvalidInput("surface_dice: tolerance must be finite and >= 0");
  SurfaceDistanceResult r;
  const long np = count_set(pred), ng = count_set(gt);
  if (np == 0 || ng == 0) {
    r.value = (np == 0 && ng == 0) ? 1.0 : 0.0;
    r.empty_mask = true;
    return r;
  }
  const auto sp = surface_points(pred);
  const auto sg = surface_points(gt);
  const auto fwd = directed_distances(sp, sg);
  const auto bwd = directed_distances(sg, sp);
  long within = 0;
  for (double d : fwd) within += d <= tolerance_mm ? 1 : 0;
  for (double d : bwd) within += d <= tolerance_mm ? 1 : 0;
  r.value = static_cast<double>(within) /
            static_cast<double>(fwd.size() + bwd.size());
  return r;
}

// ------------------------------------------------------------- statistics

Json BootstrapSpec::to_json() const {
  return Json{{"resamples", resamples}, {"level", level}, {"seed", seed}};
}

BootstrapSpec BootstrapSpec::from_json(const Json& j) {
  BootstrapSpec s;
  s.resamples = j.at("resamples").get<int>();
  s.level = j.at("level").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

Interval bootstrap_ci(const std::vector<double>& values, const BootstrapSpec& spec) {
  if (values.empty()) throw InvalidInput("bootstrap_ci: empty values");
  if (!(spec.level > 0.0 && spec.level < 1.0))
    throw InvalidInput("bootstrap_ci: level outside (0,1)");
  if (spec.resamples <= 0) throw InvalidInput("bootstrap_ci: resamples must be > 0");

  RngStream rng(derive_seed(spec.seed, "bootstrap"));
  auto& eng = rng.engine();
  const std::size_t n = values.size();
  std::vector<double> means;
  means.reserve(static_cast<std::size_t>(spec.resamples));
  for (int r = 0; r < spec.resamples; ++r) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += values[eng() % n];
    means.push_back(sum / static_cast<double>(n));
  }
  const double tail = (1.0 - spec.level) / 2.0;
  Interval ci;
  ci.low = percentile(means, tail);
  ci.high = percentile(std::move(means), 1.0 - tail);
  return ci;
}

PearsonResult pearson_r(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2)
    throw InvalidInput("pearson_r: need two equal-length samples of size >= 2");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  PearsonResult r;
  if (va == 0.0 || vb == 0.0) {
    r.degenerate = true;
    return r;
  }
  r.r = cov / std::sqrt(va * vb);
  return r;
}

// ---------------------------------------------------------------- rubrics

Json RubricResult::to_json() const {
  return Json{{"r1_laterality", r1_laterality}, {"r2_surgery", r2_surgery},
              {"r3_scope", r3_scope},           {"r4_dose", r4_dose},
              {"r5_grounded", r5_grounded},     {"total", total()},
              {"parse_failed", parse_failed}};
}

RubricResult score_plan_rubrics(std::string_view generated_plan,
                                const CaseFields& gt_fields) {
  validate_fields(gt_fields);
  RubricResult r;
  const ParsedPlan p = parse_plan(generated_plan);
  if (!p.complete()) {
    // A plan any facet cannot be recovered from scores nothing: an
    // incomplete or garbled plan is itself treated as ungrounded output.
    r.parse_failed = true;
    return r;
  }
  r.r1_laterality = *p.laterality == gt_fields.laterality ? 1 : 0;
  r.r2_surgery = *p.surgery == gt_fields.surgery ? 1 : 0;
  r.r3_scope = (*p.nodal == gt_fields.nodal && *p.stage_t == gt_fields.stage_t &&
                *p.stage_n == gt_fields.stage_n)
                   ? 1
                   : 0;
  r.r4_dose = *p.dose_index == gt_fields.dose_index ? 1 : 0;

  bool sanctioned = true;
  const auto& allowed = sanctioned_plan_tokens();
  for (const auto& tok : tokenize_words(generated_plan))
    if (!allowed.count(tok)) {
      sanctioned = false;
      break;
    }
  r.r5_grounded = sanctioned ? 1 : 0;
  return r;
}

// ----------------------------------------------------------------- report

Json MetricStat::to_json() const {
  return Json{{"point", point}, {"ci_low", ci_low}, {"ci_high", ci_high}, {"n", n}};
}

MetricStat summarize_metric(const std::string& name,
                            const std::vector<double>& values,
                            const BootstrapSpec& spec) {
  if (values.empty()) throw InvalidInput("summarize_metric: no values for " + name);
  MetricStat stat;
  double sum = 0.0;
  for (double v : values) sum += v;
  stat.point = sum / static_cast<double>(values.size());
  BootstrapSpec derived = spec;
  derived.seed = derive_seed(spec.seed, name);
  const Interval ci = bootstrap_ci(values, derived);
  stat.ci_low = ci.low;
  stat.ci_high = ci.high;
  stat.n = static_cast<long>(values.size());
  return stat;
}

Json MetricsReport::to_json() const {
  Json m = Json::object();
  for (const auto& [name, stat] : metrics) m[name] = stat.to_json();
  return Json{{"metrics", std::move(m)},
              {"rubrics", rubric_rows},
              {"flags", flags},
              {"config", config}};
}

}  // namespace rtflow
