#pragma once

// Evaluation toolkit: ROUGE text-overlap scores, volumetric overlap and
// surface-distance metrics in physical millimetres, nonparametric bootstrap
// confidence intervals, Pearson correlation, and the rubric scorer that
// grades generated plan text against the case fields it should express.
//
// Every function here is pure and deterministic; degenerate inputs are
// reported through explicit flags instead of silent conventions.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "rtflow/common.hpp"
#include "rtflow/jsonutil.hpp"
#include "rtflow/synth.hpp"
#include "rtflow/volume.hpp"

namespace rtflow {

// ------------------------------------------------------------------ text

enum class RougeVariant { kRouge1, kRouge2, kRougeL };

std::string to_string(RougeVariant v);
RougeVariant rouge_variant_from_string(const std::string& s);

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  // Set when the reference yields no units for the variant (empty text, or
  // shorter than the n-gram order); scores are all zero in that case.
  bool degenerate = false;
};

// Word-level, lowercased. kRouge1/kRouge2 use clipped n-gram counts;
// kRougeL uses the longest common subsequence.
RougeScore rouge(std::string_view candidate, std::string_view reference,
                 RougeVariant variant);

// ---------------------------------------------------------------- overlap

struct OverlapScore {
  double dice = 0.0;
  double iou = 0.0;
  bool both_empty = false;  // convention: two empty masks agree perfectly
};

OverlapScore dice_iou(const MaskGrid& pred, const MaskGrid& gt);

// ------------------------------------------------------------- surfaces

// Percentile with linear interpolation between order statistics (the
// convention every percentile in this codebase uses). `p` in [0, 1].
double percentile(std::vector<double> values, double p);

struct SurfaceDistanceResult {
  double value = 0.0;
  // Set when either mask is empty. hd95 then reports the grid bounding-box
  // diagonal in mm; surface_dice reports 1.0 if both are empty, else 0.0.
  bool empty_mask = false;
};

// 95th percentile of surface distances in mm. Surfaces are mask voxels with
// at least one 6-neighbour outside the mask (or outside the grid); distances
// use anisotropic voxel spacing. By default the percentile is taken over the
// pooled multiset of both directed distance sets; `per_direction` instead
// takes the max of the two per-direction percentiles.
SurfaceDistanceResult hd95(const MaskGrid& pred, const MaskGrid& gt,
                           bool per_direction = false);

// Fraction of surface voxels (both directions pooled) lying within
// `tolerance_mm` of the other surface. The tolerance has no default
// anywhere: callers must state it explicitly and it is echoed into reports.
SurfaceDistanceResult surface_dice(const MaskGrid& pred, const MaskGrid& gt,
                                   double tolerance_mm);

// ------------------------------------------------------------- statistics

struct BootstrapSpec {
  int resamples = 1000;
  double level = 0.95;
  std::uint64_t seed = 0;

  Json to_json() const;
  static BootstrapSpec from_json(const Json& j);
};

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

// Percentile interval of resampled means (resamples of the original size,
// drawn with replacement). Deterministic per spec.seed.
Interval bootstrap_ci(const std::vector<double>& values, const BootstrapSpec& spec);

struct PearsonResult {
  double r = 0.0;
  bool degenerate = false;  // zero variance on either side; r meaningless
};

PearsonResult pearson_r(const std::vector<double>& a, const std::vector<double>& b);

// ---------------------------------------------------------------- rubrics

// Binary per-facet grading of one generated plan against the fields it was
// supposed to express. A plan from which any facet cannot be recovered is
// graded zero across the board with parse_failed set.
struct RubricResult {
  int r1_laterality = 0;
  int r2_surgery = 0;
  int r3_scope = 0;  // nodal coverage and both stage numbers
  int r4_dose = 0;
  int r5_grounded = 0;  // complete parse and every token in the plan grammar
  bool parse_failed = false;

  int total() const {
    return r1_laterality + r2_surgery + r3_scope + r4_dose + r5_grounded;
  }
  Json to_json() const;
};

RubricResult score_plan_rubrics(std::string_view generated_plan,
                                const CaseFields& gt_fields);

// ----------------------------------------------------------------- report

struct MetricStat {
  double point = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  long n = 0;

  Json to_json() const;
};

// Mean of `values` with a bootstrap interval; the per-metric seed is derived
// from spec.seed and the metric name so metrics do not share draws.
MetricStat summarize_metric(const std::string& name,
                            const std::vector<double>& values,
                            const BootstrapSpec& spec);

struct MetricsReport {
  std::map<std::string, MetricStat> metrics;
  std::vector<Json> rubric_rows;      // one object per case, case-id keyed
  std::vector<std::string> flags;     // degenerate-input notes, failures
  Json config = Json::object();       // echo: tolerances, bootstrap, seeds

  Json to_json() const;
};

}  // namespace rtflow
