#pragma once

// End-to-end orchestration: deterministic corpus splits, instruction-sample
// assembly, training of the two text experts and the text-conditioned
// segmentation model, the report -> summary -> plan -> mask cascade over
// held-out cases, and the experiment harness on top of it (clean-versus-
// generated robustness comparison, single-axis ablation grids, and a
// directory-based evaluation entry point for the CLI).
//
// Everything here is double precision and deterministic per (config, seed).
// Every artifact embeds the canonical hash of the RunConfig that produced
// it, so any report or checkpoint can be traced back to an exact setup.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rtflow/common.hpp"
#include "rtflow/jsonutil.hpp"
#include "rtflow/lm.hpp"
#include "rtflow/metrics.hpp"
#include "rtflow/seg.hpp"
#include "rtflow/synth.hpp"
#include "rtflow/volume.hpp"

namespace rtflow {

// The cascade's two text stages; each is a separately fine-tuned TinyLM.
enum class ExpertRole { kSummary, kPlan };

std::string to_string(ExpertRole r);
ExpertRole expert_role_from_string(const std::string& s);

// Hash of the exact bytes handed from one stage to the next; the cascade
// trace stores one per stage boundary so tests can assert that stage k+1
// consumed exactly what stage k emitted.
inline std::string text_hash(std::string_view s) { return to_hex(fnv1a64(s)); }

// ------------------------------------------------------------- run config

// Complete description of a run: corpus, architectures, per-stage training
// setups, inference and evaluation settings, and output location. Fully
// serializable so artifacts can embed it and reruns can reproduce it.
struct RunConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3};

  CorpusConfig corpus;
  int val_cases = 16;  // cases held out of training for validation curves
  int test_cases = 8;  // cases the cascade and all comparisons run on

  LMConfig lm;  // architecture shared by both text experts
  SegConfig seg;
  PreprocessConfig preprocess;

  TrainLMConfig summary_train;
  TrainLMConfig plan_train;
  TrainSegConfig seg_train;
  // The plan expert trains on reference summaries by default; enabling this
  // trains it on the summary expert's generations instead, for comparison.
  bool train_plan_on_generated = false;
  int encoder_dim = 32;  // sentence-encoder width for consistency objectives

  int max_new_tokens = 48;
  Dims3 infer_window{32, 32, 16};
  double infer_overlap = 0.25;
  // Diagnostic mode: stage 2 consumes the reference summary instead of the
  // generated one, isolating the plan stage from stage-1 errors.
  bool gt_summary_bypass = false;

  std::vector<std::string> metrics{"rouge1", "rouge2",       "rougeL",
                                   "dice",   "iou",          "hd95",
                                   "surface_dice", "rubric"};
  double surface_tolerance_mm = 3.0;
  BootstrapSpec bootstrap;

  std::string out_dir = "runs/default";

  void validate() const;
  Json to_json() const;
  static RunConfig from_json(const Json& j);
  std::string hash() const { return canonical_json_hash(to_json()); }
};

// Relative output directories are resolved under $RTFLOW_OUT_ROOT when that
// variable is set; absolute paths and unset environments pass through.
std::string resolve_out_dir(const std::string& out_dir);

// ---------------------------------------------------------- data plumbing

// Deterministic split by case index: the first cases train, the next
// val_cases validate, the last test_cases are held out. No id overlaps by
// construction; sizes are validated against the corpus.
struct CorpusSplit {
  std::vector<CaseRecord> train;
  std::vector<CaseRecord> val;
  std::vector<CaseRecord> test;
};
CorpusSplit split_corpus(std::vector<CaseRecord> cases, const RunConfig& cfg);

// Instruction-tuning samples for one expert role: summary maps report ->
// summary, plan maps summary -> plan, each under its fixed instruction.
std::vector<ExpertSample> expert_samples(std::span<const CaseRecord> cases,
                                         ExpertRole role);

// Plan-expert samples whose inputs are the summary expert's generations
// instead of the reference summaries.
std::vector<ExpertSample> plan_samples_from_generated(
    std::span<const CaseRecord> cases, const TinyLM<double>& summary_expert,
    int max_new_tokens);

// Preprocessed segmentation cases conditioned on the reference plan text.
std::vector<SegCase> seg_cases(std::span<const CaseRecord> cases,
                               const PreprocessConfig& pre);

// ---------------------------------------------------------- trained stack

// The three models one seed produces. The segmentation model is trained
// against the frozen plan expert, which doubles as its text encoder at
// inference time.
struct TrainedStack {
  TinyLM<double> summary;
  TinyLM<double> plan;
  SegModel<double> seg;
  PromptBank<double> prompts;
  TrainCurve summary_curve, plan_curve, seg_curve;
};

// Trains the full stack for one seed. All per-stage seeds are derived from
// `seed`, so distinct seeds give fully independent stacks and equal seeds
// reproduce bit-identical ones.
TrainedStack train_stack(const RunConfig& cfg, const CorpusSplit& split,
                         std::uint64_t seed);

// Trains one text expert exactly as train_stack would (same derived seeds,
// so the result is bit-identical to the stack's member). When the plan
// expert is configured to train on generated summaries, the summary expert
// is trained internally first.
std::pair<TinyLM<double>, TrainCurve> train_expert(const RunConfig& cfg,
                                                   const CorpusSplit& split,
                                                   ExpertRole role,
                                                   std::uint64_t seed);

// ---------------------------------------------------------------- cascade

// One held-out case's journey through the three stages. The hash pairs
// document what each boundary emitted and consumed; outside bypass mode
// they match exactly. Wall-clock timings are reported per stage and are the
// only non-reproducible fields.
struct CaseTrace {
  std::string case_id;
  std::string report;   // stage-1 input
  std::string summary;  // stage-1 output
  std::string plan;     // stage-2 output
  std::string mask_ref;  // artifact-relative path of the predicted mask
  std::string stage1_out_hash, stage2_in_hash;
  std::string stage2_out_hash, stage3_in_hash;
  double t_summary_s = 0.0, t_plan_s = 0.0, t_seg_s = 0.0;
  bool failed = false;
  std::string failure;  // empty unless failed

  Json to_json() const;
};

struct CascadeTrace {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<CaseTrace> cases;  // case-id order

  Json to_json() const;
};

struct CascadeResult {
  CascadeTrace trace;
  MetricsReport report;
  // Aligned with trace.cases: predictions, preprocessed references, and the
  // reference texts, kept so artifact writing needs no corpus access.
  std::vector<MaskGrid> masks;
  std::vector<MaskGrid> gt_masks;
  std::vector<std::string> ref_summaries;
  std::vector<std::string> ref_plans;
};

// Runs every held-out case through summarize -> plan -> segment, scoring
// each stage against its reference. An empty stage output is recorded as a
// per-case failure (zero scores, flagged), never a thrown error.
CascadeResult run_cascade(const TrainedStack& stack,
                          std::span<const CaseRecord> test,
                          const RunConfig& cfg, std::uint64_t seed);

// Writes config, expert checkpoints, trace, report, predictions/ and
// references/ under `<root>/seed-<seed>`; returns that directory. The
// prediction and reference layouts are exactly what `evaluate_dirs` reads.
std::string write_run_artifacts(const std::string& root, const RunConfig& cfg,
                                std::uint64_t seed, const TrainedStack& stack,
                                const CascadeResult& result);

// ---------------------------------------------------- experiment harness

// A trained segmentation variant plus the exact training setup it came
// from, so comparisons can verify the setups differ only where intended.
struct SegVariant {
  std::string label;  // row label in comparison reports
  SegModel<double> model;
  PromptBank<double> bank;
  TrainSegConfig train_config;
};

// Trains one segmentation variant against a frozen conditioning LM, with
// per-stage seeds derived exactly as train_stack derives them. The loss
// curve is reported through `curve_out` when requested.
SegVariant train_seg_variant(const RunConfig& cfg, const CorpusSplit& split,
                             const TinyLM<double>& cond_lm,
                             const TrainSegConfig& tc, std::uint64_t seed,
                             std::string label, TrainCurve* curve_out = nullptr);

// One evaluation case for the clean-versus-generated comparison: the same
// volume and reference mask conditioned on either text.
struct ConsistencyCase {
  std::string case_id;
  VolumeGrid vol;  // preprocessed
  MaskGrid mask;
  std::string clean_plan;      // reference plan text
  std::string generated_plan;  // cascade-produced plan text
};

// Builds consistency cases for the held-out split: clean plans are the
// references, generated plans come from the stack's two text stages.
std::vector<ConsistencyCase> consistency_cases(
    std::span<const CaseRecord> cases, const TrainedStack& stack,
    const RunConfig& cfg);

// Evaluates both variants on clean and generated conditioning text and
// reports the four Dice/IoU cells plus per-variant clean-minus-generated
// difference rows, all with bootstrap intervals. The variants must share
// every setting except the training objective (and its weight); anything
// else differing is a validation error. Rows appear in argument order, so
// swapping the variants swaps the rows exactly.
Json run_consistency_analysis(const RunConfig& cfg, const SegVariant& a,
                              const SegVariant& b,
                              const TinyLM<double>& cond_lm,
                              std::span<const ConsistencyCase> cases);

// ------------------------------------------------------------- ablations

enum class AblationAxis { kNoiseType, kAlpha, kObjective, kExpertStrategy };

std::string to_string(AblationAxis a);
AblationAxis ablation_axis_from_string(const std::string& s);

// Trains and evaluates every cell along one axis with shared seeds and
// reports plan-stage quality (ROUGE-L against reference plans and rubric
// totals) per cell. Cell catalogs: noise_type {uniform, gaussian}, alpha
// {5, 10, 15}, objective {vanilla, neftune, ceftune}, expert_strategy
// {separate, unified}. Rerunning with the same config reproduces every
// cell.
Json run_ablation_grid(const RunConfig& cfg, const CorpusSplit& split,
                       AblationAxis axis);

// Aligned-text rendering of an ablation grid for terminals and logs.
std::string render_ablation_table(const Json& grid);

// ------------------------------------------------------- file evaluation

// Settings for directory-based evaluation (the CLI `eval` verb).
struct EvalOptions {
  std::vector<std::string> metrics{"rouge1", "rouge2", "rougeL",     "dice",
                                   "iou",    "hd95",   "surface_dice"};
  double surface_tolerance_mm = 3.0;
  BootstrapSpec bootstrap;
};

// Scores a directory of predictions against same-named reference files:
// every `*.txt` pair feeds the ROUGE metrics, every `*.mask` pair feeds the
// volumetric metrics. A reference without a prediction counts as a flagged
// zero-score, mirroring the cascade's failure policy.
MetricsReport evaluate_dirs(const std::string& pred_dir,
                            const std::string& gt_dir,
                            const EvalOptions& opt);

// ------------------------------------------------------ expert artifacts

// Self-describing expert containers: the raw model checkpoint wrapped with
// its role, training setup, loss curves, and the producing config's hash.
Json lm_expert_to_json(const TinyLM<double>& model, ExpertRole role,
                       const TrainLMConfig& tc, const TrainCurve& curve,
                       const std::string& config_hash);
std::pair<TinyLM<double>, ExpertRole> lm_expert_from_json(const Json& j);

Json seg_expert_to_json(const SegModel<double>& model,
                        const PromptBank<double>& bank,
                        const TinyLM<double>& cond_lm,
                        const TrainSegConfig& tc, const TrainCurve& curve,
                        const std::string& config_hash);
SegVariant seg_expert_from_json(const Json& j, const TinyLM<double>& cond_lm);

}  // namespace rtflow
