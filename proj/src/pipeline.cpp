#include "rtflow/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "rtflow/sentence.hpp"

namespace rtflow {

namespace {

const std::set<std::string>& metric_catalog() {
  static const std::set<std::string> k{"rouge", "rouge1",       "rouge2",
                                       "rougeL", "dice",        "iou",
                                       "hd95",   "surface_dice", "rubric"};
  return k;
}

// "rouge" in a selection enables all three ROUGE variants at once.
bool wants(const std::vector<std::string>& selection, const std::string& name) {
  for (const auto& s : selection) {
    if (s == name) return true;
    if (s == "rouge" && name.rfind("rouge", 0) == 0) return true;
  }
  return false;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

void write_text(const std::string& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("cannot write '" + path + "'");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error("short write to '" + path + "'");
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string to_string(ExpertRole r) {
  switch (r) {
    case ExpertRole::kSummary: return "summary";
    case ExpertRole::kPlan: return "plan";
  }
  throw InvalidInput("unknown expert role");
}

ExpertRole expert_role_from_string(const std::string& s) {
  if (s == "summary") return ExpertRole::kSummary;
  if (s == "plan") return ExpertRole::kPlan;
  throw ValidationError("unknown expert role '" + s + "'");
}

// ------------------------------------------------------------- run config

void RunConfig::validate() const {
  if (seeds.empty()) throw ConfigError("RunConfig: need at least one seed");
  if (val_cases < 1 || test_cases < 1)
    throw ConfigError("RunConfig: val and test splits must be non-empty");
  if (corpus.n_cases <= val_cases + test_cases)
    throw ConfigError("RunConfig: corpus too small for the requested splits");
  lm.validate();
  seg.validate();
  if (seg.text_dim != lm.embed_dim)
    throw ConfigError("RunConfig: seg text width must match the LM embedding width");
  if (encoder_dim <= 0) throw ConfigError("RunConfig: encoder_dim must be positive");
  if (max_new_tokens < 0)
    throw ConfigError("RunConfig: max_new_tokens must be non-negative");
  if (infer_window.h <= 0 || infer_window.w <= 0 || infer_window.s <= 0)
    throw ConfigError("RunConfig: inference window must be positive");
  if (!(infer_overlap >= 0.0 && infer_overlap < 1.0))
    throw ConfigError("RunConfig: inference overlap must be in [0, 1)");
  if (surface_tolerance_mm <= 0.0)
    throw ConfigError("RunConfig: surface tolerance must be positive");
  if (metrics.empty()) throw ConfigError("RunConfig: metric set must not be empty");
  for (const auto& m : metrics)
    if (!metric_catalog().count(m))
      throw ValidationError("RunConfig: unknown metric '" + m + "'");
  if (bootstrap.resamples <= 0 ||
      !(bootstrap.level > 0.0 && bootstrap.level < 1.0))
    throw ConfigError("RunConfig: bad bootstrap settings");
  if (out_dir.empty()) throw ConfigError("RunConfig: out_dir must not be empty");
}

Json RunConfig::to_json() const {
  return Json{{"seeds", seeds},
              {"corpus", corpus_config_to_json(corpus)},
              {"val_cases", val_cases},
              {"test_cases", test_cases},
              {"lm", lm.to_json()},
              {"seg", seg.to_json()},
              {"preprocess", preprocess.to_json()},
              {"summary_train", summary_train.to_json()},
              {"plan_train", plan_train.to_json()},
              {"seg_train", seg_train.to_json()},
              {"train_plan_on_generated", train_plan_on_generated},
              {"encoder_dim", encoder_dim},
              {"max_new_tokens", max_new_tokens},
              {"infer_window", {infer_window.h, infer_window.w, infer_window.s}},
              {"infer_overlap", infer_overlap},
              {"gt_summary_bypass", gt_summary_bypass},
              {"metrics", metrics},
              {"surface_tolerance_mm", surface_tolerance_mm},
              {"bootstrap", bootstrap.to_json()},
              {"out_dir", out_dir}};
}

RunConfig RunConfig::from_json(const Json& j) {
  RunConfig c;
  c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c.corpus = corpus_config_from_json(j.at("corpus"));
  c.val_cases = j.at("val_cases").get<int>();
  c.test_cases = j.at("test_cases").get<int>();
  c.lm = LMConfig::from_json(j.at("lm"));
  c.seg = SegConfig::from_json(j.at("seg"));
  c.preprocess = PreprocessConfig::from_json(j.at("preprocess"));
  c.summary_train = TrainLMConfig::from_json(j.at("summary_train"));
  c.plan_train = TrainLMConfig::from_json(j.at("plan_train"));
  c.seg_train = TrainSegConfig::from_json(j.at("seg_train"));
  c.train_plan_on_generated = j.at("train_plan_on_generated").get<bool>();
  c.encoder_dim = j.at("encoder_dim").get<int>();
  c.max_new_tokens = j.at("max_new_tokens").get<int>();
  c.infer_window = Dims3{j.at("infer_window").at(0).get<int>(),
                         j.at("infer_window").at(1).get<int>(),
                         j.at("infer_window").at(2).get<int>()};
  c.infer_overlap = j.at("infer_overlap").get<double>();
  c.gt_summary_bypass = j.at("gt_summary_bypass").get<bool>();
  c.metrics = j.at("metrics").get<std::vector<std::string>>();
  c.surface_tolerance_mm = j.at("surface_tolerance_mm").get<double>();
  c.bootstrap = BootstrapSpec::from_json(j.at("bootstrap"));
  c.out_dir = j.at("out_dir").get<std::string>();
  c.validate();
  return c;
}

std::string resolve_out_dir(const std::string& out_dir) {
  if (out_dir.empty() || std::filesystem::path(out_dir).is_absolute())
    return out_dir;
  const char* root = std::getenv("RTFLOW_OUT_ROOT");
  if (!root || !*root) return out_dir;
  return (std::filesystem::path(root) / out_dir).string();
}

// ---------------------------------------------------------- data plumbing

CorpusSplit split_corpus(std::vector<CaseRecord> cases, const RunConfig& cfg) {
  cfg.validate();
  const int n = static_cast<int>(cases.size());
  if (n <= cfg.val_cases + cfg.test_cases)
    throw InvalidInput("split_corpus: corpus smaller than the requested splits");
  CorpusSplit out;
  const int n_train = n - cfg.val_cases - cfg.test_cases;
  out.train.assign(std::make_move_iterator(cases.begin()),
                   std::make_move_iterator(cases.begin() + n_train));
  out.val.assign(std::make_move_iterator(cases.begin() + n_train),
                 std::make_move_iterator(cases.begin() + n_train + cfg.val_cases));
  out.test.assign(std::make_move_iterator(cases.begin() + n_train + cfg.val_cases),
                  std::make_move_iterator(cases.end()));
  return out;
}

std::vector<ExpertSample> expert_samples(std::span<const CaseRecord> cases,
                                         ExpertRole role) {
  std::vector<ExpertSample> out;
  out.reserve(cases.size());
  for (const auto& c : cases) {
    if (role == ExpertRole::kSummary)
      out.push_back({c.id, {std::string(instruction_for_summary()), c.report,
                            c.summary}});
    else
      out.push_back({c.id, {std::string(instruction_for_plan()), c.summary,
                            c.plan}});
  }
  return out;
}

std::vector<ExpertSample> plan_samples_from_generated(
    std::span<const CaseRecord> cases, const TinyLM<double>& summary_expert,
    int max_new_tokens) {
  std::vector<ExpertSample> out;
  out.reserve(cases.size());
  for (const auto& c : cases) {
    const std::string gen = summary_expert.generate(
        std::string(instruction_for_summary()), c.report, max_new_tokens);
    out.push_back({c.id, {std::string(instruction_for_plan()), gen, c.plan}});
  }
  return out;
}

std::vector<SegCase> seg_cases(std::span<const CaseRecord> cases,
                               const PreprocessConfig& pre) {
  std::vector<SegCase> out;
  out.reserve(cases.size());
  for (const auto& c : cases)
    out.push_back({c.id, preprocess_volume(c.volume_hu, pre),
                   preprocess_mask(c.mask, pre), c.plan});
  return out;
}

// ---------------------------------------------------------- trained stack

std::pair<TinyLM<double>, TrainCurve> train_expert(const RunConfig& cfg,
                                                   const CorpusSplit& split,
                                                   ExpertRole role,
                                                   std::uint64_t seed) {
  cfg.validate();
  if (split.train.empty() || split.val.empty())
    throw InvalidInput("train_expert: train and val splits must be non-empty");
  const Vocab vocab = Vocab::build(grammar_vocabulary());
  const SentenceEncoder enc(vocab, cfg.encoder_dim, EncoderMode::kBagOfTokens,
                            derive_seed(seed, "sentence-encoder"));

  if (role == ExpertRole::kSummary) {
    TinyLM<double> model(vocab, cfg.lm, derive_seed(seed, "init-summary"));
    TrainLMConfig tc = cfg.summary_train;
    tc.seed = derive_seed(seed, "train-summary");
    const auto tr = expert_samples(split.train, role);
    const auto va = expert_samples(split.val, role);
    TrainCurve curve = train_lm(model, std::span<const ExpertSample>(tr),
                                std::span<const ExpertSample>(va), tc, &enc);
    return {std::move(model), std::move(curve)};
  }

  TinyLM<double> model(vocab, cfg.lm, derive_seed(seed, "init-plan"));
  TrainLMConfig tc = cfg.plan_train;
  tc.seed = derive_seed(seed, "train-plan");
  std::vector<ExpertSample> tr;
  if (cfg.train_plan_on_generated) {
    auto [summary, curve] = train_expert(cfg, split, ExpertRole::kSummary, seed);
    tr = plan_samples_from_generated(split.train, summary, cfg.max_new_tokens);
  } else {
    tr = expert_samples(split.train, ExpertRole::kPlan);
  }
  const auto va = expert_samples(split.val, ExpertRole::kPlan);
  TrainCurve curve = train_lm(model, std::span<const ExpertSample>(tr),
                              std::span<const ExpertSample>(va), tc, &enc);
  return {std::move(model), std::move(curve)};
}

TrainedStack train_stack(const RunConfig& cfg, const CorpusSplit& split,
                         std::uint64_t seed) {
  cfg.validate();
  if (split.train.empty() || split.val.empty() || split.test.empty())
    throw InvalidInput("train_stack: every split must be non-empty");

  auto [summary, sum_curve] = train_expert(cfg, split, ExpertRole::kSummary, seed);

  // The plan expert is trained inline so the generated-summaries option can
  // reuse the expert above instead of training it twice; seed derivation
  // matches train_expert exactly, so the result is the same either way.
  const SentenceEncoder enc(summary.vocab(), cfg.encoder_dim,
                            EncoderMode::kBagOfTokens,
                            derive_seed(seed, "sentence-encoder"));
  TinyLM<double> plan(summary.vocab(), cfg.lm, derive_seed(seed, "init-plan"));
  TrainLMConfig pc = cfg.plan_train;
  pc.seed = derive_seed(seed, "train-plan");
  const std::vector<ExpertSample> plan_train_samples =
      cfg.train_plan_on_generated
          ? plan_samples_from_generated(split.train, summary, cfg.max_new_tokens)
          : expert_samples(split.train, ExpertRole::kPlan);
  const auto plan_val = expert_samples(split.val, ExpertRole::kPlan);
  TrainCurve plan_curve =
      train_lm(plan, std::span<const ExpertSample>(plan_train_samples),
               std::span<const ExpertSample>(plan_val), pc, &enc);

  SegModel<double> seg(cfg.seg, derive_seed(seed, "init-seg"));
  PromptBank<double> bank(cfg.seg.n_prompts, cfg.seg.text_dim,
                          derive_seed(seed, "prompts"));
  TrainSegConfig gc = cfg.seg_train;
  gc.seed = derive_seed(seed, "train-seg");
  const auto seg_train_cases = seg_cases(split.train, cfg.preprocess);
  const auto seg_val_cases = seg_cases(split.val, cfg.preprocess);
  TrainCurve seg_curve =
      train_seg(seg, bank, plan, std::span<const SegCase>(seg_train_cases),
                std::span<const SegCase>(seg_val_cases), gc);

  return TrainedStack{std::move(summary), std::move(plan),     std::move(seg),
                      std::move(bank),    std::move(sum_curve),
                      std::move(plan_curve), std::move(seg_curve)};
}

// ---------------------------------------------------------------- cascade

Json CaseTrace::to_json() const {
  return Json{{"case_id", case_id},
              {"report", report},
              {"summary", summary},
              {"plan", plan},
              {"mask_ref", mask_ref},
              {"stage1_out_hash", stage1_out_hash},
              {"stage2_in_hash", stage2_in_hash},
              {"stage2_out_hash", stage2_out_hash},
              {"stage3_in_hash", stage3_in_hash},
              {"timings_s", Json{{"summary", t_summary_s},
                                 {"plan", t_plan_s},
                                 {"seg", t_seg_s}}},
              {"failed", failed},
              {"failure", failure}};
}

Json CascadeTrace::to_json() const {
  Json arr = Json::array();
  for (const auto& c : cases) arr.push_back(c.to_json());
  return Json{{"kind", "cascade-trace"},
              {"format_version", 1},
              {"config_hash", config_hash},
              {"seed", seed},
              {"cases", std::move(arr)}};
}

CascadeResult run_cascade(const TrainedStack& stack,
                          std::span<const CaseRecord> test,
                          const RunConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (test.empty()) throw InvalidInput("run_cascade: no held-out cases");

  std::vector<const CaseRecord*> order;
  order.reserve(test.size());
  for (const auto& c : test) order.push_back(&c);
  std::sort(order.begin(), order.end(),
            [](const CaseRecord* a, const CaseRecord* b) { return a->id < b->id; });

  CascadeResult out;
  out.trace.config_hash = cfg.hash();
  out.trace.seed = seed;

  std::map<std::string, std::vector<double>> values;
  auto push = [&](const std::string& name, double v) {
    values[name].push_back(v);
  };
  MetricsReport& rep = out.report;

  for (const CaseRecord* cp : order) {
    const CaseRecord& c = *cp;
    const VolumeGrid vol = preprocess_volume(c.volume_hu, cfg.preprocess);
    const MaskGrid gt = preprocess_mask(c.mask, cfg.preprocess);

    CaseTrace t;
    t.case_id = c.id;
    t.report = c.report;
    t.mask_ref = "predictions/" + c.id + ".mask";

    auto clock0 = std::chrono::steady_clock::now();
    t.summary = stack.summary.generate(std::string(instruction_for_summary()),
                                       c.report, cfg.max_new_tokens);
    t.t_summary_s = seconds_since(clock0);
    t.stage1_out_hash = text_hash(t.summary);

    // Stage 2 consumes either the freshly generated summary or, in bypass
    // mode, the reference one; the trace hashes record what was consumed.
    const std::string& stage2_in = cfg.gt_summary_bypass ? c.summary : t.summary;
    t.stage2_in_hash = text_hash(stage2_in);

    if (stage2_in.empty()) {
      t.failed = true;
      t.failure = "stage 1 produced no text";
    } else {
      clock0 = std::chrono::steady_clock::now();
      t.plan = stack.plan.generate(std::string(instruction_for_plan()),
                                   stage2_in, cfg.max_new_tokens);
      t.t_plan_s = seconds_since(clock0);
      t.stage2_out_hash = text_hash(t.plan);
      if (t.plan.empty()) {
        t.failed = true;
        t.failure = "stage 2 produced no text";
      }
    }

    MaskGrid pred = MaskGrid::zeros(gt.dims, gt.spacing, VoxelUnit::kLabel);
    if (!t.failed) {
      t.stage3_in_hash = text_hash(t.plan);
      clock0 = std::chrono::steady_clock::now();
      pred = sliding_window_infer(stack.seg, stack.prompts, stack.plan, vol,
                                  t.plan, cfg.infer_window, cfg.infer_overlap);
      t.t_seg_s = seconds_since(clock0);
    }

    // Scores. A failed case contributes zero to every selected metric and
    // is flagged; successful cases may still raise degenerate-input flags.
    if (t.failed) {
      rep.flags.push_back(c.id + ": " + t.failure);
      for (const char* m :
           {"summary_rouge1", "summary_rouge2", "summary_rougeL",
            "plan_rouge1", "plan_rouge2", "plan_rougeL"}) {
        const std::string name(m);
        if (wants(cfg.metrics, name.substr(name.find('_') + 1))) push(name, 0.0);
      }
      if (wants(cfg.metrics, "dice")) push("dice", 0.0);
      if (wants(cfg.metrics, "iou")) push("iou", 0.0);
      if (wants(cfg.metrics, "hd95")) push("hd95", 0.0);
      if (wants(cfg.metrics, "surface_dice")) push("surface_dice", 0.0);
      if (wants(cfg.metrics, "rubric")) {
        push("rubric_total", 0.0);
        RubricResult zero;
        zero.parse_failed = true;
        rep.rubric_rows.push_back(
            Json{{"case_id", c.id}, {"scores", zero.to_json()}});
      }
    } else {
      const struct {
        const char* name;
        RougeVariant v;
      } kRouges[] = {{"rouge1", RougeVariant::kRouge1},
                     {"rouge2", RougeVariant::kRouge2},
                     {"rougeL", RougeVariant::kRougeL}};
      for (const auto& r : kRouges) {
        if (!wants(cfg.metrics, r.name)) continue;
        push("summary_" + std::string(r.name),
             rouge(t.summary, c.summary, r.v).f1);
        push("plan_" + std::string(r.name), rouge(t.plan, c.plan, r.v).f1);
      }
      if (wants(cfg.metrics, "dice") || wants(cfg.metrics, "iou")) {
        const OverlapScore ov = dice_iou(pred, gt);
        if (wants(cfg.metrics, "dice")) push("dice", ov.dice);
        if (wants(cfg.metrics, "iou")) push("iou", ov.iou);
        if (ov.both_empty)
          rep.flags.push_back(c.id + ": dice/iou both-empty convention");
      }
      if (wants(cfg.metrics, "hd95")) {
        const SurfaceDistanceResult hd = hd95(pred, gt);
        push("hd95", hd.value);
        if (hd.empty_mask)
          rep.flags.push_back(c.id + ": hd95 empty-mask convention");
      }
      if (wants(cfg.metrics, "surface_dice")) {
        const SurfaceDistanceResult sd =
            surface_dice(pred, gt, cfg.surface_tolerance_mm);
        push("surface_dice", sd.value);
        if (sd.empty_mask)
          rep.flags.push_back(c.id + ": surface_dice empty-mask convention");
      }
      if (wants(cfg.metrics, "rubric")) {
        const RubricResult rub = score_plan_rubrics(t.plan, c.fields);
        push("rubric_total", static_cast<double>(rub.total()));
        rep.rubric_rows.push_back(
            Json{{"case_id", c.id}, {"scores", rub.to_json()}});
      }
    }

    out.trace.cases.push_back(std::move(t));
    out.masks.push_back(std::move(pred));
    out.gt_masks.push_back(gt);
    out.ref_summaries.push_back(c.summary);
    out.ref_plans.push_back(c.plan);
  }

  for (const auto& [name, vals] : values)
    rep.metrics[name] = summarize_metric(name, vals, cfg.bootstrap);
  rep.config = Json{{"config_hash", cfg.hash()},
                    {"seed", seed},
                    {"metrics", cfg.metrics},
                    {"surface_tolerance_mm", cfg.surface_tolerance_mm},
                    {"bootstrap", cfg.bootstrap.to_json()},
                    {"gt_summary_bypass", cfg.gt_summary_bypass}};
  return out;
}

std::string write_run_artifacts(const std::string& root, const RunConfig& cfg,
                                std::uint64_t seed, const TrainedStack& stack,
                                const CascadeResult& result) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(root) / ("seed-" + std::to_string(seed));
  fs::create_directories(dir / "predictions");
  fs::create_directories(dir / "references");

  const std::string hash = cfg.hash();
  save_json((dir / "config.json").string(),
            Json{{"config", cfg.to_json()}, {"config_hash", hash}, {"seed", seed}});
  save_json((dir / "summary-expert.json").string(),
            lm_expert_to_json(stack.summary, ExpertRole::kSummary,
                              cfg.summary_train, stack.summary_curve, hash));
  save_json((dir / "plan-expert.json").string(),
            lm_expert_to_json(stack.plan, ExpertRole::kPlan, cfg.plan_train,
                              stack.plan_curve, hash));
  save_json((dir / "seg-expert.json").string(),
            seg_expert_to_json(stack.seg, stack.prompts, stack.plan,
                               cfg.seg_train, stack.seg_curve, hash));
  save_json((dir / "trace.json").string(), result.trace.to_json());
  save_json((dir / "report.json").string(), result.report.to_json());

  for (std::size_t i = 0; i < result.trace.cases.size(); ++i) {
    const CaseTrace& t = result.trace.cases[i];
    write_text((dir / "predictions" / (t.case_id + ".summary.txt")).string(),
               t.summary);
    write_text((dir / "predictions" / (t.case_id + ".plan.txt")).string(),
               t.plan);
    save_mask((dir / "predictions" / (t.case_id + ".mask")).string(),
              result.masks[i]);
    write_text((dir / "references" / (t.case_id + ".summary.txt")).string(),
               result.ref_summaries[i]);
    write_text((dir / "references" / (t.case_id + ".plan.txt")).string(),
               result.ref_plans[i]);
    save_mask((dir / "references" / (t.case_id + ".mask")).string(),
              result.gt_masks[i]);
  }
  return dir.string();
}

// ---------------------------------------------------- experiment harness

SegVariant train_seg_variant(const RunConfig& cfg, const CorpusSplit& split,
                             const TinyLM<double>& cond_lm,
                             const TrainSegConfig& tc, std::uint64_t seed,
                             std::string label, TrainCurve* curve_out) {
  SegModel<double> model(cfg.seg, derive_seed(seed, "init-seg"));
  PromptBank<double> bank(cfg.seg.n_prompts, cfg.seg.text_dim,
                          derive_seed(seed, "prompts"));
  TrainSegConfig t = tc;
  t.seed = derive_seed(seed, "train-seg");
  const auto tr = seg_cases(split.train, cfg.preprocess);
  const auto va = seg_cases(split.val, cfg.preprocess);
  TrainCurve curve =
      train_seg(model, bank, cond_lm, std::span<const SegCase>(tr),
                std::span<const SegCase>(va), t);
  if (curve_out) *curve_out = std::move(curve);
  return SegVariant{std::move(label), std::move(model), std::move(bank), t};
}

std::vector<ConsistencyCase> consistency_cases(
    std::span<const CaseRecord> cases, const TrainedStack& stack,
    const RunConfig& cfg) {
  std::vector<ConsistencyCase> out;
  out.reserve(cases.size());
  for (const auto& c : cases) {
    const std::string gen_summary = stack.summary.generate(
        std::string(instruction_for_summary()), c.report, cfg.max_new_tokens);
    const std::string gen_plan = stack.plan.generate(
        std::string(instruction_for_plan()), gen_summary, cfg.max_new_tokens);
    out.push_back({c.id, preprocess_volume(c.volume_hu, cfg.preprocess),
                   preprocess_mask(c.mask, cfg.preprocess), c.plan, gen_plan});
  }
  return out;
}

Json run_consistency_analysis(const RunConfig& cfg, const SegVariant& a,
                              const SegVariant& b,
                              const TinyLM<double>& cond_lm,
                              std::span<const ConsistencyCase> cases) {
  cfg.validate();
  if (cases.empty())
    throw InvalidInput("run_consistency_analysis: no evaluation cases");
  if (a.model.config().to_json() != b.model.config().to_json())
    throw ValidationError(
        "run_consistency_analysis: variants use different model configs");
  Json ta = a.train_config.to_json(), tb = b.train_config.to_json();
  for (const char* key : {"objective", "lambda"}) {
    ta.erase(key);
    tb.erase(key);
  }
  if (ta != tb)
    throw ValidationError(
        "run_consistency_analysis: variants differ beyond the consistency "
        "objective");

  std::vector<std::string> flags;
  auto infer_or_zero = [&](const SegVariant& v, const ConsistencyCase& c,
                           const std::string& plan, const char* which) {
    if (plan.empty()) {
      flags.push_back(c.case_id + ": empty " + which + " text for '" +
                      v.label + "'; scoring an empty mask");
      return MaskGrid::zeros(c.mask.dims, c.mask.spacing, VoxelUnit::kLabel);
    }
    return sliding_window_infer(v.model, v.bank, cond_lm, c.vol, plan,
                                cfg.infer_window, cfg.infer_overlap);
  };

  auto row_of = [&](const SegVariant& v) {
    std::vector<double> dice_clean, iou_clean, dice_gen, iou_gen, dice_diff,
        iou_diff;
    for (const auto& c : cases) {
      const OverlapScore cl =
          dice_iou(infer_or_zero(v, c, c.clean_plan, "clean plan"), c.mask);
      const OverlapScore gen = dice_iou(
          infer_or_zero(v, c, c.generated_plan, "generated plan"), c.mask);
      dice_clean.push_back(cl.dice);
      iou_clean.push_back(cl.iou);
      dice_gen.push_back(gen.dice);
      iou_gen.push_back(gen.iou);
      dice_diff.push_back(cl.dice - gen.dice);
      iou_diff.push_back(cl.iou - gen.iou);
    }
    auto stat = [&](const char* cell, const char* metric,
                    const std::vector<double>& vals) {
      return summarize_metric(v.label + "/" + cell + "/" + metric, vals,
                              cfg.bootstrap)
          .to_json();
    };
    const MetricStat dgap = summarize_metric(v.label + "/difference/dice",
                                             dice_diff, cfg.bootstrap);
    const MetricStat igap =
        summarize_metric(v.label + "/difference/iou", iou_diff, cfg.bootstrap);
    return Json{{"label", v.label},
                {"objective", to_string(v.train_config.objective)},
                {"clean", Json{{"dice", stat("clean", "dice", dice_clean)},
                               {"iou", stat("clean", "iou", iou_clean)}}},
                {"generated", Json{{"dice", stat("generated", "dice", dice_gen)},
                                   {"iou", stat("generated", "iou", iou_gen)}}},
                {"difference",
                 Json{{"dice", dgap.to_json()}, {"iou", igap.to_json()}}},
                {"abs_mean_gap", Json{{"dice", std::fabs(dgap.point)},
                                      {"iou", std::fabs(igap.point)}}}};
  };

  Json rows = Json::array();
  rows.push_back(row_of(a));
  rows.push_back(row_of(b));
  std::vector<std::string> ids;
  for (const auto& c : cases) ids.push_back(c.case_id);
  return Json{{"kind", "consistency-analysis"},
              {"format_version", 1},
              {"config_hash", cfg.hash()},
              {"case_ids", ids},
              {"rows", std::move(rows)},
              {"flags", flags}};
}

// ------------------------------------------------------------- ablations

std::string to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::kNoiseType: return "noise_type";
    case AblationAxis::kAlpha: return "alpha";
    case AblationAxis::kObjective: return "objective";
    case AblationAxis::kExpertStrategy: return "expert_strategy";
  }
  throw InvalidInput("unknown ablation axis");
}

AblationAxis ablation_axis_from_string(const std::string& s) {
  if (s == "noise_type") return AblationAxis::kNoiseType;
  if (s == "alpha") return AblationAxis::kAlpha;
  if (s == "objective") return AblationAxis::kObjective;
  if (s == "expert_strategy") return AblationAxis::kExpertStrategy;
  throw ValidationError("unknown ablation axis '" + s + "'");
}

Json run_ablation_grid(const RunConfig& cfg, const CorpusSplit& split,
                       AblationAxis axis) {
  cfg.validate();
  if (split.train.empty() || split.val.empty() || split.test.empty())
    throw InvalidInput("run_ablation_grid: every split must be non-empty");

  std::vector<std::string> cells;
  switch (axis) {
    case AblationAxis::kNoiseType: cells = {"uniform", "gaussian"}; break;
    case AblationAxis::kAlpha: cells = {"5", "10", "15"}; break;
    case AblationAxis::kObjective: cells = {"vanilla", "neftune", "ceftune"}; break;
    case AblationAxis::kExpertStrategy: cells = {"separate", "unified"}; break;
  }

  const Vocab vocab = Vocab::build(grammar_vocabulary());
  const auto sum_train = expert_samples(split.train, ExpertRole::kSummary);
  const auto sum_val = expert_samples(split.val, ExpertRole::kSummary);
  const auto plan_train = expert_samples(split.train, ExpertRole::kPlan);
  const auto plan_val = expert_samples(split.val, ExpertRole::kPlan);

  // Pooled per-case values across seeds, plus per-seed means, keyed by cell.
  std::map<std::string, std::vector<double>> pool_rouge, pool_rubric;
  std::map<std::string, std::vector<double>> seed_rouge, seed_rubric;

  for (const std::uint64_t seed : cfg.seeds) {
    const SentenceEncoder enc(vocab, cfg.encoder_dim, EncoderMode::kBagOfTokens,
                              derive_seed(seed, "sentence-encoder"));

    // The summary expert does not vary along the non-strategy axes, so one
    // training per seed is shared by all those cells.
    TinyLM<double> shared_summary(vocab, cfg.lm, derive_seed(seed, "init-summary"));
    if (axis != AblationAxis::kExpertStrategy) {
      TrainLMConfig sc = cfg.summary_train;
      sc.seed = derive_seed(seed, "train-summary");
      train_lm(shared_summary, std::span<const ExpertSample>(sum_train),
               std::span<const ExpertSample>(sum_val), sc, &enc);
    }

    for (const std::string& cell : cells) {
      const TinyLM<double>* stage1 = &shared_summary;
      const TinyLM<double>* stage2 = nullptr;
      TinyLM<double> cell_summary(vocab, cfg.lm, derive_seed(seed, "init-summary"));
      TinyLM<double> cell_plan(vocab, cfg.lm, derive_seed(seed, "init-plan"));

      if (axis == AblationAxis::kExpertStrategy && cell == "unified") {
        // One model trained on both tasks serves both stages.
        std::vector<ExpertSample> both = sum_train;
        both.insert(both.end(), plan_train.begin(), plan_train.end());
        std::vector<ExpertSample> both_val = sum_val;
        both_val.insert(both_val.end(), plan_val.begin(), plan_val.end());
        TrainLMConfig uc = cfg.plan_train;
        uc.seed = derive_seed(seed, "train-unified");
        train_lm(cell_plan, std::span<const ExpertSample>(both),
                 std::span<const ExpertSample>(both_val), uc, &enc);
        stage1 = &cell_plan;
        stage2 = &cell_plan;
      } else {
        if (axis == AblationAxis::kExpertStrategy) {
          TrainLMConfig sc = cfg.summary_train;
          sc.seed = derive_seed(seed, "train-summary");
          train_lm(cell_summary, std::span<const ExpertSample>(sum_train),
                   std::span<const ExpertSample>(sum_val), sc, &enc);
          stage1 = &cell_summary;
        }
        TrainLMConfig pc = cfg.plan_train;
        pc.seed = derive_seed(seed, "train-plan");
        switch (axis) {
          case AblationAxis::kNoiseType:
            pc.noise.type = noise_type_from_string(cell);
            break;
          case AblationAxis::kAlpha: pc.noise.alpha = std::stod(cell); break;
          case AblationAxis::kObjective:
            pc.objective = objective_from_string(cell);
            break;
          case AblationAxis::kExpertStrategy: break;
        }
        train_lm(cell_plan, std::span<const ExpertSample>(plan_train),
                 std::span<const ExpertSample>(plan_val), pc, &enc);
        stage2 = &cell_plan;
      }

      double seed_r = 0.0, seed_t = 0.0;
      for (const auto& c : split.test) {
        const std::string s = stage1->generate(
            std::string(instruction_for_summary()), c.report, cfg.max_new_tokens);
        const std::string p = stage2->generate(
            std::string(instruction_for_plan()), s, cfg.max_new_tokens);
        const double r = rouge(p, c.plan, RougeVariant::kRougeL).f1;
        const double tot = static_cast<double>(score_plan_rubrics(p, c.fields).total());
        pool_rouge[cell].push_back(r);
        pool_rubric[cell].push_back(tot);
        seed_r += r;
        seed_t += tot;
      }
      seed_rouge[cell].push_back(seed_r / static_cast<double>(split.test.size()));
      seed_rubric[cell].push_back(seed_t / static_cast<double>(split.test.size()));
    }
  }

  const std::string axis_name = to_string(axis);
  Json out_cells = Json::array();
  for (const std::string& cell : cells) {
    const MetricStat r = summarize_metric(
        "ablate/" + axis_name + "/" + cell + "/plan_rougeL", pool_rouge[cell],
        cfg.bootstrap);
    const MetricStat t = summarize_metric(
        "ablate/" + axis_name + "/" + cell + "/rubric_total", pool_rubric[cell],
        cfg.bootstrap);
    out_cells.push_back(Json{{"value", cell},
                             {"plan_rougeL", r.to_json()},
                             {"rubric_total", t.to_json()},
                             {"per_seed", Json{{"plan_rougeL", seed_rouge[cell]},
                                               {"rubric_total", seed_rubric[cell]}}}});
  }
  return Json{{"kind", "ablation-grid"},
              {"format_version", 1},
              {"config_hash", cfg.hash()},
              {"axis", axis_name},
              {"seeds", cfg.seeds},
              {"cases_per_seed", static_cast<int>(split.test.size())},
              {"cells", std::move(out_cells)}};
}

std::string render_ablation_table(const Json& grid) {
  std::size_t val_w = 5;
  for (const auto& cell : grid.at("cells"))
    val_w = std::max(val_w, cell.at("value").get<std::string>().size());

  std::ostringstream os;
  os << "axis: " << grid.at("axis").get<std::string>()
     << "   seeds: " << grid.at("seeds").size()
     << "   cases/seed: " << grid.at("cases_per_seed").get<int>()
     << "   config: " << grid.at("config_hash").get<std::string>() << "\n";
  char line[160];
  std::snprintf(line, sizeof(line), "%-*s  %-26s  %-26s\n",
                static_cast<int>(val_w), "value", "plan_rougeL [CI]",
                "rubric_total [CI]");
  os << line;
  for (const auto& cell : grid.at("cells")) {
    const Json& r = cell.at("plan_rougeL");
    const Json& t = cell.at("rubric_total");
    std::snprintf(line, sizeof(line),
                  "%-*s  %6.4f [%6.4f, %6.4f]   %5.2f [%5.2f, %5.2f]\n",
                  static_cast<int>(val_w),
                  cell.at("value").get<std::string>().c_str(),
                  r.at("point").get<double>(), r.at("ci_low").get<double>(),
                  r.at("ci_high").get<double>(), t.at("point").get<double>(),
                  t.at("ci_low").get<double>(), t.at("ci_high").get<double>());
    os << line;
  }
  return os.str();
}

// ------------------------------------------------------- file evaluation

MetricsReport evaluate_dirs(const std::string& pred_dir,
                            const std::string& gt_dir,
                            const EvalOptions& opt) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(gt_dir))
    throw InvalidInput("evaluate_dirs: '" + gt_dir + "' is not a directory");
  if (!fs::is_directory(pred_dir))
    throw InvalidInput("evaluate_dirs: '" + pred_dir + "' is not a directory");
  if (opt.metrics.empty())
    throw ConfigError("evaluate_dirs: metric set must not be empty");
  for (const auto& m : opt.metrics) {
    if (!metric_catalog().count(m))
      throw ValidationError("evaluate_dirs: unknown metric '" + m + "'");
    if (m == "rubric")
      throw ValidationError(
          "evaluate_dirs: rubric scoring needs case fields, which directories "
          "do not carry");
  }

  std::vector<std::string> text_names, mask_names;
  for (const auto& entry : fs::directory_iterator(gt_dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (entry.path().extension() == ".txt") text_names.push_back(name);
    else if (entry.path().extension() == ".mask") mask_names.push_back(name);
  }
  std::sort(text_names.begin(), text_names.end());
  std::sort(mask_names.begin(), mask_names.end());
  if (text_names.empty() && mask_names.empty())
    throw InvalidInput("evaluate_dirs: no .txt or .mask references in '" +
                       gt_dir + "'");

  MetricsReport rep;
  std::map<std::string, std::vector<double>> values;

  const struct {
    const char* name;
    RougeVariant v;
  } kRouges[] = {{"rouge1", RougeVariant::kRouge1},
                 {"rouge2", RougeVariant::kRouge2},
                 {"rougeL", RougeVariant::kRougeL}};
  for (const std::string& name : text_names) {
    const std::string ref = read_text((fs::path(gt_dir) / name).string());
    std::string cand;
    const fs::path pred_path = fs::path(pred_dir) / name;
    if (fs::is_regular_file(pred_path)) {
      cand = read_text(pred_path.string());
    } else {
      rep.flags.push_back(name + ": missing prediction; scoring empty text");
    }
    for (const auto& r : kRouges) {
      if (!wants(opt.metrics, r.name)) continue;
      const RougeScore sc = rouge(cand, ref, r.v);
      values[r.name].push_back(sc.f1);
      if (sc.degenerate)
        rep.flags.push_back(name + ": degenerate reference for " + r.name);
    }
  }

  for (const std::string& name : mask_names) {
    const MaskGrid gt = load_mask((fs::path(gt_dir) / name).string());
    MaskGrid pred = MaskGrid::zeros(gt.dims, gt.spacing, VoxelUnit::kLabel);
    const fs::path pred_path = fs::path(pred_dir) / name;
    if (fs::is_regular_file(pred_path)) {
      pred = load_mask(pred_path.string());
    } else {
      rep.flags.push_back(name + ": missing prediction; scoring an empty mask");
    }
    if (wants(opt.metrics, "dice") || wants(opt.metrics, "iou")) {
      const OverlapScore ov = dice_iou(pred, gt);
      if (wants(opt.metrics, "dice")) values["dice"].push_back(ov.dice);
      if (wants(opt.metrics, "iou")) values["iou"].push_back(ov.iou);
      if (ov.both_empty)
        rep.flags.push_back(name + ": dice/iou both-empty convention");
    }
    if (wants(opt.metrics, "hd95")) {
      const SurfaceDistanceResult hd = hd95(pred, gt);
      values["hd95"].push_back(hd.value);
      if (hd.empty_mask)
        rep.flags.push_back(name + ": hd95 empty-mask convention");
    }
    if (wants(opt.metrics, "surface_dice")) {
      const SurfaceDistanceResult sd =
          surface_dice(pred, gt, opt.surface_tolerance_mm);
      values["surface_dice"].push_back(sd.value);
      if (sd.empty_mask)
        rep.flags.push_back(name + ": surface_dice empty-mask convention");
    }
  }

  for (const auto& [name, vals] : values)
    rep.metrics[name] = summarize_metric(name, vals, opt.bootstrap);
  rep.config = Json{{"pred_dir", pred_dir},
                    {"gt_dir", gt_dir},
                    {"metrics", opt.metrics},
                    {"surface_tolerance_mm", opt.surface_tolerance_mm},
                    {"bootstrap", opt.bootstrap.to_json()}};
  return rep;
}

// ------------------------------------------------------ expert artifacts

Json lm_expert_to_json(const TinyLM<double>& model, ExpertRole role,
                       const TrainLMConfig& tc, const TrainCurve& curve,
                       const std::string& config_hash) {
  return Json{{"kind", "lm-expert"},
              {"format_version", 1},
              {"role", to_string(role)},
              {"config_hash", config_hash},
              {"train_config", tc.to_json()},
              {"curve", curve.to_json()},
              {"model", model.to_json()}};
}

std::pair<TinyLM<double>, ExpertRole> lm_expert_from_json(const Json& j) {
  if (j.value("kind", "") != "lm-expert")
    throw ValidationError("lm expert: wrong container kind");
  return {TinyLM<double>::from_json(j.at("model")),
          expert_role_from_string(j.at("role").get<std::string>())};
}

Json seg_expert_to_json(const SegModel<double>& model,
                        const PromptBank<double>& bank,
                        const TinyLM<double>& cond_lm,
                        const TrainSegConfig& tc, const TrainCurve& curve,
                        const std::string& config_hash) {
  return Json{{"kind", "seg-expert"},
              {"format_version", 1},
              {"label", to_string(tc.objective)},
              {"config_hash", config_hash},
              {"train_config", tc.to_json()},
              {"curve", curve.to_json()},
              {"checkpoint", seg_checkpoint_to_json(model, bank, cond_lm)}};
}

SegVariant seg_expert_from_json(const Json& j, const TinyLM<double>& cond_lm) {
  if (j.value("kind", "") != "seg-expert")
    throw ValidationError("seg expert: wrong container kind");
  auto [model, bank] = seg_checkpoint_from_json<double>(j.at("checkpoint"), cond_lm);
  TrainSegConfig tc = TrainSegConfig::from_json(j.at("train_config"));
  std::string label = j.value("label", to_string(tc.objective));
  return SegVariant{std::move(label), std::move(model), std::move(bank), tc};
}

}  // namespace rtflow
