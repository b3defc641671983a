#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "rtflow/checkpoint.hpp"
#include "rtflow/jsonutil.hpp"
#include "rtflow/pipeline.hpp"

using namespace rtflow;

namespace {

// Small but complete run setup: large enough to exercise every stage and
// every metric, small enough that a full train + cascade takes well under a
// second. Raw slices resample 16 -> 8 under the default 3 mm target, so the
// training crop and the inference window both cover a whole volume.
RunConfig tiny_cfg() {
  RunConfig cfg;
  cfg.seeds = {1};
  cfg.corpus.n_cases = 18;
  cfg.corpus.seed = 13;
  cfg.corpus.raw_dims = Dims3{16, 16, 16};
  cfg.corpus.raw_spacing = Spacing3{1.0, 1.0, 1.5};
  cfg.val_cases = 2;
  cfg.test_cases = 4;
  cfg.lm.embed_dim = 16;
  cfg.lm.layers = 1;
  cfg.lm.heads = 2;
  cfg.lm.context_len = 160;
  cfg.seg.levels = 2;
  cfg.seg.base_channels = 2;
  cfg.seg.text_dim = 16;
  cfg.seg.n_prompts = 2;
  cfg.summary_train.objective = TrainObjective::kNeftune;
  cfg.summary_train.noise.alpha = 5.0;
  cfg.summary_train.consistency.lambda = 0.0;
  cfg.summary_train.epochs = 2;
  cfg.summary_train.batch_size = 4;
  cfg.summary_train.lr = 0.01;
  cfg.plan_train = cfg.summary_train;
  cfg.plan_train.objective = TrainObjective::kCeftune;
  cfg.plan_train.consistency.lambda = 0.5;
  cfg.seg_train.objective = SegObjective::kCeseg;
  cfg.seg_train.noise.alpha = 1.0;
  cfg.seg_train.lambda = 0.5;
  cfg.seg_train.crop = Dims3{16, 16, 8};
  cfg.seg_train.epochs = 1;
  cfg.seg_train.batch_size = 2;
  cfg.seg_train.lr = 1e-3;
  cfg.encoder_dim = 16;
  cfg.max_new_tokens = 40;
  cfg.infer_window = Dims3{16, 16, 8};
  cfg.infer_overlap = 0.25;
  cfg.bootstrap.resamples = 200;
  cfg.bootstrap.seed = 9;
  cfg.out_dir = "run-out";
  return cfg;
}

// One trained stack plus its cascade, built once and shared read-only by
// the tests below so the suite trains as few models as possible.
struct TinyRun {
  RunConfig cfg;
  CorpusSplit split;
  TrainedStack stack;
  CascadeResult out;
};

const TinyRun& tiny_run() {
  static const TinyRun run = [] {
    RunConfig cfg = tiny_cfg();
    CorpusSplit split = split_corpus(make_corpus(cfg.corpus), cfg);
    TrainedStack stack = train_stack(cfg, split, 1);
    CascadeResult out = run_cascade(stack, split.test, cfg, 1);
    return TinyRun{std::move(cfg), std::move(split), std::move(stack),
                   std::move(out)};
  }();
  return run;
}

// Wall-clock timings are the one documented non-reproducible trace field.
Json strip_timings(Json trace) {
  for (auto& c : trace.at("cases")) c.erase("timings_s");
  return trace;
}

template <typename T>
bool grids_equal(const Grid3<T>& a, const Grid3<T>& b) {
  return a.dims == b.dims && a.spacing == b.spacing && a.data == b.data;
}

}  // namespace

TEST_CASE("run config serializes, hashes, and validates") {
  const RunConfig cfg = tiny_cfg();
  const Json j = cfg.to_json();
  const RunConfig back = RunConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.hash() == cfg.hash());
  CHECK(cfg.hash() == cfg.hash());

  // Every field participates in the hash, including the output directory.
  RunConfig mut = cfg;
  mut.summary_train.noise.alpha = 7.0;
  CHECK(mut.hash() != cfg.hash());
  mut = cfg;
  mut.out_dir = "elsewhere";
  CHECK(mut.hash() != cfg.hash());

  RunConfig bad = cfg;
  bad.metrics = {"dice", "bogus"};
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = cfg;
  bad.seg.text_dim = cfg.lm.embed_dim + 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.infer_overlap = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.seeds.clear();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.corpus.n_cases = bad.val_cases + bad.test_cases;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("relative output dirs resolve under the environment root") {
  unsetenv("RTFLOW_OUT_ROOT");
  CHECK(resolve_out_dir("runs/x") == "runs/x");
  setenv("RTFLOW_OUT_ROOT", "/tmp/rtflow-root", 1);
  CHECK(resolve_out_dir("runs/x") == "/tmp/rtflow-root/runs/x");
  CHECK(resolve_out_dir("/abs/path") == "/abs/path");
  unsetenv("RTFLOW_OUT_ROOT");
}

TEST_CASE("corpus splits are ordered, disjoint, and sized") {
  const RunConfig cfg = tiny_cfg();
  const std::vector<CaseRecord> corpus = make_corpus(cfg.corpus);
  const CorpusSplit s1 = split_corpus(corpus, cfg);
  CHECK(s1.train.size() == corpus.size() - 6);
  CHECK(s1.val.size() == 2);
  CHECK(s1.test.size() == 4);

  std::set<std::string> ids;
  for (const auto* part : {&s1.train, &s1.val, &s1.test})
    for (const auto& c : *part) ids.insert(c.id);
  CHECK(ids.size() == corpus.size());

  const CorpusSplit s2 = split_corpus(corpus, cfg);
  for (std::size_t i = 0; i < s1.test.size(); ++i)
    CHECK(s1.test[i].id == s2.test[i].id);

  // A config that is too small for its splits fails its own validation...
  RunConfig small = cfg;
  small.corpus.n_cases = 4;
  CHECK_THROWS_AS(split_corpus(make_corpus(small.corpus), small), ConfigError);
  // ...and a case vector shorter than the config claims is rejected too.
  std::vector<CaseRecord> truncated(corpus.begin(), corpus.begin() + 5);
  CHECK_THROWS_AS(split_corpus(truncated, cfg), InvalidInput);
}

TEST_CASE("expert samples pair the right texts with the right instructions") {
  const TinyRun& r = tiny_run();
  const auto sum = expert_samples(r.split.train, ExpertRole::kSummary);
  const auto plan = expert_samples(r.split.train, ExpertRole::kPlan);
  REQUIRE(sum.size() == r.split.train.size());
  REQUIRE(plan.size() == r.split.train.size());
  for (std::size_t i = 0; i < sum.size(); ++i) {
    const CaseRecord& c = r.split.train[i];
    CHECK(sum[i].case_id == c.id);
    CHECK(sum[i].sample.instruction == instruction_for_summary());
    CHECK(sum[i].sample.input == c.report);
    CHECK(sum[i].sample.target == c.summary);
    CHECK(plan[i].sample.instruction == instruction_for_plan());
    CHECK(plan[i].sample.input == c.summary);
    CHECK(plan[i].sample.target == c.plan);
  }

  // Generated-input plan samples carry the summary expert's output instead
  // of the reference summary.
  const auto gen = plan_samples_from_generated(r.split.test, r.stack.summary,
                                               r.cfg.max_new_tokens);
  REQUIRE(gen.size() == r.split.test.size());
  for (std::size_t i = 0; i < gen.size(); ++i) {
    const CaseRecord& c = r.split.test[i];
    CHECK(gen[i].sample.input ==
          r.stack.summary.generate(std::string(instruction_for_summary()),
                                   c.report, r.cfg.max_new_tokens));
    CHECK(gen[i].sample.target == c.plan);
  }
}

TEST_CASE("training and the cascade reproduce bit-for-bit per seed") {
  const TinyRun& r = tiny_run();
  const TrainedStack again = train_stack(r.cfg, r.split, 1);
  CHECK(again.summary.weights_hash() == r.stack.summary.weights_hash());
  CHECK(again.plan.weights_hash() == r.stack.plan.weights_hash());
  CHECK(again.seg.weights_hash() == r.stack.seg.weights_hash());

  // The standalone expert trainer derives identical per-stage seeds.
  const auto [sum, sum_curve] =
      train_expert(r.cfg, r.split, ExpertRole::kSummary, 1);
  const auto [plan, plan_curve] =
      train_expert(r.cfg, r.split, ExpertRole::kPlan, 1);
  CHECK(sum.weights_hash() == r.stack.summary.weights_hash());
  CHECK(plan.weights_hash() == r.stack.plan.weights_hash());
  CHECK(sum_curve.train_loss == r.stack.summary_curve.train_loss);
  CHECK(plan_curve.val_loss == r.stack.plan_curve.val_loss);

  const CascadeResult out2 = run_cascade(again, r.split.test, r.cfg, 1);
  CHECK(strip_timings(out2.trace.to_json()) ==
        strip_timings(r.out.trace.to_json()));
  CHECK(out2.report.to_json() == r.out.report.to_json());
  REQUIRE(out2.masks.size() == r.out.masks.size());
  for (std::size_t i = 0; i < out2.masks.size(); ++i)
    CHECK(grids_equal(out2.masks[i], r.out.masks[i]));

  // A different stack seed produces genuinely different weights.
  const auto [other, other_curve] =
      train_expert(r.cfg, r.split, ExpertRole::kSummary, 2);
  CHECK(other.weights_hash() != r.stack.summary.weights_hash());
}

TEST_CASE("the cascade records purity hashes and full scores") {
  const TinyRun& r = tiny_run();
  const CascadeTrace& trace = r.out.trace;
  REQUIRE(trace.cases.size() == r.split.test.size());
  CHECK(trace.config_hash == r.cfg.hash());
  CHECK(trace.seed == 1);

  std::vector<std::string> ids;
  for (const CaseTrace& t : trace.cases) {
    ids.push_back(t.case_id);
    CHECK_FALSE(t.failed);
    CHECK(t.failure.empty());
    // Each stage consumed exactly what the previous stage emitted.
    CHECK(t.stage1_out_hash == text_hash(t.summary));
    CHECK(t.stage2_in_hash == t.stage1_out_hash);
    CHECK(t.stage2_out_hash == text_hash(t.plan));
    CHECK(t.stage3_in_hash == t.stage2_out_hash);
  }
  CHECK(std::is_sorted(ids.begin(), ids.end()));

  const auto& m = r.out.report.metrics;
  for (const char* name :
       {"summary_rouge1", "summary_rouge2", "summary_rougeL", "plan_rouge1",
        "plan_rouge2", "plan_rougeL", "dice", "iou", "surface_dice"}) {
    REQUIRE(m.count(name) == 1);
    const MetricStat& s = m.at(name);
    CHECK(s.n == static_cast<long>(trace.cases.size()));
    CHECK(s.point >= 0.0);
    CHECK(s.point <= 1.0);
    CHECK(s.ci_low <= s.point);
    CHECK(s.point <= s.ci_high);
  }
  REQUIRE(m.count("hd95") == 1);
  CHECK(m.at("hd95").point >= 0.0);
  REQUIRE(m.count("rubric_total") == 1);
  CHECK(m.at("rubric_total").point >= 0.0);
  CHECK(m.at("rubric_total").point <= 5.0);
  CHECK(r.out.report.rubric_rows.size() == trace.cases.size());
  CHECK(r.out.report.config.at("config_hash") == r.cfg.hash());
}

TEST_CASE("bypass mode feeds the reference summary to stage two") {
  const TinyRun& r = tiny_run();
  RunConfig cfg = r.cfg;
  cfg.gt_summary_bypass = true;
  const CascadeResult out = run_cascade(r.stack, r.split.test, cfg, 1);

  std::map<std::string, const CaseRecord*> by_id;
  for (const auto& c : r.split.test) by_id[c.id] = &c;
  for (const CaseTrace& t : out.trace.cases) {
    REQUIRE(by_id.count(t.case_id) == 1);
    CHECK(t.stage2_in_hash == text_hash(by_id[t.case_id]->summary));
    CHECK(t.stage1_out_hash == text_hash(t.summary));
    CHECK(t.stage3_in_hash == t.stage2_out_hash);
  }
  CHECK(out.report.config.at("gt_summary_bypass") == true);
  CHECK(out.trace.config_hash != r.out.trace.config_hash);
}

TEST_CASE("an empty stage output fails the case without stopping the run") {
  const TinyRun& r = tiny_run();
  RunConfig cfg = r.cfg;
  cfg.max_new_tokens = 0;  // stage 1 can emit nothing
  const CascadeResult out = run_cascade(r.stack, r.split.test, cfg, 1);

  REQUIRE(out.trace.cases.size() == r.split.test.size());
  for (const CaseTrace& t : out.trace.cases) {
    CHECK(t.failed);
    CHECK(t.failure == "stage 1 produced no text");
  }
  CHECK(out.report.flags.size() >= out.trace.cases.size());
  for (const auto& [name, stat] : out.report.metrics) {
    INFO(name);
    CHECK(stat.point == 0.0);
    CHECK(stat.ci_low == 0.0);
    CHECK(stat.ci_high == 0.0);
  }
  REQUIRE(out.report.rubric_rows.size() == out.trace.cases.size());
  for (const Json& row : out.report.rubric_rows)
    CHECK(row.at("scores").at("parse_failed") == true);
  for (const MaskGrid& m : out.masks)
    CHECK(std::count(m.data.begin(), m.data.end(), 1) == 0);
}

TEST_CASE("run artifacts round trip and evaluate_dirs agrees with the report") {
  namespace fs = std::filesystem;
  const TinyRun& r = tiny_run();
  const std::string root = "test-pipeline-artifacts";
  fs::remove_all(root);
  const std::string dir =
      write_run_artifacts(root, r.cfg, 1, r.stack, r.out);
  CHECK(dir == (fs::path(root) / "seed-1").string());

  const Json cj = load_json(dir + "/config.json");
  CHECK(cj.at("config_hash") == r.cfg.hash());
  const RunConfig back = RunConfig::from_json(cj.at("config"));
  CHECK(back.hash() == r.cfg.hash());

  CHECK(load_json(dir + "/trace.json") == r.out.trace.to_json());
  CHECK(load_json(dir + "/report.json") == r.out.report.to_json());

  const auto [sum, sum_role] =
      lm_expert_from_json(load_json(dir + "/summary-expert.json"));
  CHECK(sum_role == ExpertRole::kSummary);
  CHECK(sum.weights_hash() == r.stack.summary.weights_hash());
  const auto [plan, plan_role] =
      lm_expert_from_json(load_json(dir + "/plan-expert.json"));
  CHECK(plan_role == ExpertRole::kPlan);
  CHECK(plan.weights_hash() == r.stack.plan.weights_hash());

  // The segmentation checkpoint is pinned to its conditioning LM.
  const Json sj = load_json(dir + "/seg-expert.json");
  const SegVariant sv = seg_expert_from_json(sj, r.stack.plan);
  CHECK(sv.model.weights_hash() == r.stack.seg.weights_hash());
  CHECK_THROWS_AS(seg_expert_from_json(sj, r.stack.summary), ValidationError);

  // Saved predictions/references score exactly like the in-memory cascade.
  EvalOptions opt;
  opt.metrics = {"dice", "iou", "hd95", "surface_dice"};
  opt.surface_tolerance_mm = r.cfg.surface_tolerance_mm;
  opt.bootstrap = r.cfg.bootstrap;
  const MetricsReport ev =
      evaluate_dirs(dir + "/predictions", dir + "/references", opt);
  for (const std::string& name : opt.metrics) {
    INFO(name);
    REQUIRE(ev.metrics.count(name) == 1);
    CHECK(ev.metrics.at(name).point == r.out.report.metrics.at(name).point);
    CHECK(ev.metrics.at(name).ci_low == r.out.report.metrics.at(name).ci_low);
    CHECK(ev.metrics.at(name).ci_high == r.out.report.metrics.at(name).ci_high);
  }

  // Missing predictions are flagged zero-scores, and rubric scoring is
  // refused because directories carry no structured fields.
  const std::string lone = root + "/lone";
  fs::create_directories(lone);
  const MetricsReport missing =
      evaluate_dirs(lone, dir + "/references", opt);
  CHECK_FALSE(missing.flags.empty());
  CHECK(missing.metrics.at("dice").point == 0.0);
  EvalOptions rubric_opt;
  rubric_opt.metrics = {"rubric"};
  CHECK_THROWS_AS(evaluate_dirs(lone, dir + "/references", rubric_opt),
                  ValidationError);
  CHECK_THROWS_AS(evaluate_dirs(root + "/nope", dir + "/references", opt),
                  InvalidInput);
  fs::remove_all(root);
}

TEST_CASE("consistency analysis is swap-symmetric and rejects mismatches") {
  const TinyRun& r = tiny_run();
  TrainSegConfig ce = r.cfg.seg_train;
  ce.objective = SegObjective::kCeseg;
  TrainSegConfig ne = ce;
  ne.objective = SegObjective::kNeseg;

  const SegVariant a =
      train_seg_variant(r.cfg, r.split, r.stack.plan, ce, 1, "ceseg");
  const SegVariant b =
      train_seg_variant(r.cfg, r.split, r.stack.plan, ne, 1, "neseg");
  const auto cases = consistency_cases(r.split.test, r.stack, r.cfg);
  REQUIRE(cases.size() == r.split.test.size());
  for (const auto& c : cases) CHECK(c.clean_plan != "");

  const Json r1 = run_consistency_analysis(r.cfg, a, b, r.stack.plan, cases);
  const Json r2 = run_consistency_analysis(r.cfg, b, a, r.stack.plan, cases);
  CHECK(r1.at("kind") == "consistency-analysis");
  CHECK(r1.at("config_hash") == r.cfg.hash());
  CHECK(r1.at("rows").at(0) == r2.at("rows").at(1));
  CHECK(r1.at("rows").at(1) == r2.at("rows").at(0));
  CHECK(r1.at("case_ids") == r2.at("case_ids"));

  for (const Json& row : r1.at("rows")) {
    for (const char* cell : {"clean", "generated", "difference"})
      for (const char* metric : {"dice", "iou"})
        CHECK(row.at(cell).at(metric).contains("point"));
    // The difference row is the mean of per-case clean-minus-generated gaps.
    const double gap = row.at("clean").at("dice").at("point").get<double>() -
                       row.at("generated").at("dice").at("point").get<double>();
    CHECK(row.at("difference").at("dice").at("point").get<double>() ==
          doctest::Approx(gap).epsilon(1e-12));
    CHECK(row.at("abs_mean_gap").at("dice").get<double>() ==
          doctest::Approx(std::fabs(gap)).epsilon(1e-12));
  }

  // Differing only in the objective's weight is still a fair comparison.
  TrainSegConfig ce_light = ce;
  ce_light.lambda = 0.25;
  const SegVariant c =
      train_seg_variant(r.cfg, r.split, r.stack.plan, ce_light, 1, "light");
  CHECK_NOTHROW(run_consistency_analysis(r.cfg, a, c, r.stack.plan, cases));

  // Any other training difference is rejected.
  TrainSegConfig bad = ne;
  bad.crop = Dims3{8, 8, 8};
  const SegVariant d =
      train_seg_variant(r.cfg, r.split, r.stack.plan, bad, 1, "bad-crop");
  CHECK_THROWS_AS(run_consistency_analysis(r.cfg, a, d, r.stack.plan, cases),
                  ValidationError);

  // So is a different architecture.
  RunConfig wide = r.cfg;
  wide.seg.base_channels = 3;
  const SegVariant e =
      train_seg_variant(wide, r.split, r.stack.plan, ne, 1, "wide");
  CHECK_THROWS_AS(run_consistency_analysis(r.cfg, a, e, r.stack.plan, cases),
                  ValidationError);

  CHECK_THROWS_AS(run_consistency_analysis(r.cfg, a, b, r.stack.plan,
                                           std::span<const ConsistencyCase>{}),
                  InvalidInput);
}

TEST_CASE("ablation grids cover their catalogs and reproduce exactly") {
  const TinyRun& r = tiny_run();
  const Json g1 = run_ablation_grid(r.cfg, r.split, AblationAxis::kObjective);
  const Json g2 = run_ablation_grid(r.cfg, r.split, AblationAxis::kObjective);
  CHECK(g1 == g2);
  CHECK(g1.at("kind") == "ablation-grid");
  CHECK(g1.at("axis") == "objective");
  CHECK(g1.at("config_hash") == r.cfg.hash());
  CHECK(g1.at("cases_per_seed") == static_cast<int>(r.split.test.size()));

  REQUIRE(g1.at("cells").size() == 3);
  const std::vector<std::string> expected{"vanilla", "neftune", "ceftune"};
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const Json& cell = g1.at("cells").at(i);
    CHECK(cell.at("value") == expected[i]);
    CHECK(cell.at("plan_rougeL").contains("point"));
    CHECK(cell.at("rubric_total").contains("point"));
    CHECK(cell.at("per_seed").at("plan_rougeL").size() == r.cfg.seeds.size());
  }

  const std::string table = render_ablation_table(g1);
  for (const std::string& v : expected)
    CHECK(table.find(v) != std::string::npos);

  const Json gs =
      run_ablation_grid(r.cfg, r.split, AblationAxis::kExpertStrategy);
  REQUIRE(gs.at("cells").size() == 2);
  CHECK(gs.at("cells").at(0).at("value") == "separate");
  CHECK(gs.at("cells").at(1).at("value") == "unified");

  CHECK(to_string(ablation_axis_from_string("noise_type")) == "noise_type");
  CHECK(to_string(ablation_axis_from_string("alpha")) == "alpha");
  CHECK_THROWS_AS(ablation_axis_from_string("bogus"), ValidationError);
}

TEST_CASE("expert containers identify themselves and check their inputs") {
  namespace fs = std::filesystem;
  const TinyRun& r = tiny_run();
  const std::string hash = r.cfg.hash();

  const Json lj = lm_expert_to_json(r.stack.summary, ExpertRole::kSummary,
                                    r.cfg.summary_train, r.stack.summary_curve,
                                    hash);
  CHECK(container_kind(lj) == "lm-expert");
  CHECK(lj.at("config_hash") == hash);
  const auto [m, role] = lm_expert_from_json(lj);
  CHECK(role == ExpertRole::kSummary);
  CHECK(m.weights_hash() == r.stack.summary.weights_hash());

  const Json sj =
      seg_expert_to_json(r.stack.seg, r.stack.prompts, r.stack.plan,
                         r.cfg.seg_train, r.stack.seg_curve, hash);
  CHECK(container_kind(sj) == "seg-expert");
  const SegVariant sv = seg_expert_from_json(sj, r.stack.plan);
  CHECK(sv.model.weights_hash() == r.stack.seg.weights_hash());

  // Containers refuse to open as the wrong kind.
  Json wrong = lj;
  wrong["kind"] = "seg-expert";
  CHECK_THROWS_AS(lm_expert_from_json(wrong), ValidationError);
  wrong = sj;
  wrong["kind"] = "lm-expert";
  CHECK_THROWS_AS(seg_expert_from_json(wrong, r.stack.plan), ValidationError);
  Json anonymous = lj;
  anonymous.erase("kind");
  CHECK_THROWS_AS(container_kind(anonymous), ValidationError);

  // The generic loader enforces the envelope on disk.
  const std::string dir = "test-pipeline-containers";
  fs::remove_all(dir);
  fs::create_directories(dir);
  save_json(dir + "/expert.json", lj);
  CHECK(load_container(dir + "/expert.json") == lj);
  Json stale = lj;
  stale["format_version"] = 2;
  save_json(dir + "/stale.json", stale);
  CHECK_THROWS_AS(load_container(dir + "/stale.json"), ValidationError);
  fs::remove_all(dir);
}
