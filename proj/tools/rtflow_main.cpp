// Command-line front end. Verbs mirror the library's workflow:
//
//   gen-data              synthesize a corpus and persist it
//   train-lm              fine-tune one text expert on a corpus
//   train-seg             train the text-conditioned segmentation model
//   eval                  score a prediction directory against references
//   cascade               train (or load) a stack and run the full cascade
//   consistency-analysis  clean-vs-generated comparison of two seg variants
//   ablate                single-axis grid over training choices
//
// Run settings come from a JSON run-config file (--config), with a few
// common knobs exposed as flags that override the file. Relative output
// directories resolve under $RTFLOW_OUT_ROOT when that variable is set.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "rtflow/checkpoint.hpp"
#include "rtflow/pipeline.hpp"

namespace {

using namespace rtflow;

// Accepts either a bare RunConfig document or a run artifact's config.json
// ({"config": ..., "config_hash": ...}), so reruns can start from artifacts.
RunConfig load_run_config(const std::string& path) {
  if (path.empty()) return RunConfig{};
  const Json j = load_json(path);
  return RunConfig::from_json(j.contains("config") ? j.at("config") : j);
}

LoadedCorpus corpus_or_generate(const std::string& dir, const RunConfig& cfg) {
  if (!dir.empty()) return load_corpus(dir);
  LoadedCorpus lc;
  lc.config = cfg.corpus;
  lc.config_hash = canonical_json_hash(corpus_config_to_json(cfg.corpus));
  lc.cases = make_corpus(cfg.corpus);
  return lc;
}

void print_report(const MetricsReport& rep) {
  for (const auto& [name, stat] : rep.metrics)
    std::printf("%-18s %8.4f  [%8.4f, %8.4f]  n=%ld\n", name.c_str(),
                stat.point, stat.ci_low, stat.ci_high, stat.n);
  for (const auto& f : rep.flags) std::printf("flag: %s\n", f.c_str());
}

// Shared flag bundle for the two training verbs; fields that stay NaN or -1
// leave the config file's value untouched.
struct TrainOverrides {
  std::string objective;
  std::string noise_type;
  double alpha = -1.0;
  double lambda = -1.0;
  int epochs = -1;
  int batch = -1;
  double lr = -1.0;
  double weight_decay = -1.0;

  void add_flags(CLI::App* cmd) {
    cmd->add_option("--objective", objective, "training objective override");
    cmd->add_option("--noise-type", noise_type, "embedding noise type override");
    cmd->add_option("--alpha", alpha, "noise intensity override");
    cmd->add_option("--lambda", lambda, "consistency weight override");
    cmd->add_option("--epochs", epochs, "epoch count override");
    cmd->add_option("--batch", batch, "batch size override");
    cmd->add_option("--lr", lr, "learning rate override");
    cmd->add_option("--weight-decay", weight_decay, "weight decay override");
  }
  void apply(TrainLMConfig& tc) const {
    if (!objective.empty()) tc.objective = objective_from_string(objective);
    if (!noise_type.empty()) tc.noise.type = noise_type_from_string(noise_type);
    if (alpha >= 0.0) tc.noise.alpha = alpha;
    if (lambda >= 0.0) tc.consistency.lambda = lambda;
    if (epochs > 0) tc.epochs = epochs;
    if (batch > 0) tc.batch_size = batch;
    if (lr > 0.0) tc.lr = lr;
    if (weight_decay >= 0.0) tc.weight_decay = weight_decay;
  }
  void apply(TrainSegConfig& tc) const {
    if (!objective.empty()) tc.objective = seg_objective_from_string(objective);
    if (!noise_type.empty()) tc.noise.type = noise_type_from_string(noise_type);
    if (alpha >= 0.0) tc.noise.alpha = alpha;
    if (lambda >= 0.0) tc.lambda = lambda;
    if (epochs > 0) tc.epochs = epochs;
    if (batch > 0) tc.batch_size = batch;
    if (lr > 0.0) tc.lr = lr;
    if (weight_decay >= 0.0) tc.weight_decay = weight_decay;
  }
};

int run(int argc, char** argv) {
  CLI::App app{"synthetic radiotherapy text+segmentation workbench"};
  app.require_subcommand(1);

  // ------------------------------------------------------------- gen-data
  auto* gen = app.add_subcommand("gen-data", "synthesize and persist a corpus");
  std::string gen_out;
  CorpusConfig gen_cfg;
  std::vector<int> gen_dims{32, 32, 32};
  std::vector<double> gen_spacing{1.0, 1.0, 1.5};
  gen->add_option("--out", gen_out, "corpus directory to write")->required();
  gen->add_option("--n", gen_cfg.n_cases, "number of cases");
  gen->add_option("--seed", gen_cfg.seed, "corpus seed");
  gen->add_option("--dims", gen_dims, "raw grid dims h w s")->expected(3);
  gen->add_option("--spacing", gen_spacing, "raw voxel spacing mm h w s")
      ->expected(3);
  gen->add_flag("--bilateral", gen_cfg.include_bilateral,
                "include bilateral cases");

  // Options shared by the model-producing verbs.
  std::string cfg_path, corpus_dir;
  std::uint64_t seed_flag = 0;
  bool seed_given = false;
  auto add_common = [&](CLI::App* cmd, bool with_corpus) {
    cmd->add_option("--config", cfg_path, "run-config JSON file");
    if (with_corpus)
      cmd->add_option("--corpus", corpus_dir,
                      "corpus directory (generated from config when absent)");
    cmd->add_option_function<std::uint64_t>(
        "--seed",
        [&](const std::uint64_t& v) {
          seed_flag = v;
          seed_given = true;
        },
        "stack seed (default: first seed in the config)");
  };
  auto pick_seed = [&](const RunConfig& cfg) {
    return seed_given ? seed_flag : cfg.seeds.front();
  };

  // ------------------------------------------------------------- train-lm
  auto* tlm = app.add_subcommand("train-lm", "fine-tune one text expert");
  std::string tlm_role, tlm_out;
  TrainOverrides tlm_over;
  add_common(tlm, true);
  tlm->add_option("--role", tlm_role, "summary or plan")->required();
  tlm->add_option("--out", tlm_out, "expert artifact path")->required();
  tlm_over.add_flags(tlm);

  // ------------------------------------------------------------ train-seg
  auto* tsg = app.add_subcommand("train-seg", "train the segmentation model");
  std::string tsg_lm, tsg_out;
  bool tsg_unimodal = false;
  TrainOverrides tsg_over;
  add_common(tsg, true);
  tsg->add_option("--lm", tsg_lm, "conditioning plan-expert artifact")
      ->required();
  tsg->add_option("--out", tsg_out, "seg artifact path")->required();
  tsg->add_flag("--unimodal", tsg_unimodal,
                "drop text conditioning (image-only ablation)");
  tsg_over.add_flags(tsg);

  // ----------------------------------------------------------------- eval
  auto* ev = app.add_subcommand("eval", "score predictions against references");
  std::string ev_pred, ev_gt, ev_out;
  EvalOptions ev_opt;
  ev->add_option("--pred-dir", ev_pred, "prediction directory")->required();
  ev->add_option("--gt-dir", ev_gt, "reference directory")->required();
  ev->add_option("--metrics", ev_opt.metrics, "metric names")->delimiter(',');
  ev->add_option("--bootstrap", ev_opt.bootstrap.resamples, "resample count");
  ev->add_option("--level", ev_opt.bootstrap.level, "confidence level");
  ev->add_option("--seed", ev_opt.bootstrap.seed, "bootstrap seed");
  ev->add_option("--surface-tolerance", ev_opt.surface_tolerance_mm,
                 "surface-dice tolerance in mm");
  ev->add_option("--out", ev_out, "write the report JSON here");

  // -------------------------------------------------------------- cascade
  auto* cas = app.add_subcommand("cascade", "run the three-stage cascade");
  std::string cas_out_dir, cas_summary, cas_plan, cas_seg;
  bool cas_bypass = false;
  add_common(cas, true);
  cas->add_option("--out-dir", cas_out_dir, "artifact root override");
  cas->add_option("--summary-expert", cas_summary, "trained summary artifact");
  cas->add_option("--plan-expert", cas_plan, "trained plan artifact");
  cas->add_option("--seg-expert", cas_seg, "trained seg artifact");
  cas->add_flag("--gt-summary-bypass", cas_bypass,
                "stage 2 consumes reference summaries");

  // ------------------------------------------------- consistency-analysis
  auto* con = app.add_subcommand("consistency-analysis",
                                 "clean vs generated conditioning comparison");
  std::string con_out;
  add_common(con, true);
  con->add_option("--out", con_out, "write the comparison JSON here");

  // --------------------------------------------------------------- ablate
  auto* abl = app.add_subcommand("ablate", "single-axis experiment grid");
  std::string abl_axis, abl_out;
  add_common(abl, true);
  abl->add_option("--axis", abl_axis,
                  "noise_type | alpha | objective | expert_strategy")
      ->required();
  abl->add_option("--out", abl_out, "write the grid JSON here (.txt beside it)");

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    gen_cfg.raw_dims = Dims3{gen_dims[0], gen_dims[1], gen_dims[2]};
    gen_cfg.raw_spacing = Spacing3{gen_spacing[0], gen_spacing[1], gen_spacing[2]};
    const auto cases = make_corpus(gen_cfg);
    write_corpus(gen_out, gen_cfg, cases);
    std::printf("wrote %zu cases to %s\n", cases.size(), gen_out.c_str());
    return 0;
  }

  if (tlm->parsed()) {
    RunConfig cfg = load_run_config(cfg_path);
    const ExpertRole role = expert_role_from_string(tlm_role);
    TrainLMConfig& tc =
        role == ExpertRole::kSummary ? cfg.summary_train : cfg.plan_train;
    tlm_over.apply(tc);
    cfg.validate();
    const std::uint64_t seed = pick_seed(cfg);
    const LoadedCorpus corpus = corpus_or_generate(corpus_dir, cfg);
    const CorpusSplit split = split_corpus(corpus.cases, cfg);
    auto [model, curve] = train_expert(cfg, split, role, seed);
    save_json(tlm_out, lm_expert_to_json(model, role, tc, curve, cfg.hash()));
    std::printf("trained %s expert (seed %llu): final val loss %.4f -> %s\n",
                tlm_role.c_str(), static_cast<unsigned long long>(seed),
                curve.val_loss.empty() ? 0.0 : curve.val_loss.back(),
                tlm_out.c_str());
    return 0;
  }

  if (tsg->parsed()) {
    RunConfig cfg = load_run_config(cfg_path);
    if (tsg_unimodal) cfg.seg.use_text = false;
    tsg_over.apply(cfg.seg_train);
    cfg.validate();
    const std::uint64_t seed = pick_seed(cfg);
    const LoadedCorpus corpus = corpus_or_generate(corpus_dir, cfg);
    const CorpusSplit split = split_corpus(corpus.cases, cfg);
    auto [cond_lm, role] = lm_expert_from_json(load_container(tsg_lm));
    TrainCurve curve;
    const SegVariant v =
        train_seg_variant(cfg, split, cond_lm, cfg.seg_train, seed,
                          to_string(cfg.seg_train.objective), &curve);
    save_json(tsg_out, seg_expert_to_json(v.model, v.bank, cond_lm,
                                          v.train_config, curve, cfg.hash()));
    std::printf(
        "trained seg model (%s conditioning, seed %llu): final val loss %.4f "
        "-> %s\n",
        cfg.seg.use_text ? to_string(role).c_str() : "no",
        static_cast<unsigned long long>(seed),
        curve.val_loss.empty() ? 0.0 : curve.val_loss.back(), tsg_out.c_str());
    return 0;
  }

  if (ev->parsed()) {
    const MetricsReport rep = evaluate_dirs(ev_pred, ev_gt, ev_opt);
    print_report(rep);
    if (!ev_out.empty()) save_json(ev_out, rep.to_json());
    return 0;
  }

  if (cas->parsed()) {
    RunConfig cfg = load_run_config(cfg_path);
    if (cas_bypass) cfg.gt_summary_bypass = true;
    if (!cas_out_dir.empty()) cfg.out_dir = cas_out_dir;
    cfg.validate();
    const std::uint64_t seed = pick_seed(cfg);
    const LoadedCorpus corpus = corpus_or_generate(corpus_dir, cfg);
    const CorpusSplit split = split_corpus(corpus.cases, cfg);

    const int given = (cas_summary.empty() ? 0 : 1) + (cas_plan.empty() ? 0 : 1) +
                      (cas_seg.empty() ? 0 : 1);
    if (given != 0 && given != 3)
      throw InvalidInput(
          "cascade: pass all three expert artifacts or none (train from "
          "config)");

    std::optional<TrainedStack> stack;
    if (given == 3) {
      auto [summary, srole] = lm_expert_from_json(load_container(cas_summary));
      auto [plan, prole] = lm_expert_from_json(load_container(cas_plan));
      if (srole != ExpertRole::kSummary || prole != ExpertRole::kPlan)
        throw ValidationError("cascade: expert artifacts have swapped roles");
      SegVariant v = seg_expert_from_json(load_container(cas_seg), plan);
      stack.emplace(TrainedStack{std::move(summary), std::move(plan),
                                 std::move(v.model), std::move(v.bank),
                                 TrainCurve{}, TrainCurve{}, TrainCurve{}});
    } else {
      stack.emplace(train_stack(cfg, split, seed));
    }

    const CascadeResult result = run_cascade(*stack, split.test, cfg, seed);
    const std::string dir = write_run_artifacts(resolve_out_dir(cfg.out_dir),
                                                cfg, seed, *stack, result);
    int failures = 0;
    for (const auto& t : result.trace.cases) failures += t.failed ? 1 : 0;
    std::printf("cascade over %zu cases (%d failed), artifacts in %s\n",
                result.trace.cases.size(), failures, dir.c_str());
    print_report(result.report);
    return 0;
  }

  if (con->parsed()) {
    RunConfig cfg = load_run_config(cfg_path);
    cfg.validate();
    const std::uint64_t seed = pick_seed(cfg);
    const LoadedCorpus corpus = corpus_or_generate(corpus_dir, cfg);
    const CorpusSplit split = split_corpus(corpus.cases, cfg);
    const TrainedStack stack = train_stack(cfg, split, seed);

    TrainSegConfig with_tc = cfg.seg_train;
    with_tc.objective = SegObjective::kCeseg;
    TrainSegConfig without_tc = cfg.seg_train;
    without_tc.objective = SegObjective::kNeseg;
    const SegVariant with_v = train_seg_variant(cfg, split, stack.plan, with_tc,
                                                seed, to_string(with_tc.objective));
    const SegVariant without_v =
        train_seg_variant(cfg, split, stack.plan, without_tc, seed,
                          to_string(without_tc.objective));
    const auto cases = consistency_cases(split.test, stack, cfg);
    const Json report = run_consistency_analysis(
        cfg, with_v, without_v, stack.plan,
        std::span<const ConsistencyCase>(cases));
    if (!con_out.empty()) save_json(con_out, report);
    for (const auto& row : report.at("rows"))
      std::printf("%-8s clean dice %.4f | generated dice %.4f | gap %.4f\n",
                  row.at("label").get<std::string>().c_str(),
                  row.at("clean").at("dice").at("point").get<double>(),
                  row.at("generated").at("dice").at("point").get<double>(),
                  row.at("abs_mean_gap").at("dice").get<double>());
    return 0;
  }

  if (abl->parsed()) {
    RunConfig cfg = load_run_config(cfg_path);
    cfg.validate();
    const AblationAxis axis = ablation_axis_from_string(abl_axis);
    const LoadedCorpus corpus = corpus_or_generate(corpus_dir, cfg);
    const CorpusSplit split = split_corpus(corpus.cases, cfg);
    const Json grid = run_ablation_grid(cfg, split, axis);
    const std::string table = render_ablation_table(grid);
    if (!abl_out.empty()) {
      save_json(abl_out, grid);
      std::ofstream txt(std::filesystem::path(abl_out).replace_extension(".txt"));
      txt << table;
    }
    std::printf("%s", table.c_str());
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
