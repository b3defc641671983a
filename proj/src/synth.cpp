#include "rtflow/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "rtflow/jsonutil.hpp"
#include "rtflow/text.hpp"

namespace rtflow {

namespace {

constexpr std::string_view kLatWords[] = {"left", "right", "bilateral"};
constexpr std::string_view kSurgeryPhrases[] = {"breast conserving surgery",
                                                "total mastectomy"};
constexpr std::string_view kNodalWords[] = {"", "axillary", "supraclavicular",
                                            "internal mammary"};

const std::vector<DoseScheme> kDoseCatalog = {
    {50.0, 25, "50.0", "25"},
    {42.56, 16, "42.56", "16"},
    {40.05, 15, "40.05", "15"},
    {26.0, 5, "26.0", "5"},
};

const std::vector<std::string> kIntroPool = {
    "The patient is a woman who presented to the radiation oncology "
    "department for adjuvant treatment planning.",
    "A woman was referred to the radiation oncology clinic after surgical "
    "management of breast cancer.",
    "This woman returned to our department to discuss adjuvant radiotherapy.",
};

const std::vector<std::string> kMarginWords = {"clear", "negative"};

const std::vector<std::string> kFillerPool = {
    "Cardiac and lung dose constraints were reviewed.",
    "The patient tolerated prior treatment well.",
    "Respiratory motion management was considered during simulation.",
    "Setup reproducibility was verified at simulation.",
};

std::string_view nodal_finding_sentence(Nodal n) {
  switch (n) {
    case Nodal::kNone:
      return "Ultrasound of the axilla showed no suspicious lymph nodes.";
    case Nodal::kAxillary:
      return "Ultrasound demonstrated suspicious axillary lymph nodes.";
    case Nodal::kSupraclavicular:
      return "Imaging showed involvement of the supraclavicular nodal region.";
    case Nodal::kInternalMammary:
      return "Imaging showed involvement of the internal mammary nodal chain.";
  }
  throw InvalidInput("nodal_finding_sentence: bad enum");
}

std::string nodal_irradiation_phrase(Nodal n) {
  if (n == Nodal::kNone) return "without nodal irradiation";
  return std::string("with ") + std::string(kNodalWords[static_cast<int>(n)]) +
         " nodal irradiation";
}

std::string stage_phrase(const CaseFields& f) {
  return "T" + std::to_string(f.stage_t) + " N" + std::to_string(f.stage_n);
}

std::string dose_phrase(const CaseFields& f) {
  const DoseScheme& d = kDoseCatalog[f.dose_index];
  return std::string(d.gy_text) + " Gy in " + std::string(d.fraction_text) +
         " fractions";
}

// Tumor size in mm drawn from a T-stage dependent range (report detail only).
int lesion_size_mm(int stage_t, RngStream& rng) {
  static constexpr int lo[] = {2, 10, 21, 51, 55};
  static constexpr int hi[] = {9, 19, 49, 80, 90};
  return lo[stage_t] +
         static_cast<int>(rng.index(static_cast<std::uint64_t>(hi[stage_t] - lo[stage_t] + 1)));
}

}  // namespace

std::string_view to_string(Laterality v) {
  switch (v) {
    case Laterality::kLeft: return "left";
    case Laterality::kRight: return "right";
    case Laterality::kBilateral: return "bilateral";
  }
  throw InvalidInput("to_string(Laterality): bad enum");
}
std::string_view to_string(Surgery v) {
  switch (v) {
    case Surgery::kBreastConserving: return "breast_conserving";
    case Surgery::kTotalMastectomy: return "total_mastectomy";
  }
  throw InvalidInput("to_string(Surgery): bad enum");
}
std::string_view to_string(Nodal v) {
  switch (v) {
    case Nodal::kNone: return "none";
    case Nodal::kAxillary: return "axillary";
    case Nodal::kSupraclavicular: return "supraclavicular";
    case Nodal::kInternalMammary: return "internal_mammary";
  }
  throw InvalidInput("to_string(Nodal): bad enum");
}

Laterality laterality_from_string(std::string_view s) {
  for (int i = 0; i < 3; ++i)
    if (s == to_string(static_cast<Laterality>(i))) return static_cast<Laterality>(i);
  throw InvalidInput("unknown laterality '" + std::string(s) + "'");
}
Surgery surgery_from_string(std::string_view s) {
  for (int i = 0; i < 2; ++i)
    if (s == to_string(static_cast<Surgery>(i))) return static_cast<Surgery>(i);
  throw InvalidInput("unknown surgery '" + std::string(s) + "'");
}
Nodal nodal_from_string(std::string_view s) {
  for (int i = 0; i < 4; ++i)
    if (s == to_string(static_cast<Nodal>(i))) return static_cast<Nodal>(i);
  throw InvalidInput("unknown nodal value '" + std::string(s) + "'");
}

const std::vector<DoseScheme>& dose_catalog() { return kDoseCatalog; }

void validate_fields(const CaseFields& f) {
  if (static_cast<int>(f.laterality) < 0 || static_cast<int>(f.laterality) > 2)
    throw InvalidInput("fields: bad laterality");
  if (static_cast<int>(f.surgery) < 0 || static_cast<int>(f.surgery) > 1)
    throw InvalidInput("fields: bad surgery");
  if (static_cast<int>(f.nodal) < 0 || static_cast<int>(f.nodal) > 3)
    throw InvalidInput("fields: bad nodal value");
  if (f.stage_t < 0 || f.stage_t > 4)
    throw InvalidInput("fields: stage_t out of range 0..4");
  if (f.stage_n < 0 || f.stage_n > 3)
    throw InvalidInput("fields: stage_n out of range 0..3");
  if (f.dose_index < 0 ||
      f.dose_index >= static_cast<int>(kDoseCatalog.size()))
    throw InvalidInput("fields: dose_index outside the catalog");
}

std::string render_plan(const CaseFields& f) {
  validate_fields(f);
  const bool bcs = f.surgery == Surgery::kBreastConserving;
  std::string s = "Plan: ";
  s += bcs ? "definitive" : "postoperative";
  s += " radiotherapy to the ";
  s += kLatWords[static_cast<int>(f.laterality)];
  s += bcs ? " whole breast" : " chest wall";
  s += " following ";
  s += kSurgeryPhrases[static_cast<int>(f.surgery)];
  s += ", " + nodal_irradiation_phrase(f.nodal);
  s += ", for stage " + stage_phrase(f) + " disease. Dose " + dose_phrase(f) + ".";
  return s;
}

std::string render_summary(const CaseFields& f) {
  validate_fields(f);
  std::string s = "Summary: invasive carcinoma of the ";
  s += kLatWords[static_cast<int>(f.laterality)];
  s += " breast, stage " + stage_phrase(f) + ", status post ";
  s += kSurgeryPhrases[static_cast<int>(f.surgery)];
  if (f.nodal == Nodal::kNone) {
    s += ", no nodal involvement";
  } else {
    s += ", " + std::string(kNodalWords[static_cast<int>(f.nodal)]) +
         " nodal involvement";
  }
  s += ", planned " + dose_phrase(f) + ".";
  return s;
}

std::string render_report(const CaseFields& f, RngStream& rng) {
  validate_fields(f);
  const bool bcs = f.surgery == Surgery::kBreastConserving;
  std::string s;
  s += kIntroPool[rng.index(kIntroPool.size())];
  s += " Breast MRI demonstrated a " +
       std::to_string(lesion_size_mm(f.stage_t, rng)) +
       " mm enhancing mass in the ";
  s += kLatWords[static_cast<int>(f.laterality)];
  s += " breast. ";
  s += nodal_finding_sentence(f.nodal);
  s += " She underwent ";
  s += kSurgeryPhrases[static_cast<int>(f.surgery)];
  s += " and pathology confirmed invasive carcinoma with " +
       kMarginWords[rng.index(kMarginWords.size())] + " margins.";
  s += " The pathologic stage was " + stage_phrase(f) + ".";
  s += " The multidisciplinary team recommended " + dose_phrase(f) + " to the ";
  s += kLatWords[static_cast<int>(f.laterality)];
  s += bcs ? " whole breast " : " chest wall ";
  s += nodal_irradiation_phrase(f.nodal) + ".";
  if (rng.bernoulli(0.5)) s += " " + kFillerPool[rng.index(kFillerPool.size())];
  return s;
}

ParsedPlan parse_plan(std::string_view text) {
  const std::vector<std::string> toks = tokenize_words(text);
  ParsedPlan p;

  auto unique_hit = [&](auto&& classify) -> std::optional<int> {
    std::set<int> kinds;
    for (const auto& t : toks) {
      int k = classify(t);
      if (k >= 0) kinds.insert(k);
    }
    if (kinds.size() == 1) return *kinds.begin();
    return std::nullopt;
  };

  if (auto k = unique_hit([](const std::string& t) {
        for (int i = 0; i < 3; ++i)
          if (t == kLatWords[i]) return i;
        return -1;
      }))
    p.laterality = static_cast<Laterality>(*k);

  if (auto k = unique_hit([](const std::string& t) {
        if (t == "conserving") return 0;
        if (t == "mastectomy") return 1;
        return -1;
      }))
    p.surgery = static_cast<Surgery>(*k);

  // Nodal: a named station wins; otherwise an explicit "without ... nodal
  // irradiation" marks the no-irradiation arm.
  {
    std::set<int> stations;
    for (const auto& t : toks) {
      if (t == "axillary") stations.insert(1);
      if (t == "supraclavicular") stations.insert(2);
      if (t == "mammary") stations.insert(3);
    }
    if (stations.size() == 1) {
      p.nodal = static_cast<Nodal>(*stations.begin());
    } else if (stations.empty()) {
      const bool without = std::find(toks.begin(), toks.end(), "without") != toks.end();
      const bool nodal = std::find(toks.begin(), toks.end(), "nodal") != toks.end();
      if (without && nodal) p.nodal = Nodal::kNone;
    }
  }

  auto stage_token = [](const std::string& t, char prefix, int hi) -> int {
    if (t.size() == 2 && t[0] == prefix && t[1] >= '0' && t[1] <= '0' + hi)
      return t[1] - '0';
    return -1;
  };
  if (auto k = unique_hit([&](const std::string& t) { return stage_token(t, 't', 4); }))
    p.stage_t = *k;
  if (auto k = unique_hit([&](const std::string& t) { return stage_token(t, 'n', 3); }))
    p.stage_n = *k;

  {
    std::set<int> doses;
    for (const auto& t : toks)
      for (int i = 0; i < static_cast<int>(kDoseCatalog.size()); ++i)
        if (t == kDoseCatalog[i].gy_text) doses.insert(i);
    const bool gy = std::find(toks.begin(), toks.end(), "gy") != toks.end();
    const bool fx = std::find(toks.begin(), toks.end(), "fractions") != toks.end();
    if (doses.size() == 1 && gy && fx) {
      const int i = *doses.begin();
      // The catalog pairs dose and fraction count; both must be present.
      if (std::find(toks.begin(), toks.end(),
                    std::string(kDoseCatalog[i].fraction_text)) != toks.end())
        p.dose_index = i;
    }
  }
  return p;
}

namespace {

std::vector<std::string> collect_tokens(const std::vector<std::string>& texts) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& text : texts)
    for (auto& t : tokenize_words(text))
      if (seen.insert(t).second) out.push_back(t);
  return out;
}

std::vector<std::string> build_plan_vocabulary() {
  std::vector<std::string> texts;
  // Exhaustive plan renders cover every token a canonical plan can emit.
  for (int lat = 0; lat < 3; ++lat)
    for (int sur = 0; sur < 2; ++sur)
      for (int nod = 0; nod < 4; ++nod)
        for (int t = 0; t < 5; ++t)
          for (int n = 0; n < 4; ++n)
            for (int d = 0; d < static_cast<int>(kDoseCatalog.size()); ++d)
              texts.push_back(render_plan(CaseFields{
                  static_cast<Laterality>(lat), static_cast<Surgery>(sur),
                  static_cast<Nodal>(nod), t, n, d}));
  return collect_tokens(texts);
}

std::vector<std::string> build_grammar_vocabulary() {
  std::vector<std::string> texts;
  for (int lat = 0; lat < 3; ++lat)
    for (int sur = 0; sur < 2; ++sur)
      for (int nod = 0; nod < 4; ++nod) {
        CaseFields f{static_cast<Laterality>(lat), static_cast<Surgery>(sur),
                     static_cast<Nodal>(nod), 2, 1, 0};
        texts.push_back(render_summary(f));
        texts.push_back(render_plan(f));
      }
  for (const auto& t : kIntroPool) texts.push_back(t);
  for (const auto& t : kFillerPool) texts.push_back(t);
  for (int n = 0; n < 4; ++n)
    texts.push_back(std::string(nodal_finding_sentence(static_cast<Nodal>(n))));
  texts.push_back(
      "Breast MRI demonstrated a mm enhancing mass in the breast. She "
      "underwent and pathology confirmed invasive carcinoma with clear "
      "negative margins. The pathologic stage was disease. The "
      "multidisciplinary team recommended to the whole breast chest wall.");
  texts.push_back(std::string(instruction_for_summary()));
  texts.push_back(std::string(instruction_for_plan()));
  // Stage tokens, catalog texts, and report numerals (lesion sizes in mm).
  for (int t = 0; t <= 4; ++t) texts.push_back("t" + std::to_string(t));
  for (int n = 0; n <= 3; ++n) texts.push_back("n" + std::to_string(n));
  for (const auto& d : kDoseCatalog)
    texts.push_back(std::string(d.gy_text) + " " + std::string(d.fraction_text));
  for (int i = 0; i <= 100; ++i) texts.push_back(std::to_string(i));
  return collect_tokens(texts);
}

}  // namespace

const std::vector<std::string>& plan_vocabulary() {
  static const std::vector<std::string> v = build_plan_vocabulary();
  return v;
}

const std::vector<std::string>& grammar_vocabulary() {
  static const std::vector<std::string> v = build_grammar_vocabulary();
  return v;
}

std::string_view instruction_for_summary() {
  return "Summarize the clinical report into a concise treatment summary.";
}
std::string_view instruction_for_plan() {
  return "Suggest the radiotherapy treatment strategy for this summary.";
}

// ------------------------------------------------------------ volume synth

namespace {

struct Blob {
  double ch, cw, cs;  // centre, voxel units
  double rh, rw, rs;  // radii, voxel units
};

// Squared normalized distance from the blob centre (1.0 on the surface).
double blob_r2(const Blob& b, int h, int w, int s) {
  const double dh = (h - b.ch) / b.rh;
  const double dw = (w - b.cw) / b.rw;
  const double ds = (s - b.cs) / b.rs;
  return dh * dh + dw * dw + ds * ds;
}

Blob jittered_blob(double fch, double fcw, double fcs, double frh, double frw,
                   double frs, Dims3 d, RngStream& rng) {
  Blob b;
  b.ch = fch * d.h + rng.uniform(-0.045, 0.045) * d.h;
  b.cw = fcw * d.w + rng.uniform(-0.045, 0.045) * d.w;
  b.cs = fcs * d.s + rng.uniform(-0.045, 0.045) * d.s;
  b.rh = frh * d.h + rng.uniform(-0.015, 0.015) * d.h;
  b.rw = frw * d.w + rng.uniform(-0.015, 0.015) * d.w;
  b.rs = frs * d.s + rng.uniform(-0.015, 0.015) * d.s;
  return b;
}

}  // namespace

CaseRecord make_case(const CorpusConfig& cfg, int index) {
  if (index < 0) throw InvalidInput("make_case: negative index");
  if (cfg.raw_dims.h < 8 || cfg.raw_dims.w < 8 || cfg.raw_dims.s < 8)
    throw ConfigError("make_case: raw dims must be at least 8 voxels per axis");

  RngStream case_rng(derive_seed(cfg.seed, "case", static_cast<std::uint64_t>(index)));
  RngStream fields_rng = case_rng.child("fields");
  RngStream geom_rng = case_rng.child("geometry");
  RngStream noise_rng = case_rng.child("noise-field");
  RngStream text_rng = case_rng.child("report-text");

  CaseRecord rec;
  {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "case-%04d", index);
    rec.id = buf;
  }

  // Laterality alternates deterministically with the case index so the corpus
  // is exactly balanced; with bilateral cases enabled, every fifth case is
  // bilateral and the remaining indices still alternate exactly.
  if (cfg.include_bilateral && index % 5 == 4) {
    rec.fields.laterality = Laterality::kBilateral;
  } else {
    const int ordinal = cfg.include_bilateral ? index - index / 5 : index;
    rec.fields.laterality = ordinal % 2 == 0 ? Laterality::kLeft : Laterality::kRight;
  }
  rec.fields.surgery = static_cast<Surgery>(fields_rng.index(2));
  rec.fields.nodal = static_cast<Nodal>(fields_rng.index(4));
  rec.fields.stage_t = static_cast<int>(fields_rng.index(5));
  rec.fields.stage_n = static_cast<int>(fields_rng.index(4));
  rec.fields.dose_index = static_cast<int>(fields_rng.index(kDoseCatalog.size()));

  rec.report = render_report(rec.fields, text_rng);
  rec.summary = render_summary(rec.fields);
  rec.plan = render_plan(rec.fields);

  // Geometry. The lateral axis is h: the left side of the body is h < H/2.
  // Both breast ellipsoids are always visible in the intensity volume, and
  // the optional nodal blob sits at the lateral midline, so the image alone
  // never reveals which side is treated — only the text does. The mask
  // covers the involved side(s) only, plus the midline nodal blob (visible
  // and masked) when nodes are involved. Blob parameters are fractions of
  // the grid so any reasonable raw dims work.
  const Dims3 d = cfg.raw_dims;
  const Blob left_breast =
      jittered_blob(0.25, 0.50, 0.31, 0.14, 0.17, 0.19, d, geom_rng);
  const Blob right_breast =
      jittered_blob(0.75, 0.50, 0.31, 0.14, 0.17, 0.19, d, geom_rng);
  const bool left = rec.fields.laterality != Laterality::kRight;
  const bool right = rec.fields.laterality != Laterality::kLeft;

  std::vector<Blob> visible{left_breast, right_breast};
  std::vector<Blob> target;
  if (left) target.push_back(left_breast);
  if (right) target.push_back(right_breast);
  if (rec.fields.nodal != Nodal::kNone) {
    const Blob nodal =
        jittered_blob(0.50, 0.50, 0.75, 0.075, 0.075, 0.09, d, geom_rng);
    visible.push_back(nodal);
    target.push_back(nodal);
  }

  rec.volume_hu = VolumeGrid::zeros(d, cfg.raw_spacing, VoxelUnit::kHounsfield);
  rec.mask = MaskGrid::zeros(d, cfg.raw_spacing, VoxelUnit::kLabel);
  for (int h = 0; h < d.h; ++h)
    for (int w = 0; w < d.w; ++w)
      for (int s = 0; s < d.s; ++s) {
        double vis_r2 = 1e30, tgt_r2 = 1e30;
        for (const Blob& b : visible) vis_r2 = std::min(vis_r2, blob_r2(b, h, w, s));
        for (const Blob& b : target) tgt_r2 = std::min(tgt_r2, blob_r2(b, h, w, s));
        const double tissue = std::max(0.0, 1.0 - vis_r2);
        // Air background near -1000 HU with soft tissue rising to ~150 HU at
        // blob centres; the noise floor dips below -1000 so downstream
        // clipping is genuinely exercised.
        const double hu = -1000.0 + 1150.0 * tissue + noise_rng.normal(0.0, 25.0);
        rec.volume_hu.at(h, w, s) = static_cast<float>(hu);
        rec.mask.at(h, w, s) = tgt_r2 <= 0.8 ? 1 : 0;
      }
  return rec;
}

std::vector<CaseRecord> make_corpus(const CorpusConfig& cfg) {
  if (cfg.n_cases <= 0) throw ConfigError("make_corpus: n_cases must be positive");
  std::vector<CaseRecord> out;
  out.reserve(cfg.n_cases);
  for (int i = 0; i < cfg.n_cases; ++i) out.push_back(make_case(cfg, i));
  return out;
}

// ---------------------------------------------------------------- corpus IO

namespace {

Json fields_to_json(const CaseFields& f) {
  return Json{{"laterality", std::string(to_string(f.laterality))},
              {"surgery", std::string(to_string(f.surgery))},
              {"nodal", std::string(to_string(f.nodal))},
              {"stage_t", f.stage_t},
              {"stage_n", f.stage_n},
              {"dose_gy", std::string(kDoseCatalog[f.dose_index].gy_text)},
              {"fractions", kDoseCatalog[f.dose_index].fractions}};
}

CaseFields fields_from_json(const Json& j) {
  CaseFields f;
  f.laterality = laterality_from_string(j.at("laterality").get<std::string>());
  f.surgery = surgery_from_string(j.at("surgery").get<std::string>());
  f.nodal = nodal_from_string(j.at("nodal").get<std::string>());
  f.stage_t = j.at("stage_t").get<int>();
  f.stage_n = j.at("stage_n").get<int>();
  const std::string gy = j.at("dose_gy").get<std::string>();
  const int fx = j.at("fractions").get<int>();
  f.dose_index = -1;
  for (int i = 0; i < static_cast<int>(kDoseCatalog.size()); ++i)
    if (gy == kDoseCatalog[i].gy_text && fx == kDoseCatalog[i].fractions)
      f.dose_index = i;
  if (f.dose_index < 0)
    throw ValidationError("corpus: dose scheme not in the catalog");
  validate_fields(f);
  return f;
}

}  // namespace

Json corpus_config_to_json(const CorpusConfig& cfg) {
  return Json{{"n_cases", cfg.n_cases},
              {"seed", cfg.seed},
              {"raw_dims", {cfg.raw_dims.h, cfg.raw_dims.w, cfg.raw_dims.s}},
              {"raw_spacing", {cfg.raw_spacing.h, cfg.raw_spacing.w, cfg.raw_spacing.s}},
              {"include_bilateral", cfg.include_bilateral}};
}

CorpusConfig corpus_config_from_json(const Json& j) {
  CorpusConfig cfg;
  cfg.n_cases = j.at("n_cases").get<int>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.raw_dims = Dims3{j.at("raw_dims").at(0).get<int>(),
                       j.at("raw_dims").at(1).get<int>(),
                       j.at("raw_dims").at(2).get<int>()};
  cfg.raw_spacing = Spacing3{j.at("raw_spacing").at(0).get<double>(),
                             j.at("raw_spacing").at(1).get<double>(),
                             j.at("raw_spacing").at(2).get<double>()};
  cfg.include_bilateral = j.at("include_bilateral").get<bool>();
  return cfg;
}

void write_corpus(const std::string& dir, const CorpusConfig& cfg,
                  const std::vector<CaseRecord>& cases) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "volumes");

  const Json cfg_json = corpus_config_to_json(cfg);
  Json meta{{"format", "rtflow-corpus"},
            {"version", 1},
            {"config", cfg_json},
            {"config_hash", canonical_json_hash(cfg_json)},
            {"n_cases", static_cast<int>(cases.size())}};
  save_json((fs::path(dir) / "meta.json").string(), meta);

  std::ofstream jl((fs::path(dir) / "cases.jsonl").string(), std::ios::trunc);
  if (!jl) throw InvalidInput("cannot write cases.jsonl in '" + dir + "'");
  for (const auto& c : cases) {
    const std::string vol_rel = "volumes/" + c.id + ".vol";
    const std::string mask_rel = "volumes/" + c.id + ".mask";
    save_volume((fs::path(dir) / vol_rel).string(), c.volume_hu);
    save_mask((fs::path(dir) / mask_rel).string(), c.mask);
    Json line{{"id", c.id},         {"fields", fields_to_json(c.fields)},
              {"report", c.report}, {"summary", c.summary},
              {"plan", c.plan},     {"volume", vol_rel},
              {"mask", mask_rel}};
    jl << line.dump() << "\n";
  }
  if (!jl) throw Error("short write to cases.jsonl in '" + dir + "'");
}

LoadedCorpus load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  const Json meta = load_json((fs::path(dir) / "meta.json").string());
  if (meta.value("format", "") != "rtflow-corpus")
    throw ValidationError("'" + dir + "': not a corpus directory");

  LoadedCorpus out;
  out.config = corpus_config_from_json(meta.at("config"));
  out.config_hash = meta.at("config_hash").get<std::string>();

  std::ifstream jl((fs::path(dir) / "cases.jsonl").string());
  if (!jl) throw InvalidInput("cannot open cases.jsonl in '" + dir + "'");
  std::string line;
  while (std::getline(jl, line)) {
    if (line.empty()) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::exception& e) {
      throw ValidationError("cases.jsonl: " + std::string(e.what()));
    }
    CaseRecord c;
    c.id = j.at("id").get<std::string>();
    c.fields = fields_from_json(j.at("fields"));
    c.report = j.at("report").get<std::string>();
    c.summary = j.at("summary").get<std::string>();
    c.plan = j.at("plan").get<std::string>();
    c.volume_hu = load_volume((fs::path(dir) / j.at("volume").get<std::string>()).string());
    c.mask = load_mask((fs::path(dir) / j.at("mask").get<std::string>()).string());
    out.cases.push_back(std::move(c));
  }
  if (static_cast<int>(out.cases.size()) != meta.at("n_cases").get<int>())
    throw ValidationError("'" + dir + "': case count does not match meta.json");
  return out;
}

}  // namespace rtflow
