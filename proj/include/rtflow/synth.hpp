#pragma once

// Synthetic clinical-style corpus: structured case fields, a closed text
// grammar that renders them into reports / summaries / plans, and paired 3D
// volumes with ground-truth target masks.
//
// The plan grammar is a bijection: render_plan followed by parse_plan
// recovers every field exactly, which is what makes rubric scoring and
// hallucination detection well-defined.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rtflow/jsonutil.hpp"
#include "rtflow/rng.hpp"
#include "rtflow/volume.hpp"

namespace rtflow {

enum class Laterality : int { kLeft = 0, kRight = 1, kBilateral = 2 };
enum class Surgery : int { kBreastConserving = 0, kTotalMastectomy = 1 };
enum class Nodal : int {
  kNone = 0,
  kAxillary = 1,
  kSupraclavicular = 2,
  kInternalMammary = 3,
};

std::string_view to_string(Laterality v);
std::string_view to_string(Surgery v);
std::string_view to_string(Nodal v);
Laterality laterality_from_string(std::string_view s);
Surgery surgery_from_string(std::string_view s);
Nodal nodal_from_string(std::string_view s);

// Fixed prescription catalog. Doses render from the stored decimal text so
// parsing is an exact string match, never float formatting.
struct DoseScheme {
  double gy;
  int fractions;
  std::string_view gy_text;
  std::string_view fraction_text;
};
const std::vector<DoseScheme>& dose_catalog();

struct CaseFields {
  Laterality laterality = Laterality::kLeft;
  Surgery surgery = Surgery::kBreastConserving;
  Nodal nodal = Nodal::kNone;
  int stage_t = 0;    // 0..4
  int stage_n = 0;    // 0..3
  int dose_index = 0; // into dose_catalog()
  bool operator==(const CaseFields&) const = default;
};

// Throws InvalidInput when a field is outside its documented range.
void validate_fields(const CaseFields& f);

// Deterministic canonical renderings (plans and summaries are pure functions
// of the fields; reports add seeded stylistic variation and extra findings).
std::string render_plan(const CaseFields& f);
std::string render_summary(const CaseFields& f);
std::string render_report(const CaseFields& f, RngStream& rng);

// Field extraction from (possibly model-generated) plan text. Each field is
// recovered independently; a field is absent when its evidence is missing or
// ambiguous.
struct ParsedPlan {
  std::optional<Laterality> laterality;
  std::optional<Surgery> surgery;
  std::optional<Nodal> nodal;
  std::optional<int> stage_t;
  std::optional<int> stage_n;
  std::optional<int> dose_index;
  bool complete() const {
    return laterality && surgery && nodal && stage_t && stage_n && dose_index;
  }
};
ParsedPlan parse_plan(std::string_view text);

// Every token a canonical plan can contain (any field combination).
const std::vector<std::string>& plan_vocabulary();
// Every token the whole grammar (reports, summaries, plans, instructions)
// can produce; this is the language model's vocabulary source.
const std::vector<std::string>& grammar_vocabulary();

// Fixed task instructions used when assembling training samples.
std::string_view instruction_for_summary();
std::string_view instruction_for_plan();

// One fully synthesized case: texts plus a raw Hounsfield volume and its
// target mask at generator spacing (preprocessing happens downstream).
struct CaseRecord {
  std::string id;
  CaseFields fields;
  std::string report;
  std::string summary;
  std::string plan;
  VolumeGrid volume_hu;
  MaskGrid mask;
};

struct CorpusConfig {
  int n_cases = 260;
  std::uint64_t seed = 7;
  Dims3 raw_dims{32, 32, 32};
  Spacing3 raw_spacing{1.0, 1.0, 1.5};
  // Bilateral cases are rare and excluded by default; when enabled, every
  // fifth case is bilateral and the rest alternate left/right exactly.
  bool include_bilateral = false;
};

Json corpus_config_to_json(const CorpusConfig& cfg);
CorpusConfig corpus_config_from_json(const Json& j);

// Case `index` of the corpus: content depends only on (config, index), never
// on generation order. Laterality alternates with case index so the corpus
// is exactly balanced.
CaseRecord make_case(const CorpusConfig& cfg, int index);
std::vector<CaseRecord> make_corpus(const CorpusConfig& cfg);

// On-disk corpus: meta.json + cases.jsonl + volumes/*.vol|*.mask.
void write_corpus(const std::string& dir, const CorpusConfig& cfg,
                  const std::vector<CaseRecord>& cases);
struct LoadedCorpus {
  CorpusConfig config;
  std::string config_hash;
  std::vector<CaseRecord> cases;
};
LoadedCorpus load_corpus(const std::string& dir);

}  // namespace rtflow
