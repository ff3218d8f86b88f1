// SPDX-License-Identifier: Apache-2.0
//
// Declarative experiment protocols: injection attacks, K-sweep attacks,
// multiple-choice evaluation and the describe-then-classify pipeline.
// Every grid cell has its own derived seed and its own output file, so a
// run can be interrupted and resumed without changing the results.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "advrobust/core.hpp"
#include "advrobust/model.hpp"
#include "advrobust/pgd.hpp"
#include "advrobust/prompt.hpp"

namespace advrobust {

inline constexpr int kConfigSchemaVersion = 1;

enum class Protocol { kInjectionAttack, kKSweep, kMcqEval, kDescribeClassify };

std::string_view to_string(Protocol protocol);
Protocol parse_protocol(std::string_view text);

/// Prompt fields shared by all cells of a protocol; the target comes from
/// the manifest entry and K from the sweep.
struct PromptTemplate {
  std::string base_prompt;
  std::string security_spec;
  std::string repeat_segment;
  std::string prefill;

  PromptSpec instantiate(int repeat_count, std::string target) const;
};

enum class AttackVariation { kColor, kShape, kTexture };
std::string_view to_string(AttackVariation v);
AttackVariation parse_variation(std::string_view text);

struct ManifestEntry {
  std::string item_id;
  std::filesystem::path clean_image;
  std::optional<std::filesystem::path> adversarial_image;
  std::string true_label;
  std::optional<AttackVariation> attack_variation;
  /// Attacker target string; required by the attack protocols.
  std::optional<std::string> target;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  /// JSON document {"entries": [...]}.  Relative image paths resolve
  /// against the manifest's directory; every referenced file must exist.
  static DatasetManifest load(const std::filesystem::path& path);
};

/// Item ids become file names, so they are restricted to [A-Za-z0-9._-]
/// and may not start with a dot.
void validate_item_id(std::string_view item_id);

struct McqSettings {
  int n_options = 30;
  /// One label per line.  Empty means the built-in category list.
  std::optional<std::filesystem::path> label_pool;
  McqTemplate tmpl = McqTemplate::kStandard;
  int nocot_max_tokens = kNoCotMaxTokens;
  int cot_max_tokens = kCotMaxTokens;
};

struct DescribeSettings {
  nlohmann::json describer;
  nlohmann::json classifier;
  /// Optional second classifier recorded under the "cot" compute condition.
  std::optional<nlohmann::json> classifier_high;
  std::string describe_prompt;
  std::optional<std::filesystem::path> labels;
  int describe_max_tokens = kCotMaxTokens;
  int classify_max_tokens = 20;
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  Protocol protocol = Protocol::kKSweep;
  /// Adapter description handed to the registry ({"name": ...}).
  nlohmann::json adapter;
  /// Model label used in reports; defaults to the adapter name.
  std::string model_label;
  AttackConfig attack;
  PromptTemplate prompt;
  std::map<std::string, PromptTemplate> prompts_by_variation;
  std::vector<int> k_values{0};
  std::vector<double> epsilon_values;
  std::vector<int> checkpoints{100, 300};
  std::filesystem::path manifest;
  int replicates = 1;
  std::filesystem::path output_dir;
  std::uint64_t seed = 0;
  int workers = 1;
  McqSettings mcq;
  DescribeSettings describe;
  /// Directory that relative paths in the document resolved against.
  std::filesystem::path base_dir;
};

/// Attack defaults for a protocol: 16/255, 0.1, 300 steps without early
/// stop for injection attacks; 64/255, 0.1, 100 steps with early stop for
/// K sweeps.
AttackConfig attack_preset(Protocol protocol);

ExperimentConfig parse_experiment_config(const nlohmann::json& document,
                                         const std::filesystem::path& base_dir);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Canonical JSON of the fields that determine results (output_dir and
/// workers excluded).
nlohmann::json canonical_json(const ExperimentConfig& config);
std::string run_hash(const ExperimentConfig& config);

Image load_image(const std::filesystem::path& path);
void save_image(const Image& image, const std::filesystem::path& path);

struct RunOptions {
  bool resume = false;
  std::optional<std::uint64_t> seed_override;
  std::optional<std::filesystem::path> out_override;
  /// Stop after this many newly computed cells.
  std::optional<int> max_cells;
  const AdapterRegistry* registry = nullptr;
};

struct RunSummary {
  int cells_total = 0;
  int cells_run = 0;
  int cells_skipped = 0;
  std::vector<std::string> errors;
  bool complete() const { return cells_run + cells_skipped == cells_total; }
};

RunSummary run_injection_attack(const ExperimentConfig& config,
                                const RunOptions& options = {});
RunSummary run_k_sweep(const ExperimentConfig& config,
                       const RunOptions& options = {});
RunSummary run_mcq_eval(const ExperimentConfig& config,
                        const RunOptions& options = {});
RunSummary run_describe_classify(const ExperimentConfig& config,
                                 const RunOptions& options = {});
RunSummary run_experiment(const ExperimentConfig& config,
                          const RunOptions& options = {});

// ---------------------------------------------------------------------------
// Persisted formats

/// Everything an auditor needs to re-run one attack cell.
struct TraceHeader {
  Protocol protocol = Protocol::kKSweep;
  std::string model;
  std::string item_id;
  std::optional<AttackVariation> variation;
  int repeat_count = 0;
  double epsilon = 0.0;
  int replicate = 0;
  bool security_spec = false;
  std::string run_hash;
  std::string config_hash;
  std::uint64_t seed = 0;
  AttackConfig config;
  PromptSpec spec;
};

struct TraceFile {
  TraceHeader header;
  AttackTrace trace;
};

nlohmann::json to_json(const TraceHeader& header);
TraceHeader trace_header_from_json(const nlohmann::json& j);

/// Header line, one {"step","loss","success","linf_dev"} line per step,
/// then a summary line.
void write_trace_file(const std::filesystem::path& path, const TraceFile& file);
TraceFile read_trace_file(const std::filesystem::path& path);

struct EvalRecord {
  std::string item_id;
  std::string data_condition;     // clean | adv
  std::string compute_condition;  // cot | nocot
  std::string raw_output;
  /// Option number (MCQ) or matched label (describe-classify); null on a
  /// parse failure.
  nlohmann::json parsed;
  bool correct = false;
  std::string model;
  std::string true_label;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::optional<std::string> error;
};

nlohmann::json to_json(const EvalRecord& record);
EvalRecord eval_record_from_json(const nlohmann::json& j);
std::vector<EvalRecord> read_eval_records(const std::filesystem::path& path);

/// Writes via a sibling temporary file and rename, so readers never see a
/// torn file.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace advrobust
