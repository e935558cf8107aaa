// Config-driven experiments: per seed, train (or load) each model, draw and
// filter test samples, run every configured attack, and write per-sample
// CSVs, per-model reports, a manifest and a cross-seed summary.
//
// Output layout under ExperimentConfig::out:
//   manifest.json                  config hash, seeds, versions, wall times
//   summary.json, summary.csv      mean and std over seeds, one row per table cell
//   seed-<s>/<model>.ckpt
//   seed-<s>/<model>.samples.csv   model,attack,sample_id,run,metric,value
//   seed-<s>/<model>.report.json

#ifndef CBMLAB_HARNESS_HPP
#define CBMLAB_HARNESS_HPP

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbmlab/attack.hpp"
#include "cbmlab/checkpoint.hpp"
#include "cbmlab/dataset.hpp"
#include "cbmlab/defense.hpp"
#include "cbmlab/model.hpp"
#include "cbmlab/train.hpp"

namespace cbm {

// Invalid or unresolvable configuration (exit code 1 in the CLI).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DataKind { kConceptMnist, kBlob };

std::string to_string(DataKind k);

struct DataConfig {
  DataKind kind = DataKind::kConceptMnist;
  // Relative paths resolve against the data root.
  std::filesystem::path images = "mnist5k/images-idx3-ubyte.gz";
  std::filesystem::path labels = "mnist5k/labels-idx1-ubyte.gz";
  std::filesystem::path shape_table;  // empty: built-in table
  std::uint64_t split_seed = 0;
  std::size_t blob_samples = 3000;
  std::uint64_t blob_seed = 0;
};

struct NamedAttack {
  std::string name;
  AttackSpec spec;
};

// Model kinds: "standard" is trained with `train`, "rcl" with `rcl`.
struct ExperimentConfig {
  std::string name = "experiment";
  std::string preset = "cmnist";
  DataConfig data;
  ConceptNet concept_net = ConceptNet::kConv;
  std::size_t conv_channels = 32;
  TrainConfig train;
  RclConfig rcl;
  std::vector<std::string> models{"standard", "rcl"};
  std::vector<NamedAttack> attacks;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t samples = 500;  // test draw per seed, before filtering
  std::size_t workers = 1;
  bool reuse_checkpoints = true;
  std::filesystem::path out = "runs";

  // Throws ConfigError. Resolves data paths against `data_root`.
  void validate(const std::filesystem::path& data_root) const;
};

// Built-in presets: "cmnist" (C-MNIST, 3 seeds) and "blob" (synthetic
// 12x12 corpus, small and fast).
ExperimentConfig preset_config(const std::string& preset);

// Parses `[section]` / `key = value` text on top of a preset (the
// `experiment.preset` key, else `fallback_preset`). Comments take whole
// lines starting with '#' or ';'. Throws ConfigError.
ExperimentConfig parse_config(const std::string& text, const std::string& fallback_preset = "cmnist");
ExperimentConfig load_config(const std::filesystem::path& path, const std::string& fallback_preset = "cmnist");

// Canonical text form listing every field; parse_config(to_ini(c)) == c.
std::string to_ini(const ExperimentConfig& config);
// SHA-256 of to_ini, lowercase hex.
std::string config_hash(const ExperimentConfig& config);

// CBM_DATA_ROOT if set, else the build-time default.
std::filesystem::path default_data_root();

DatasetSplit load_data(const ExperimentConfig& config, const std::filesystem::path& data_root);
Architecture architecture_for(const ExperimentConfig& config, const DatasetSplit& data);

// "standard" -> paradigm name ("joint", ...); "rcl" -> "rcl-<paradigm>".
std::string model_label(const ExperimentConfig& config, const std::string& kind);

// Trains a fresh model of `kind` for `seed`: g and f seeds 2s+1 and 2s+2,
// mini-batch order seeded by s.
CbmModel train_model(const ExperimentConfig& config, const DatasetSplit& data, const std::string& kind,
                     std::uint64_t seed);

// Checkpoint record for a model from train_model, as run_experiment saves it.
Checkpoint make_checkpoint(const ExperimentConfig& config, const DatasetSplit& data, const CbmModel& model,
                           const std::string& kind, std::uint64_t seed);

// ---- reports --------------------------------------------------------------

// Aggregate of one attack on one model for one seed.
struct AttackReport {
  std::string attack;
  AttackGoal goal = AttackGoal::kErasure;
  std::size_t runs = 0;
  std::size_t targets = 0;
  std::size_t flipped = 0;
  double flip_pct = 0.0;                 // 100 * flipped / targets, pooled over targets
  double flip_pct_per_sample = 0.0;      // mean over samples of each sample's flipped share
  std::optional<double> introduced_pct;  // mean over runs with a non-empty original set
  std::optional<double> retained_pct;
  double jsi = 0.0;                      // mean over runs
  double avg_delta = 0.0;                // mean over runs of the per-run mean |score change|
  double min_delta = 0.0;                // mean over runs of the per-run min |score change|
  double max_linf = 0.0;
  std::size_t budget_violations = 0;
  std::size_t range_violations = 0;
  std::size_t prediction_changes = 0;
  std::map<std::string, std::size_t> stops;
};

struct ModelReport {
  std::uint64_t seed = 0;
  std::string model;
  double task_error = 0.0;
  double concept_error = 0.0;
  std::size_t drawn = 0;
  std::size_t kept = 0;
  std::size_t skipped_wrong_prediction = 0;
  std::size_t skipped_low_concept_accuracy = 0;
  bool no_attackable_samples = false;
  std::vector<AttackReport> attacks;
};

// Seeded draw of min(n, size) test indices, in draw order.
std::vector<std::size_t> draw_samples(std::size_t test_size, std::size_t n, std::uint64_t seed);

// Filters the draw, runs every attack and writes `<model>.samples.csv`
// under `dir` (when non-empty).
ModelReport attack_model(const ExperimentConfig& config, const DatasetSplit& data, const CbmModel& model,
                         const std::string& label, std::uint64_t seed, const std::filesystem::path& dir);

std::string report_json(const ModelReport& r);
ModelReport parse_report_json(const std::string& text);

struct SummaryCell {
  std::string table;  // erasure | introduction | confounding
  std::string model;
  std::string attack;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;
  std::size_t seeds = 0;
};

std::vector<SummaryCell> summarize(const std::vector<ModelReport>& reports);
std::string summary_csv(const std::vector<SummaryCell>& cells);
std::string summary_json(const std::vector<SummaryCell>& cells);

// Reads every seed-*/<model>.report.json under `out` and writes
// summary.csv and summary.json there. Returns the cells.
std::vector<SummaryCell> write_summary(const std::filesystem::path& out);

struct ExperimentResult {
  std::vector<ModelReport> reports;
  std::vector<SummaryCell> summary;
  std::map<std::uint64_t, std::string> failures;  // seed -> error
};

// Runs every seed; a failing seed is recorded and the others continue.
// Throws std::runtime_error only when every seed fails.
ExperimentResult run_experiment(const ExperimentConfig& config, const std::filesystem::path& data_root);

}  // namespace cbm

#endif  // CBMLAB_HARNESS_HPP
