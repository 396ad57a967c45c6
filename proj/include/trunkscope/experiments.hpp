// Experiment orchestration: batch configs, the experiment families, result
// files with resume journals, the compaction filter and summaries.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "trunkscope/interventions.hpp"
#include "trunkscope/pipeline.hpp"
#include "trunkscope/trunk.hpp"

namespace trunkscope {

// Invalid configuration; field() is the dotted path, e.g. "experiment:sweep.blocks".
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class ExperimentError : public Error {
 public:
  using Error::Error;
};

enum class ExperimentKind {
  full_patch,
  single_block_sweep,
  reverse_patch,
  pathway_ablation,
  freeze_writein,
  charge_steer,
  same_charge_steer,
  distance_steer,
  scale_sweep,
  redirection,
  contributions,
  probe_train,
  dataset_build,
};
std::string_view experiment_kind_name(ExperimentKind k);
std::optional<ExperimentKind> parse_experiment_kind(std::string_view name);

// Metric names a result row may carry.
const std::vector<std::string>& metric_vocabulary();
bool is_known_metric(std::string_view name);

struct DataConfig {
  std::filesystem::path structures;
  std::optional<std::filesystem::path> culling;
  std::string weights = "random:7";  // file path, random:<seed> or staged:<seed>
  int recycles = 0;
  Readout readout = Readout::softplus;
  std::optional<double> decoder_bias;
  std::uint64_t seed = 0;
  std::filesystem::path out = "results";
  MinerThresholds miner;
  PairingRules pairing;
};

// Every kind-specific key, parsed. Keys a kind does not accept keep their
// defaults.
struct ExperimentSettings {
  std::optional<std::vector<int>> blocks;  // unset: all blocks
  std::vector<Track> tracks{Track::s, Track::z};
  bool touch_mask = false;
  bool self_donor = false;
  bool require_full_success = false;
  bool sweep = false;  // reverse_patch: per block instead of all blocks
  Pathway pathway = Pathway::seq2pair;
  int window = 4;
  Track patch_track = Track::s;
  int patch_block = 0;
  int freeze_end = 4;
  double strength = 3.0;
  int arm = 7;
  int direction_block = 0;
  std::vector<double> factors{0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0};
  double lambda = 1e-3;
};

struct ExperimentSpec {
  std::string id;
  ExperimentKind kind = ExperimentKind::full_patch;
  ExperimentSettings settings;
};

struct BatchConfig {
  DataConfig data;
  std::vector<ExperimentSpec> experiments;  // in file order
};

// INI text: a [data] section and one [experiment:<id>] section per
// experiment. Relative paths resolve against base_dir. Paths are checked
// for existence here.
BatchConfig parse_config(std::string_view text, const std::filesystem::path& base_dir);
BatchConfig load_config(const std::filesystem::path& path);

// --seed beats TRUNKSCOPE_SEED beats the config value.
std::uint64_t resolve_seed(std::uint64_t config_seed, std::optional<std::uint64_t> flag_seed,
                           const char* env_value);

TrunkWeights resolve_weights(const DataConfig& data);

struct ResultRow {
  std::string experiment;
  std::string unit;  // resume key, unique within an experiment
  std::string target;
  std::string donor;
  std::string variant;
  std::optional<int> block;
  std::optional<Window> window;
  std::string metric;
  double value = 0.0;
  std::string flags;  // ';'-joined, e.g. rg_collapse
  std::string error;  // error code of a failed unit
};

inline constexpr int kResultsSchemaVersion = 1;
std::string results_header();
std::string result_row_csv(const ResultRow& row);
std::vector<ResultRow> parse_results_csv(std::string_view text);

struct RgCheck {
  double ratio = 1.0;
  bool collapsed = false;
};
inline constexpr double kRgCollapseRatio = 0.9;
// Flags rg < 0.9 * baseline. Throws ExperimentError without a baseline.
RgCheck rg_check(double rg, std::optional<double> baseline_rg);
// Adds rg_collapse to the flags of every row when the check fails.
void rg_filter(std::vector<ResultRow>& rows, const RgCheck& check);

struct BatchOptions {
  int jobs = 1;
  bool resume = false;
  std::vector<std::string> only;  // experiment ids; empty runs all
};

struct ExperimentReport {
  std::string id;
  std::filesystem::path results;
  int units = 0;
  int resumed_units = 0;
  int failed_units = 0;
  int rows = 0;
};

struct BatchReport {
  std::vector<ExperimentReport> experiments;
  std::vector<std::string> warnings;
  int failed_units() const;
};

// Runs the selected experiments into data.out/<id>.csv, each with a
// <id>.journal of completed units. Rows come out in unit order whatever
// the job count.
BatchReport run_batch(const BatchConfig& config, const BatchOptions& options = {});

// Dataset files written by dataset_build: hairpins.csv, targets.csv,
// manifest.csv, rejections.csv.
struct DatasetFiles {
  int hairpins = 0;
  int targets = 0;
  int manifest_rows = 0;
  int rejections = 0;
};
DatasetFiles build_dataset(const DataConfig& data, const std::filesystem::path& out_dir, int jobs = 1,
                           bool with_manifest = true);

// Count, mean and sample standard deviation, mergeable across shards.
struct Accumulator {
  long count = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x);
  void merge(const Accumulator& other);
  double std_dev() const;  // NaN below two samples
};

struct SummaryKey {
  std::string experiment;
  std::string variant;
  std::string metric;
  std::optional<int> block;
  std::optional<Window> window;

  auto tie() const {
    return std::tuple(experiment, variant, metric, block.value_or(-1), window ? window->begin : -1,
                      window ? window->end : -1);
  }
  friend bool operator<(const SummaryKey& a, const SummaryKey& b) { return a.tie() < b.tie(); }
};
using Summary = std::map<SummaryKey, Accumulator>;

// Finite values of rows without an error or an rg_collapse flag.
void accumulate(Summary& summary, const std::vector<ResultRow>& rows);
std::string summary_csv(const Summary& summary);

}  // namespace trunkscope
