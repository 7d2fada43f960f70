#pragma once

#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "barcodemamba/data.hpp"
#include "barcodemamba/probes.hpp"
#include "barcodemamba/synth.hpp"
#include "barcodemamba/training.hpp"

namespace bm {

enum class DataSource { synth, file, bundle };

std::string_view to_string(DataSource s);
DataSource parse_data_source(std::string_view name);

enum class Precision { f32, f64 };

std::string_view to_string(Precision p);
Precision parse_precision(std::string_view name);

// Desk-scale default: n=2, d=32, p=16, state 16.
BackboneConfig default_model();

// Everything one run needs. Serialized as flat `key = value` lines; see
// config_keys() for the full key set.
struct ExperimentConfig {
  std::string run_id = "run";
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  std::filesystem::path out = "runs/run";

  DataSource source = DataSource::synth;
  std::filesystem::path data_path;
  TableFormat data_format = TableFormat::tsv;
  ColumnNames columns;
  std::size_t target_len = kDefaultTargetLength;
  SynthSpec synth;  // used when source = synth; length and seed are taken from the run
  SplitSpec split;  // seed is taken from the run

  std::string tokenizer_kind = "char";
  int tokenizer_k = 6;

  BackboneConfig model = default_model();  // vocab_size 0: derive from the tokenizer
  TrainConfig pretrain;
  TrainConfig finetune;
  Pooling pooling = Pooling::mean;
  ProbeGrid probe;
  int probe_threads = 1;
  int knn_k = 1;
  Metric knn_metric = Metric::cosine;

  Tokenizer tokenizer() const;
  // Backbone config with the vocabulary resolved against the tokenizer.
  BackboneConfig backbone() const;
  SynthSpec synth_spec() const;
  SplitSpec split_spec() const;
  TrainConfig pretrain_config() const;
  TrainConfig finetune_config() const;
  ProbeGrid probe_grid() const;
  std::uint64_t init_seed() const { return seed + 4; }

  // Cross-field checks; throws ConfigError before any work starts.
  void validate() const;

  std::string to_text() const;
  static ExperimentConfig parse(std::string_view text);
  static ExperimentConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

std::vector<std::string> config_keys();

// Applies one `key = value` assignment (the same syntax as a config line).
void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value);

// Headline numbers of one run; NaN marks a metric the run did not produce.
struct RunMetrics {
  std::string tokenizer;  // "char" or "kmer"
  int k = 1;
  std::string objective;
  std::string mixer;
  double finetune_acc = std::numeric_limits<double>::quiet_NaN();
  double linear_probe_acc = std::numeric_limits<double>::quiet_NaN();
  double knn_acc = std::numeric_limits<double>::quiet_NaN();
  double perplexity = std::numeric_limits<double>::quiet_NaN();
  double initial_perplexity = std::numeric_limits<double>::quiet_NaN();
  Index n_layers = 0;
  Index d_model = 0;
  Index params = 0;
  std::string status = "ok";

  nlohmann::json to_json() const;
  static RunMetrics from_json(const nlohmann::json& j);
};

inline constexpr const char* kResultsHeader =
    "tokenizer,k,objective,mixer,finetune_acc,linear_probe_acc,knn_acc,perplexity,n_layers,"
    "d_model,params,status";

std::string results_row(const RunMetrics& m);
RunMetrics parse_results_row(std::string_view line);
std::string results_csv(const std::vector<RunMetrics>& rows);

// Pipeline stages. Each stage writes into cfg.out and reads what earlier
// stages left there.
DatasetBundle prepare_data(const ExperimentConfig& cfg);
// Loads out/data when present, otherwise prepares it.
DatasetBundle run_bundle(const ExperimentConfig& cfg);

nlohmann::json run_pretrain(const ExperimentConfig& cfg);
nlohmann::json run_finetune(const ExperimentConfig& cfg);
nlohmann::json run_probe(const ExperimentConfig& cfg);
// prepare -> pretrain -> finetune -> probe; writes metrics.csv / metrics.json.
RunMetrics run_pipeline(const ExperimentConfig& cfg);
RunMetrics collect_metrics(const ExperimentConfig& cfg);

enum class SweepKind { ablation, scaling };

std::string_view to_string(SweepKind k);
SweepKind parse_sweep_kind(std::string_view name);

struct SweepCell {
  std::string id;
  ExperimentConfig config;
};

// Ablation: tokenizer {char, k=4, 5, 6} x objective {ntp, mlm} x mixer
// {mamba1, mamba2}. Scaling: (n, d) in `scaling_grid` x tokenizer {char, k=6}.
inline const std::vector<std::pair<Index, Index>> kScalingGrid = {{2, 32}, {2, 64}, {4, 64}, {4, 128}};

std::vector<SweepCell> sweep_cells(SweepKind kind, const ExperimentConfig& base,
                                   const std::vector<std::pair<Index, Index>>& scaling_grid = kScalingGrid);

struct SweepOptions {
  int workers = 1;
  bool resume = false;
  // Stop scheduling new cells after this many have run (0 = no limit).
  std::size_t max_cells = 0;
  std::function<void(const SweepCell&)> on_cell_start;
};

struct SweepResult {
  std::vector<RunMetrics> rows;  // cell order
  std::size_t executed = 0;
  std::size_t skipped = 0;
  bool complete = false;
};

// Runs every cell not yet in dir/ledger.jsonl and writes dir/results.csv once
// all cells are recorded.
SweepResult run_sweep(const std::filesystem::path& dir, SweepKind kind,
                      const ExperimentConfig& base, const SweepOptions& opts = {},
                      const std::vector<std::pair<Index, Index>>& scaling_grid = kScalingGrid);

struct LedgerEntry {
  std::string cell;
  RunMetrics metrics;
  std::string error;
};
std::vector<LedgerEntry> read_ledger(const std::filesystem::path& path);

struct SeriesPoint {
  Index params = 0;
  Index n_layers = 0;
  Index d_model = 0;
  double linear_probe_acc = 0;
  double knn_acc = 0;
};

struct ScalingSeries {
  std::string tokenizer;  // "char" or "kmer6" etc.
  std::vector<SeriesPoint> points;  // ascending params
};

// Completed runs under a results directory: results.csv when present,
// otherwise every metrics.csv below it.
std::vector<RunMetrics> collect_results(const std::filesystem::path& dir);
std::vector<ScalingSeries> scaling_series(const std::vector<RunMetrics>& rows);
std::string scaling_svg(const ScalingSeries& series);
// Writes scaling_<tokenizer>.csv/.svg and summary.json into out.
nlohmann::json write_report(const std::filesystem::path& results_dir,
                            const std::filesystem::path& out);

}  // namespace bm
