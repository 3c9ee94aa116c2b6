#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "metadock/meta.hpp"
#include "metadock/nn.hpp"
#include "metadock/tasks.hpp"

namespace metadock::harness {

// ---------------------------------------------------------------- metrics

/// 1.96 * sample stddev / sqrt(n); 0 for a single value.
double ci95(std::span<const double> values);

/// (acc_train - acc_test) / acc_test * 100. Throws for acc_test <= 0.
double mo_metric(double acc_train, double acc_test);

struct TaskScore {
  double accuracy = 0.0;     ///< percent
  double task_budget = 1.0;  ///< fraction of active kernels after adaptation
};

/// Scores task `index` of a list.
using TaskScorer = std::function<TaskScore(std::size_t index)>;

struct AccuracySummary {
  double mean = 0.0;
  double ci95 = 0.0;
  std::size_t n = 0;
  double mean_task_budget = 0.0;
  std::vector<double> per_task;
};

AccuracySummary summarize(const TaskScorer& scorer, std::size_t n_tasks);

struct EvalReport {
  static constexpr int kVersion = 1;
  double mean_acc = 0.0;  ///< percent, unseen (meta-test) tasks
  double ci95 = 0.0;
  int n_tasks = 0;
  double acc_train_seen = 0.0;   ///< percent, tasks from meta-train classes
  double acc_test_unseen = 0.0;  ///< equals mean_acc
  double mo = 0.0;
  double meta_budget = 0.0;       ///< percent
  double mean_task_budget = 0.0;  ///< percent
  int n_seen_tasks = 0;

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
  bool operator==(const EvalReport&) const = default;
};

/// Generic evaluation: `unseen` over n_unseen tasks, `seen` over n_seen tasks for MO.
/// n_seen == 0 leaves acc_train_seen and mo at NaN.
EvalReport evaluate(const TaskScorer& unseen, std::size_t n_unseen, const TaskScorer& seen, std::size_t n_seen,
                    double meta_budget_fraction);

/// Adapts on the support set and scores the query set.
TaskScore score_episode(const meta::Learner& learner, const meta::MetaState& state, const tasks::TaskEpisode& episode,
                        const meta::HyperParams& hp);

// ---------------------------------------------------------------- configuration

enum class ExperimentKind { kTrain, kSweep, kCompareContinuous, kCompareGlobal, kReport };
std::string to_string(ExperimentKind kind);
ExperimentKind parse_experiment_kind(const std::string& text);

struct DatasetConfig {
  std::string source = "synthetic";  ///< "synthetic" or "raw"
  std::uint64_t seed = 1;
  tasks::SynthOptions synth;
  std::string manifest;  ///< raw dataset manifest path

  bool operator==(const DatasetConfig&) const = default;
};

struct RunConfig {
  static constexpr int kVersion = 1;
  ExperimentKind kind = ExperimentKind::kTrain;
  meta::HyperParams hp;
  tasks::EpisodeSpec episode;    ///< evaluation episodes
  int train_query_per_class = 15;  ///< query size of meta-training episodes
  int width = 32;
  nn::NormalizationSpec norm;
  DatasetConfig dataset;
  std::uint64_t seed = 0;
  /// Unpruned meta-training steps run before the main phase (0 = start from the initial weights).
  int pretrain_steps = 0;
  /// Phase-1 steps of the continuous baseline; the remaining n_outer - phase1 steps finetune.
  int continuous_phase1_steps = 0;
  int val_tasks = 100;
  std::string test_tasks = "600";  ///< "all-test" or a count of sampled tasks
  int seen_tasks = 600;
  std::string output_dir = "metadock_out";
  std::string init_checkpoint;

  nn::ModelConfig model_config() const;
  tasks::EpisodeSpec train_episode() const;
  void validate() const;
  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  bool operator==(const RunConfig&) const = default;
};

RunConfig load_config(const std::filesystem::path& path);

// ---------------------------------------------------------------- checkpoints

struct Checkpoint {
  meta::MetaState state;
  nn::ModelConfig model;
  meta::HyperParams hp;
  std::uint64_t seed = 0;
};

/// Writes `path` (JSON manifest) and `path` + ".bin" (little-endian f64: theta then z).
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------- CSV

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  bool operator==(const CsvTable&) const = default;
};

/// Shortest decimal that parses back to the same double.
std::string format_double(double value);
double parse_double(const std::string& text);

/// Writes a "# metadock-csv version=1" line, the header and the rows.
std::string write_csv(const CsvTable& table);
CsvTable read_csv(const std::string& text);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

// ---------------------------------------------------------------- baselines and reports

/// Binary (+1 keep / -1 drop) masks keeping the ceil(fraction * n) largest scores; ties keep lower indices.
std::vector<double> keep_top_fraction(std::span<const double> scores, double fraction);

struct ContinuousBaselineResult {
  meta::MetaState compressed;  ///< z holds the fixed +-1 masks
  std::vector<double> phase1_masks;
  std::size_t kept = 0;
  meta::RunLog phase1_log;
  meta::RunLog phase3_log;
  /// Hyperparameters for evaluating/finetuning the compressed model (global mode, frozen masks).
  meta::HyperParams compressed_hp;
};

/// (1) meta-train with continuous masks started at 1 plus l1, (2) keep the top target_budget fraction,
/// (3) fold the kept mask values into their kernels and finetune with the kept set fixed.
ContinuousBaselineResult continuous_prune_baseline(const meta::ConvLearner& learner, const meta::MetaState& pretrained,
                                                   const meta::TaskSource& source, const meta::HyperParams& hp,
                                                   double target_budget, int phase1_steps, int phase3_steps);

/// One Cout x Cin matrix per conv layer, row-normalised |kernel slice|_1 * B(mask).
struct UsageMatrix {
  std::size_t layer = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
};

std::vector<UsageMatrix> kernel_usage(const nn::FourConvModel& model, std::span<const double> params,
                                      std::span<const double> masks);
/// Meta-state usage, or the mean over task states when any are given.
std::vector<UsageMatrix> kernel_usage_report(const nn::FourConvModel& model, const meta::MetaState& meta_state,
                                             const std::vector<meta::TaskState>& task_states);
CsvTable usage_csv(const UsageMatrix& matrix);

/// Rows are sampled task pairs, columns output channels of `layer`: 1 when both tasks keep exactly
/// the same input-kernel set for that channel.
struct CorrelationMatrix {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::size_t channels = 0;
  std::vector<int> values;
};

CorrelationMatrix task_pair_correlation(const std::vector<meta::TaskState>& task_states, std::size_t layer,
                                        std::size_t n_pairs, std::uint64_t seed);
CsvTable correlation_csv(const CorrelationMatrix& matrix);

// ---------------------------------------------------------------- experiments

struct SweepRow {
  std::optional<double> target;  ///< empty for the unpruned row
  double meta_budget = 0.0;      ///< percent
  double task_budget = 0.0;      ///< percent
  double val_acc = 0.0;
  double val_ci95 = 0.0;
  double test_acc = 0.0;
  double test_ci95 = 0.0;
  double train_seen_acc = 0.0;
  double mo = 0.0;
  double flops_fraction = 1.0;  ///< conv MACs under B(z) relative to the dense model

  bool operator==(const SweepRow&) const = default;
};

CsvTable sweep_csv(const std::vector<SweepRow>& rows);
std::vector<SweepRow> parse_sweep_csv(const CsvTable& table);

struct MethodResult {
  std::string method;
  meta::MetaState state;
  meta::HyperParams hp;
  meta::RunLog log;
  EvalReport report;
  double val_acc = 0.0;
  double val_ci95 = 0.0;
};

CsvTable methods_csv(const std::vector<MethodResult>& results);

/// Everything a run needs: data pools, model, task lists and the seeded task streams.
class Experiment {
 public:
  explicit Experiment(RunConfig config);

  const RunConfig& config() const { return config_; }
  const tasks::PoolSet& pools() const { return pools_; }
  const meta::ConvLearner& learner() const { return learner_; }

  /// Fresh weights and masks, or the configured checkpoint.
  meta::MetaState initial_state() const;
  /// initial_state() followed by pretrain_steps of unpruned meta-training; computed once.
  const meta::MetaState& pretrained();

  /// Meta-training episodes; `stream` separates independent phases.
  meta::TaskSource task_source(std::uint64_t stream) const;
  meta::TrainResult train(const meta::MetaState& start, const meta::HyperParams& hp, std::uint64_t stream) const;

  const std::vector<tasks::TaskRef>& val_refs() const { return val_refs_; }
  const std::vector<tasks::TaskRef>& test_refs() const { return test_refs_; }
  const std::vector<tasks::TaskRef>& seen_refs() const { return seen_refs_; }

  AccuracySummary evaluate_split(const meta::MetaState& state, const meta::HyperParams& hp, tasks::Split split,
                                 const std::vector<tasks::TaskRef>& refs) const;
  EvalReport evaluate(const meta::MetaState& state, const meta::HyperParams& hp) const;
  /// Adapted task states on the first `count` test tasks.
  std::vector<meta::TaskState> adapted_tasks(const meta::MetaState& state, const meta::HyperParams& hp,
                                             std::size_t count) const;

  MethodResult run_method(const std::string& name, const meta::HyperParams& hp);
  SweepRow sweep_row(const MethodResult& result) const;
  std::vector<SweepRow> budget_sweep(const std::vector<double>& budgets);
  /// MetaDOCK at hp.V0 versus the continuous baseline at the same target.
  std::vector<MethodResult> compare_continuous();
  /// Task-specific versus global pruning at hp.V0.
  std::vector<MethodResult> compare_global();

 private:
  RunConfig config_;
  tasks::PoolSet pools_;
  meta::ConvLearner learner_;
  std::vector<tasks::TaskRef> val_refs_;
  std::vector<tasks::TaskRef> test_refs_;
  std::vector<tasks::TaskRef> seen_refs_;
  std::optional<meta::MetaState> pretrained_;
};

/// Command-line entry point. Returns the process exit code.
int cli_main(int argc, char** argv);

}  // namespace metadock::harness
