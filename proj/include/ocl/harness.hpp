#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ocl/ensemble.hpp"
#include "ocl/eval.hpp"
#include "ocl/net.hpp"
#include "ocl/strategies.hpp"
#include "ocl/stream.hpp"
#include "ocl/trace.hpp"

namespace ocl {

// Environment variable that relocates every run's output directory.
inline constexpr const char* kOutputRootEnv = "OCL_OUTPUT_ROOT";

struct EmaConfig {
  bool enabled = true;
  double lambda = 0.99;
  double warmup_momentum = 0.9;
  int warmup_iters = 50;
  EmaInit init = EmaInit::kInitialModel;
};

struct ExperimentConfig {
  StreamConfig stream;
  std::vector<int> hidden = {64, 64};
  StrategyConfig strategy;
  SgdConfig sgd;
  EmaConfig ema;
  std::vector<WeightScheme> schemes;
  std::size_t buffer_capacity = 200;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5};
  std::filesystem::path output_dir;  // empty: nothing is written
  int checkpoint_every = 0;          // 0: no checkpoints
  bool persist_checkpoints = false;  // also write checkpoints under output_dir
  int threads = 0;                   // seed workers; 0 = hardware concurrency

  int sweep_n_models = 20;
  int sweep_ensembles_per_point = 10;
  std::vector<StrategyKind> compare_strategies;  // empty: just strategy.kind

  void validate() const;
  std::vector<int> layer_sizes() const;
  // output_dir with kOutputRootEnv applied.
  std::filesystem::path resolved_output_dir() const;
};

// INI-style file: [stream] [model] [strategy] [sgd] [ema] [ensembles] [run]
// [sweep] [compare] sections of `key = value` lines. Missing keys keep their
// defaults; unknown keys are rejected.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);

struct FinalMetrics {
  double avg_acc = 0.0;  // test split
  double aaa = 0.0;      // the rest: validation split, last evaluation
  std::optional<double> min_acc;
  double wc_acc = 0.0;
  std::optional<double> rag;
  double recency_bias = 0.0;  // test split
};

struct ModelResult {
  std::string model_id;
  AccuracyMatrix matrix;
  FinalMetrics final;
  std::vector<double> test_acc;
  TaskConfusionMatrix confusion;
};

struct SeedResult {
  std::uint64_t seed = 0;
  std::int64_t iterations = 0;
  std::size_t minibatches = 0;
  std::vector<ModelResult> models;  // "train", then "ema", then schemes

  const ModelResult& model(std::string_view id) const;
};

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::size_t n = 0;
};

Aggregate aggregate(const std::vector<double>& values);

struct ModelSummary {
  std::string model_id;
  Aggregate avg_acc, aaa, min_acc, wc_acc, rag, recency_bias;
};

struct RunSummary {
  std::vector<SeedResult> seeds;
  std::vector<ModelSummary> models;
};

// Model ids tracked by a configuration, in trace order.
std::vector<std::string> tracked_model_ids(const ExperimentConfig& cfg);

// Trains one seed. When `checkpoints` is given, the training model is saved
// into it every checkpoint_every iterations. Writes trace_seed{seed}.csv and
// confusion CSVs under out_dir when out_dir is non-empty.
SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const std::filesystem::path& out_dir,
                    CheckpointStore* checkpoints = nullptr);

// Runs every seed (in parallel) and writes summary.json.
RunSummary run_experiment(const ExperimentConfig& cfg);

std::string summary_json(const RunSummary& summary);

struct SweepPoint {
  int n_covered_tasks = 0;
  std::vector<double> accuracies;  // one per sampled ensemble
  double mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double rel_gain = 0.0;  // percent over the worst point's mean
};

struct SweepResult {
  std::uint64_t seed = 0;
  double final_model_acc = 0.0;
  std::vector<SweepPoint> points;  // n_covered_tasks = 1..n_tasks
};

// Per seed: trains once with checkpointing, then evaluates ensembles of
// n_models checkpoints covering 1..n_tasks tasks on the test split.
std::vector<SweepResult> run_covering_sweep(const ExperimentConfig& cfg, int n_models, int ensembles_per_point);

struct ComparisonRow {
  std::string strategy;
  std::string model_id;
  Aggregate avg_acc;
};

// One run per strategy; all schemes share each run's training trajectory.
std::vector<ComparisonRow> run_scheme_comparison(const ExperimentConfig& cfg);

struct PlotOptions {
  int boundary_task = 0;  // zoom around the end of this task
  int window = 30;        // evaluations on each side
};

// Writes task_accuracy.csv, aaa.csv, wc_acc.csv and stability_zoom.csv.
// Returns the written paths.
std::vector<std::filesystem::path> emit_plot_data(const std::vector<std::filesystem::path>& traces,
                                                  const std::filesystem::path& out_dir, const PlotOptions& options = {});

// Recomputes the metric family at the last evaluation of each model.
std::vector<std::pair<std::string, MetricsReport>> recompute_metrics(const Trace& trace);

}  // namespace ocl
