#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ocl/net.hpp"

namespace ocl {

enum class EmaInit {
  kInitialModel,  // theta^0_ema is the model the state is constructed with
  kFirstUpdate,   // theta^0_ema is the first model passed to update()
};

// Exponential moving average of network weights:
//
//   ema_t = m * ema_{t-1} + (1 - m) * theta_t
//
// with m = warmup_momentum for the first warmup_iters updates and momentum
// afterwards. Accumulation happens in double precision.
class EmaState {
 public:
  EmaState(ParameterVector initial, double momentum = 0.99, double warmup_momentum = 0.9, int warmup_iters = 50,
           EmaInit init = EmaInit::kInitialModel);

  void update(const ParameterVector& theta);

  double effective_momentum() const;
  double momentum() const { return momentum_; }
  double warmup_momentum() const { return warmup_momentum_; }
  int warmup_iters() const { return warmup_iters_; }
  std::int64_t iteration() const { return iteration_; }
  const ParameterVector& parameters() const { return params_; }

 private:
  ParameterVector params_;
  double momentum_;
  double warmup_momentum_;
  int warmup_iters_;
  EmaInit init_;
  std::int64_t iteration_ = 0;
};

enum class SchemeKind { kEmaRecursive, kUniform, kLinear, kLogarithmic, kQuadratic };

// Rule for the weight w_i given to the i-th model (i starting at 1, w_1 = 1):
//   ema_recursive  w_i = w_{i-1} / lambda
//   uniform        w_i = 1
//   linear         w_i = i
//   logarithmic    w_i = w_{i-1} + ln(i)
//   quadratic      w_i = w_{i-1} + i^2
struct WeightScheme {
  SchemeKind kind = SchemeKind::kUniform;
  double lambda = 0.99;

  // "uniform", "linear", "logarithmic", "quadratic", "ema_recursive:<lambda>".
  std::string name() const;
  static WeightScheme parse(std::string_view text);

  bool operator==(const WeightScheme&) const = default;
};

// Running normalized weighted mean of a model trajectory:
//
//   ensemble_t = sum_i w_i theta_i / sum_i w_i
//
// Only the normalized mean is stored. Weights are tracked relative to a
// running scale, exp(log_scale()), that is folded in after every update so
// fast-growing schemes stay finite.
class EnsembleAccumulator {
 public:
  explicit EnsembleAccumulator(WeightScheme scheme);

  const WeightScheme& scheme() const { return scheme_; }
  std::int64_t iteration() const { return iteration_; }
  bool empty() const { return iteration_ == 0; }

  // Adds theta with the scheme's next weight.
  void update(const ParameterVector& theta);
  // Adds theta with an explicit (absolute, positive) weight.
  void add(const ParameterVector& theta, double weight);

  // Throws StateError before the first update.
  const ParameterVector& mean() const;

  // Relative to exp(log_scale()); weight_total() is 1 after every update.
  double weight_total() const { return weight_total_; }
  double last_weight() const { return last_weight_; }
  double log_scale() const { return log_scale_; }

 private:
  void fold(const ParameterVector& theta, double relative_weight);

  WeightScheme scheme_;
  ParameterVector mean_;
  double weight_total_ = 0.0;
  double last_weight_ = 0.0;
  double log_scale_ = 0.0;
  std::int64_t iteration_ = 0;
};

// Evaluation network carrying the accumulator's normalized weights.
Network ensemble_extract(const EnsembleAccumulator& acc, const Network& like);

// Total EMA weight (1 - lambda) lambda^(t - i) over the iterations of the task
// `tasks_back` positions before the end of training (0 = most recent task),
// with iters_per_task iterations in every task.
double task_weight_mass(double lambda, int iters_per_task, int tasks_back);

struct Checkpoint {
  std::int64_t iteration = 0;
  int task_id = 0;
  ParameterVector params;
};

// Trajectory snapshots taken every save_every optimizer iterations. When a
// directory is given each snapshot is also written as ckpt_{iteration:07}.bin
// and listed in manifest.csv.
class CheckpointStore {
 public:
  explicit CheckpointStore(int save_every = 10, std::filesystem::path directory = {});

  int save_every() const { return save_every_; }
  const std::filesystem::path& directory() const { return directory_; }
  const std::vector<Checkpoint>& checkpoints() const { return checkpoints_; }
  std::size_t size() const { return checkpoints_.size(); }
  bool due(std::int64_t iteration) const { return iteration > 0 && iteration % save_every_ == 0; }

  // Throws StateError unless iteration is a positive multiple of save_every
  // strictly after the last saved one.
  void save(std::int64_t iteration, int task_id, const ParameterVector& params);

  static std::string filename_for(std::int64_t iteration);
  static CheckpointStore load(const std::filesystem::path& directory, int save_every = 10);

 private:
  int save_every_;
  std::filesystem::path directory_;
  std::vector<Checkpoint> checkpoints_;
};

// Draws n_models - 1 distinct checkpoints from those saved during the last
// n_covered_tasks tasks and appends the final checkpoint.
std::vector<Checkpoint> sample_covering_ensemble(const CheckpointStore& store, int n_models, int n_covered_tasks,
                                                 std::uint64_t seed);

struct EnsembleMember {
  Network net;
  std::vector<bool> predictable;  // classes this member had seen when saved
};

// Classes belonging to tasks 0..task_id.
std::vector<bool> predictable_classes(int task_id, std::span<const int> class_to_task);

// Per-class mean probability over the members able to predict that class.
// Each member's softmax runs over its own predictable classes. Scores need not
// sum to one; a class no member predicts scores 0.
std::vector<double> naive_ensemble_predict(std::span<const EnsembleMember> members, std::span<const double> features);

}  // namespace ocl
