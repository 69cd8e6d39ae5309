#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ocl {

struct Example {
  std::vector<double> features;
  int label = 0;

  bool operator==(const Example&) const = default;
};

enum class StreamSource { kSyntheticGaussian, kFileBacked };

struct StreamConfig {
  int n_tasks = 5;
  int classes_per_task = 2;
  int input_dim = 16;
  int batch_size = 32;
  std::uint64_t seed = 0;
  StreamSource source = StreamSource::kSyntheticGaussian;

  // Synthetic only: examples drawn per class for the train+validation pool,
  // and for the test split.
  int train_per_class = 200;
  int test_per_class = 100;

  // Fraction of each task's train pool held out for continual evaluation.
  double val_fraction = 0.05;

  // File-backed only. Without a test file the validation split doubles as
  // the test split.
  std::filesystem::path path;
  std::filesystem::path test_path;

  int total_classes() const { return n_tasks * classes_per_task; }
  int current_per_batch() const { return batch_size / 2; }

  // Throws ConfigError.
  void validate() const;
};

struct TaskSpec {
  int task_id = 0;
  std::vector<int> class_ids;
  std::size_t train_examples = 0;
  std::size_t val_examples = 0;
  std::size_t test_examples = 0;
};

struct TaskData {
  TaskSpec spec;
  std::vector<Example> train;
  std::vector<Example> val;
  std::vector<Example> test;
};

// One online mini-batch of current-task examples.
//
// task_id and first_of_task exist for the evaluator's bookkeeping. Training
// strategies only ever receive the example span.
struct Minibatch {
  std::vector<Example> examples;
  std::size_t index = 0;
  int task_id = 0;
  bool first_of_task = false;
};

class Stream {
 public:
  Stream(StreamConfig config, std::vector<TaskData> tasks);

  const StreamConfig& config() const { return config_; }
  const std::vector<TaskData>& tasks() const { return tasks_; }
  int n_tasks() const { return static_cast<int>(tasks_.size()); }
  int n_classes() const { return config_.total_classes(); }

  // class index -> task index
  const std::vector<int>& class_to_task() const { return class_to_task_; }

  std::size_t minibatches_in_task(int task) const;
  std::size_t total_minibatches() const;

  // Single-epoch: every train example is emitted exactly once. Batches never
  // straddle a task; the last batch of a task may be short.
  std::optional<Minibatch> next_minibatch();
  void reset();

 private:
  StreamConfig config_;
  std::vector<TaskData> tasks_;
  std::vector<int> class_to_task_;
  int cursor_task_ = 0;
  std::size_t cursor_offset_ = 0;
  std::size_t emitted_ = 0;
};

// Class c gets a mean drawn uniformly from [-3, 3]^d and unit isotropic noise.
Stream generate_synthetic_stream(const StreamConfig& config);

// CSV with header `label,f0,...,f{d-1}`. Throws ParseError naming the line.
Stream load_file_stream(const std::filesystem::path& path, StreamConfig config);

std::vector<Example> read_examples_csv(const std::filesystem::path& path, const StreamConfig& config);
void write_examples_csv(const std::filesystem::path& path, std::span<const Example> examples);

}  // namespace ocl
