#include "ocl/stream.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <string_view>

#include <fmt/format.h>

#include "ocl/errors.hpp"
#include "ocl/rng.hpp"

namespace ocl {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      break;
    }
    out.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
  return out;
}

// Shuffles the pool and moves the first round(fraction * n) into val.
void split_validation(std::vector<Example> pool, double fraction, Rng& rng, TaskData& task) {
  std::shuffle(pool.begin(), pool.end(), rng);
  auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pool.size())));
  n_val = std::min(n_val, pool.size());
  task.val.assign(std::make_move_iterator(pool.begin()),
                  std::make_move_iterator(pool.begin() + static_cast<std::ptrdiff_t>(n_val)));
  task.train.assign(std::make_move_iterator(pool.begin() + static_cast<std::ptrdiff_t>(n_val)),
                    std::make_move_iterator(pool.end()));
}

void fill_counts(TaskData& task) {
  task.spec.train_examples = task.train.size();
  task.spec.val_examples = task.val.size();
  task.spec.test_examples = task.test.size();
}

std::vector<TaskData> empty_tasks(const StreamConfig& config) {
  std::vector<TaskData> tasks(static_cast<std::size_t>(config.n_tasks));
  for (int t = 0; t < config.n_tasks; ++t) {
    tasks[t].spec.task_id = t;
    for (int c = 0; c < config.classes_per_task; ++c) {
      tasks[t].spec.class_ids.push_back(t * config.classes_per_task + c);
    }
  }
  return tasks;
}

}  // namespace

void StreamConfig::validate() const {
  if (n_tasks < 1) throw ConfigError("stream: n_tasks must be >= 1");
  if (classes_per_task < 1) throw ConfigError("stream: classes_per_task must be >= 1");
  if (input_dim < 1) throw ConfigError("stream: input_dim must be >= 1");
  if (batch_size < 2 || batch_size % 2 != 0) {
    throw ConfigError(fmt::format("stream: batch_size must be even and >= 2 (got {})", batch_size));
  }
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
    throw ConfigError("stream: val_fraction must lie in [0, 1)");
  }
  if (source == StreamSource::kSyntheticGaussian) {
    if (train_per_class < 1) throw ConfigError("stream: train_per_class must be >= 1");
    if (test_per_class < 0) throw ConfigError("stream: test_per_class must be >= 0");
  }
}

Stream::Stream(StreamConfig config, std::vector<TaskData> tasks)
    : config_(std::move(config)), tasks_(std::move(tasks)) {
  class_to_task_.assign(static_cast<std::size_t>(config_.total_classes()), -1);
  for (const auto& task : tasks_) {
    for (int c : task.spec.class_ids) {
      if (c < 0 || c >= config_.total_classes() || class_to_task_[c] != -1) {
        throw ConfigError("stream: task class sets must partition the label set");
      }
      class_to_task_[c] = task.spec.task_id;
    }
  }
}

std::size_t Stream::minibatches_in_task(int task) const {
  const auto per = static_cast<std::size_t>(config_.current_per_batch());
  return (tasks_.at(task).train.size() + per - 1) / per;
}

std::size_t Stream::total_minibatches() const {
  std::size_t total = 0;
  for (int t = 0; t < n_tasks(); ++t) total += minibatches_in_task(t);
  return total;
}

std::optional<Minibatch> Stream::next_minibatch() {
  const auto per = static_cast<std::size_t>(config_.current_per_batch());
  while (cursor_task_ < n_tasks() && cursor_offset_ >= tasks_[cursor_task_].train.size()) {
    ++cursor_task_;
    cursor_offset_ = 0;
  }
  if (cursor_task_ >= n_tasks()) return std::nullopt;

  const auto& train = tasks_[cursor_task_].train;
  const std::size_t end = std::min(train.size(), cursor_offset_ + per);
  Minibatch batch;
  batch.examples.assign(train.begin() + static_cast<std::ptrdiff_t>(cursor_offset_),
                        train.begin() + static_cast<std::ptrdiff_t>(end));
  batch.index = emitted_++;
  batch.task_id = cursor_task_;
  batch.first_of_task = cursor_offset_ == 0;
  cursor_offset_ = end;
  return batch;
}

void Stream::reset() {
  cursor_task_ = 0;
  cursor_offset_ = 0;
  emitted_ = 0;
}

Stream generate_synthetic_stream(const StreamConfig& config) {
  config.validate();
  if (config.source != StreamSource::kSyntheticGaussian) {
    throw ConfigError("generate_synthetic_stream: config source is not synthetic_gaussian");
  }
  const int n_classes = config.total_classes();
  const int dim = config.input_dim;

  auto mean_rng = make_rng(config.seed, rng_tag::kStreamMeans);
  std::uniform_real_distribution<double> mean_dist(-3.0, 3.0);
  std::vector<std::vector<double>> means(static_cast<std::size_t>(n_classes), std::vector<double>(dim));
  for (auto& mean : means) {
    for (auto& v : mean) v = mean_dist(mean_rng);
  }

  auto sample_rng = make_rng(config.seed, rng_tag::kStreamSamples);
  std::normal_distribution<double> noise(0.0, 1.0);
  auto draw = [&](int label) {
    Example ex;
    ex.label = label;
    ex.features.resize(static_cast<std::size_t>(dim));
    for (int j = 0; j < dim; ++j) ex.features[j] = means[label][j] + noise(sample_rng);
    return ex;
  };

  auto split_rng = make_rng(config.seed, rng_tag::kStreamSplit);
  auto tasks = empty_tasks(config);
  for (auto& task : tasks) {
    std::vector<Example> pool;
    for (int c : task.spec.class_ids) {
      for (int i = 0; i < config.train_per_class; ++i) pool.push_back(draw(c));
      for (int i = 0; i < config.test_per_class; ++i) task.test.push_back(draw(c));
    }
    split_validation(std::move(pool), config.val_fraction, split_rng, task);
    fill_counts(task);
  }
  return Stream(config, std::move(tasks));
}

std::vector<Example> read_examples_csv(const std::filesystem::path& path, const StreamConfig& config) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset file: " + path.string());

  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw ParseError(line_no, "missing header");
  const auto header = split_commas(line);
  if (header.empty() || header[0] != "label") throw ParseError(line_no, "header must start with 'label'");
  if (static_cast<int>(header.size()) - 1 != config.input_dim) {
    throw ParseError(line_no, fmt::format("header declares {} features, config expects {}", header.size() - 1,
                                          config.input_dim));
  }
  for (std::size_t j = 1; j < header.size(); ++j) {
    if (header[j] != fmt::format("f{}", j - 1)) {
      throw ParseError(line_no, fmt::format("expected column 'f{}', found '{}'", j - 1, header[j]));
    }
  }

  std::vector<Example> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_commas(line);
    if (static_cast<int>(cells.size()) != config.input_dim + 1) {
      throw ParseError(line_no, fmt::format("expected {} fields, found {}", config.input_dim + 1, cells.size()));
    }
    Example ex;
    {
      const auto cell = cells[0];
      long long label = 0;
      auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), label);
      if (ec != std::errc() || p != cell.data() + cell.size()) {
        throw ParseError(line_no, fmt::format("malformed label '{}'", cell));
      }
      if (label < 0 || label >= config.total_classes()) {
        throw ParseError(line_no, fmt::format("label {} out of range [0, {})", label, config.total_classes()));
      }
      ex.label = static_cast<int>(label);
    }
    ex.features.resize(static_cast<std::size_t>(config.input_dim));
    for (int j = 0; j < config.input_dim; ++j) {
      const auto cell = cells[j + 1];
      auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), ex.features[j]);
      if (ec != std::errc() || p != cell.data() + cell.size() || !std::isfinite(ex.features[j])) {
        throw ParseError(line_no, fmt::format("malformed feature f{} '{}'", j, cell));
      }
    }
    rows.push_back(std::move(ex));
  }
  return rows;
}

void write_examples_csv(const std::filesystem::path& path, std::span<const Example> examples) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write dataset file: " + path.string());
  if (examples.empty()) throw ArgumentError("write_examples_csv: no examples");
  out << "label";
  for (std::size_t j = 0; j < examples.front().features.size(); ++j) out << ",f" << j;
  out << '\n';
  for (const auto& ex : examples) {
    out << ex.label;
    for (double v : ex.features) out << ',' << fmt::format("{}", v);
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

Stream load_file_stream(const std::filesystem::path& path, StreamConfig config) {
  config.source = StreamSource::kFileBacked;
  config.path = path;
  config.validate();
  auto rows = read_examples_csv(path, config);

  auto tasks = empty_tasks(config);
  std::vector<std::vector<Example>> pools(tasks.size());
  const auto cpt = config.classes_per_task;
  for (auto& ex : rows) pools[ex.label / cpt].push_back(std::move(ex));

  std::vector<std::vector<Example>> test_pools(tasks.size());
  if (!config.test_path.empty()) {
    for (auto& ex : read_examples_csv(config.test_path, config)) test_pools[ex.label / cpt].push_back(std::move(ex));
  }

  auto split_rng = make_rng(config.seed, rng_tag::kStreamSplit);
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    split_validation(std::move(pools[t]), config.val_fraction, split_rng, tasks[t]);
    tasks[t].test = config.test_path.empty() ? tasks[t].val : std::move(test_pools[t]);
    fill_counts(tasks[t]);
  }
  return Stream(std::move(config), std::move(tasks));
}

}  // namespace ocl
