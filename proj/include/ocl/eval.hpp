#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "ocl/net.hpp"
#include "ocl/stream.hpp"

namespace ocl {

struct AccuracyRow {
  std::int64_t iteration = 0;
  int current_task = 0;      // 0-based; the row covers tasks 0..current_task
  std::vector<double> acc;   // acc[i] = accuracy on task i's evaluation set
};

// Accuracy of one model on every seen task, recorded at successive
// evaluation points.
class AccuracyMatrix {
 public:
  // Throws ArgumentError if iterations do not increase, the task index goes
  // backwards, the row length is not current_task + 1, or an accuracy lies
  // outside [0, 1].
  void append(std::int64_t iteration, int current_task, std::vector<double> acc);

  const std::vector<AccuracyRow>& rows() const { return rows_; }
  std::size_t size() const { return rows_.size(); }
  bool empty() const { return rows_.empty(); }
  const AccuracyRow& back() const { return rows_.back(); }

  // boundaries()[i] is the iteration of the last row recorded while task i
  // was current; only finished tasks have one.
  const std::vector<std::int64_t>& boundaries() const { return boundaries_; }

  std::size_t row_at_iteration(std::int64_t iteration) const;

 private:
  std::vector<AccuracyRow> rows_;
  std::vector<std::int64_t> boundaries_;
};

// Mean accuracy over the seen tasks of one row.
double avg_acc(const AccuracyMatrix& m, std::size_t row);

// Average anytime accuracy over rows 0..row (each row averaged over its own
// seen tasks).
double aaa(const AccuracyMatrix& m, std::size_t row);
double aaa(const AccuracyMatrix& m);

// Mean over previous tasks of each task's minimum accuracy over the rows
// strictly after it finished, up to `row`. Empty while only one task is seen.
std::optional<double> min_acc(const AccuracyMatrix& m, std::size_t row);

// (1/k) * current-task accuracy + (1 - 1/k) * min_acc; equals the current-task
// accuracy when k = 1.
double wc_acc(const AccuracyMatrix& m, std::size_t row);

// Relative accuracy gap (avg - wc) / avg in percent. Empty when avg is 0.
std::optional<double> rag(const AccuracyMatrix& m, std::size_t row);

struct MetricsReport {
  double avg_acc = 0.0;
  double aaa = 0.0;
  std::optional<double> min_acc;
  double wc_acc = 0.0;
  std::optional<double> rag;
};

MetricsReport compute_report(const AccuracyMatrix& m, std::size_t row);

using Predictor = std::function<int(std::span<const double>)>;

// Fraction of argmax-correct predictions per evaluation set. Throws
// ArgumentError on an empty set.
std::vector<double> evaluate_predictor(const Predictor& predict, std::span<const std::vector<Example>> sets);
std::vector<double> evaluate_model(const Network& net, std::span<const std::vector<Example>> sets);

struct TaskConfusionMatrix {
  // counts[i][j]: test examples of task i predicted as a class of task j.
  std::vector<std::vector<std::int64_t>> counts;
  // Fraction of all test examples predicted into the last task's classes.
  double recency_bias = 0.0;
};

TaskConfusionMatrix task_confusion(const Predictor& predict, std::span<const std::vector<Example>> test_sets,
                                   std::span<const int> class_to_task);
TaskConfusionMatrix task_confusion(const Network& net, std::span<const std::vector<Example>> test_sets,
                                   std::span<const int> class_to_task);

struct StabilityGap {
  int task = 0;
  std::vector<std::pair<std::int64_t, double>> trace;  // (iteration, accuracy)
  std::optional<std::int64_t> boundary;                // end of the task, if finished
  // Accuracy at the boundary minus the minimum from the boundary onwards; 0
  // for an unfinished task.
  double depth = 0.0;
};

// Throws ArgumentError if the task was never evaluated.
StabilityGap stability_gap_trace(const AccuracyMatrix& m, int task);

}  // namespace ocl
