#include "ocl/eval.hpp"

#include <algorithm>
#include <limits>

#include <fmt/format.h>

#include "ocl/errors.hpp"

namespace ocl {

void AccuracyMatrix::append(std::int64_t iteration, int current_task, std::vector<double> acc) {
  if (current_task < 0) throw ArgumentError("accuracy row: negative task index");
  if (!rows_.empty()) {
    if (iteration <= rows_.back().iteration) {
      throw ArgumentError(fmt::format("accuracy row: iteration {} not after {}", iteration, rows_.back().iteration));
    }
    if (current_task < rows_.back().current_task) throw ArgumentError("accuracy row: task index went backwards");
  }
  if (acc.size() != static_cast<std::size_t>(current_task) + 1) {
    throw ArgumentError(fmt::format("accuracy row: {} entries for {} seen tasks", acc.size(), current_task + 1));
  }
  for (double a : acc) {
    if (!(a >= 0.0 && a <= 1.0)) throw ArgumentError(fmt::format("accuracy {} outside [0, 1]", a));
  }
  if (!rows_.empty()) {
    while (static_cast<int>(boundaries_.size()) < current_task) boundaries_.push_back(rows_.back().iteration);
  }
  rows_.push_back({iteration, current_task, std::move(acc)});
}

std::size_t AccuracyMatrix::row_at_iteration(std::int64_t iteration) const {
  auto it = std::lower_bound(rows_.begin(), rows_.end(), iteration,
                             [](const AccuracyRow& r, std::int64_t t) { return r.iteration < t; });
  if (it == rows_.end() || it->iteration != iteration) {
    throw ArgumentError(fmt::format("no evaluation row at iteration {}", iteration));
  }
  return static_cast<std::size_t>(it - rows_.begin());
}

namespace {

const AccuracyRow& checked_row(const AccuracyMatrix& m, std::size_t row) {
  if (row >= m.size()) throw ArgumentError(fmt::format("row {} out of range ({} rows)", row, m.size()));
  return m.rows()[row];
}

double row_mean(const AccuracyRow& r) {
  double s = 0.0;
  for (double a : r.acc) s += a;
  return s / static_cast<double>(r.acc.size());
}

}  // namespace

double avg_acc(const AccuracyMatrix& m, std::size_t row) { return row_mean(checked_row(m, row)); }

double aaa(const AccuracyMatrix& m, std::size_t row) {
  checked_row(m, row);
  double s = 0.0;
  for (std::size_t j = 0; j <= row; ++j) s += row_mean(m.rows()[j]);
  return s / static_cast<double>(row + 1);
}

double aaa(const AccuracyMatrix& m) {
  if (m.empty()) throw ArgumentError("aaa: empty accuracy matrix");
  return aaa(m, m.size() - 1);
}

namespace {

// Minimum accuracy of each previous task over the rows after it finished.
std::vector<double> previous_minima(const AccuracyMatrix& m, std::size_t row) {
  const auto& cur = checked_row(m, row);
  std::vector<double> out;
  for (int i = 0; i < cur.current_task; ++i) {
    const auto boundary = m.boundaries()[i];
    double lo = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j <= row; ++j) {
      const auto& r = m.rows()[j];
      if (r.iteration > boundary) lo = std::min(lo, r.acc[i]);
    }
    out.push_back(lo);
  }
  return out;
}

}  // namespace

std::optional<double> min_acc(const AccuracyMatrix& m, std::size_t row) {
  const auto mins = previous_minima(m, row);
  if (mins.empty()) return std::nullopt;
  double total = 0.0;
  for (double v : mins) total += v;
  return total / static_cast<double>(mins.size());
}

// (1/k) a_k + (1 - 1/k) min-ACC, written as (sum of minima + a_k) / k. Summing
// in task order like avg_acc keeps wc_acc <= avg_acc exact in floating point.
double wc_acc(const AccuracyMatrix& m, std::size_t row) {
  const auto& cur = checked_row(m, row);
  double total = 0.0;
  for (double v : previous_minima(m, row)) total += v;
  total += cur.acc.back();
  return total / static_cast<double>(cur.acc.size());
}

std::optional<double> rag(const AccuracyMatrix& m, std::size_t row) {
  const double acc = avg_acc(m, row);
  if (acc <= 0.0) return std::nullopt;
  return 100.0 * (acc - wc_acc(m, row)) / acc;
}

MetricsReport compute_report(const AccuracyMatrix& m, std::size_t row) {
  MetricsReport r;
  r.avg_acc = avg_acc(m, row);
  r.aaa = aaa(m, row);
  r.min_acc = min_acc(m, row);
  r.wc_acc = wc_acc(m, row);
  r.rag = rag(m, row);
  return r;
}

std::vector<double> evaluate_predictor(const Predictor& predict, std::span<const std::vector<Example>> sets) {
  if (sets.empty()) throw ArgumentError("evaluate: no evaluation sets");
  std::vector<double> out;
  out.reserve(sets.size());
  for (const auto& set : sets) {
    if (set.empty()) throw ArgumentError("evaluate: empty evaluation set");
    std::size_t correct = 0;
    for (const auto& ex : set) correct += predict(ex.features) == ex.label;
    out.push_back(static_cast<double>(correct) / static_cast<double>(set.size()));
  }
  return out;
}

std::vector<double> evaluate_model(const Network& net, std::span<const std::vector<Example>> sets) {
  return evaluate_predictor([&](std::span<const double> x) { return predict_class(net, x); }, sets);
}

TaskConfusionMatrix task_confusion(const Predictor& predict, std::span<const std::vector<Example>> test_sets,
                                   std::span<const int> class_to_task) {
  const std::size_t k = test_sets.size();
  if (k == 0) throw ArgumentError("task confusion: no test sets");
  for (int t : class_to_task) {
    if (t < 0 || static_cast<std::size_t>(t) >= k) throw ArgumentError("task confusion: class mapped to unknown task");
  }
  TaskConfusionMatrix out;
  out.counts.assign(k, std::vector<std::int64_t>(k, 0));
  std::int64_t total = 0;
  for (std::size_t i = 0; i < k; ++i) {
    if (test_sets[i].empty()) throw ArgumentError(fmt::format("task confusion: task {} has no test data", i));
    for (const auto& ex : test_sets[i]) {
      const int c = predict(ex.features);
      ++out.counts[i][class_to_task[c]];
      ++total;
    }
  }
  std::int64_t last = 0;
  for (std::size_t i = 0; i < k; ++i) last += out.counts[i][k - 1];
  out.recency_bias = static_cast<double>(last) / static_cast<double>(total);
  return out;
}

TaskConfusionMatrix task_confusion(const Network& net, std::span<const std::vector<Example>> test_sets,
                                   std::span<const int> class_to_task) {
  if (static_cast<std::size_t>(net.n_classes()) != class_to_task.size()) {
    throw ShapeError("task confusion: class map size != n_classes");
  }
  return task_confusion([&](std::span<const double> x) { return predict_class(net, x); }, test_sets, class_to_task);
}

StabilityGap stability_gap_trace(const AccuracyMatrix& m, int task) {
  if (task < 0 || m.empty() || task > m.back().current_task) {
    throw ArgumentError(fmt::format("stability gap: task {} has not been seen", task));
  }
  StabilityGap gap;
  gap.task = task;
  for (const auto& r : m.rows()) {
    if (r.current_task >= task) gap.trace.emplace_back(r.iteration, r.acc[task]);
  }
  if (static_cast<std::size_t>(task) < m.boundaries().size()) {
    const auto b = m.boundaries()[task];
    gap.boundary = b;
    double at_boundary = 0.0;
    double lo = std::numeric_limits<double>::infinity();
    for (const auto& [it, a] : gap.trace) {
      if (it == b) at_boundary = a;
      if (it >= b) lo = std::min(lo, a);
    }
    gap.depth = at_boundary - lo;
  }
  return gap;
}

}  // namespace ocl
