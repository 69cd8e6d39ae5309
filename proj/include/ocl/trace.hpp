#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "ocl/eval.hpp"

namespace ocl {

// One line of a metrics trace:
//   iteration,current_task,model_id,avg_acc,aaa,min_acc,wc_acc,rag,acc_task_0,...,acc_task_{n-1}
// Undefined metrics and unseen tasks are written as empty cells.
struct TraceRow {
  std::int64_t iteration = 0;
  int current_task = 0;
  std::string model_id;
  MetricsReport metrics;
  std::vector<double> acc;
};

std::string trace_header(int n_tasks);
std::string format_trace_row(const TraceRow& row, int n_tasks);

// Appends rows and flushes after each one, so an aborted run keeps every row
// written so far.
class TraceWriter {
 public:
  TraceWriter(const std::filesystem::path& path, int n_tasks);
  void write(const TraceRow& row);

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  int n_tasks_;
};

struct Trace {
  int n_tasks = 0;
  std::vector<TraceRow> rows;
};

// Throws SchemaError naming a missing column, ParseError for bad cells.
Trace read_trace(const std::filesystem::path& path);

// Per model_id, in order of first appearance.
std::vector<std::pair<std::string, AccuracyMatrix>> matrices_by_model(const Trace& trace);

// Grid with a header row and a leading column of task ids.
void write_confusion_csv(const std::filesystem::path& path, const TaskConfusionMatrix& confusion);

}  // namespace ocl
