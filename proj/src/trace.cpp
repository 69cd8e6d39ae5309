#include "ocl/trace.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "ocl/errors.hpp"

namespace ocl {

namespace {

constexpr const char* kFixedColumns[] = {"iteration", "current_task", "model_id", "avg_acc",
                                         "aaa",       "min_acc",      "wc_acc",   "rag"};

std::string cell(const std::optional<double>& v) { return v ? fmt::format("{}", *v) : std::string(); }

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  for (auto& c : out) {
    while (!c.empty() && (c.back() == '\r' || c.back() == ' ')) c.pop_back();
  }
  return out;
}

template <typename T>
T parse_number(const std::string& text, std::size_t line, const char* column) {
  T v{};
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || p != text.data() + text.size()) {
    throw ParseError(line, fmt::format("bad value '{}' in column {}", text, column));
  }
  return v;
}

std::optional<double> parse_optional(const std::string& text, std::size_t line, const char* column) {
  if (text.empty()) return std::nullopt;
  return parse_number<double>(text, line, column);
}

}  // namespace

std::string trace_header(int n_tasks) {
  std::string h;
  for (const char* c : kFixedColumns) {
    if (!h.empty()) h += ',';
    h += c;
  }
  for (int i = 0; i < n_tasks; ++i) h += fmt::format(",acc_task_{}", i);
  return h;
}

std::string format_trace_row(const TraceRow& r, int n_tasks) {
  std::string s = fmt::format("{},{},{},{},{},{},{},{}", r.iteration, r.current_task, r.model_id, r.metrics.avg_acc,
                              r.metrics.aaa, cell(r.metrics.min_acc), r.metrics.wc_acc, cell(r.metrics.rag));
  for (int i = 0; i < n_tasks; ++i) {
    s += ',';
    if (static_cast<std::size_t>(i) < r.acc.size()) s += fmt::format("{}", r.acc[i]);
  }
  return s;
}

TraceWriter::TraceWriter(const std::filesystem::path& path, int n_tasks)
    : path_(path), out_(path, std::ios::trunc), n_tasks_(n_tasks) {
  if (!out_) throw IoError("cannot write trace: " + path.string());
  out_ << trace_header(n_tasks_) << '\n' << std::flush;
}

void TraceWriter::write(const TraceRow& row) {
  out_ << format_trace_row(row, n_tasks_) << '\n' << std::flush;
  if (!out_) throw IoError("write failed: " + path_.string());
}

Trace read_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trace: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("trace " + path.string() + " has no header");
  const auto header = split_csv(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  auto need = [&](const std::string& name) {
    auto it = col.find(name);
    if (it == col.end()) throw SchemaError(fmt::format("trace {}: missing column '{}'", path.string(), name));
    return it->second;
  };
  std::vector<std::size_t> fixed;
  for (const char* c : kFixedColumns) fixed.push_back(need(c));
  Trace trace;
  need("acc_task_0");
  while (col.count(fmt::format("acc_task_{}", trace.n_tasks))) ++trace.n_tasks;
  std::vector<std::size_t> acc_cols;
  for (int i = 0; i < trace.n_tasks; ++i) acc_cols.push_back(col[fmt::format("acc_task_{}", i)]);

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv(line);
    if (cells.size() < header.size()) cells.resize(header.size());
    TraceRow r;
    r.iteration = parse_number<std::int64_t>(cells[fixed[0]], line_no, "iteration");
    r.current_task = parse_number<int>(cells[fixed[1]], line_no, "current_task");
    r.model_id = cells[fixed[2]];
    r.metrics.avg_acc = parse_number<double>(cells[fixed[3]], line_no, "avg_acc");
    r.metrics.aaa = parse_number<double>(cells[fixed[4]], line_no, "aaa");
    r.metrics.min_acc = parse_optional(cells[fixed[5]], line_no, "min_acc");
    r.metrics.wc_acc = parse_number<double>(cells[fixed[6]], line_no, "wc_acc");
    r.metrics.rag = parse_optional(cells[fixed[7]], line_no, "rag");
    if (r.current_task < 0 || r.current_task >= trace.n_tasks) {
      throw ParseError(line_no, fmt::format("current_task {} outside the trace's {} tasks", r.current_task,
                                            trace.n_tasks));
    }
    for (int i = 0; i <= r.current_task; ++i) {
      r.acc.push_back(parse_number<double>(cells[acc_cols[i]], line_no, "acc_task"));
    }
    trace.rows.push_back(std::move(r));
  }
  return trace;
}

std::vector<std::pair<std::string, AccuracyMatrix>> matrices_by_model(const Trace& trace) {
  std::vector<std::pair<std::string, AccuracyMatrix>> out;
  for (const auto& r : trace.rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.first == r.model_id; });
    if (it == out.end()) {
      out.emplace_back(r.model_id, AccuracyMatrix{});
      it = out.end() - 1;
    }
    it->second.append(r.iteration, r.current_task, r.acc);
  }
  return out;
}

void write_confusion_csv(const std::filesystem::path& path, const TaskConfusionMatrix& confusion) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write confusion matrix: " + path.string());
  out << "task";
  for (std::size_t j = 0; j < confusion.counts.size(); ++j) out << ',' << j;
  out << '\n';
  for (std::size_t i = 0; i < confusion.counts.size(); ++i) {
    out << i;
    for (auto c : confusion.counts[i]) out << ',' << c;
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace ocl
