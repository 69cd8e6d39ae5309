// Command-line front end for the online continual-learning engine.
//
//   ocl-ema run <config>
//   ocl-ema sweep-covering <config>
//   ocl-ema compare-schemes <config>
//   ocl-ema plot-data <trace...> --out <dir>
//   ocl-ema metrics <trace>

#include <iostream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "ocl/errors.hpp"
#include "ocl/harness.hpp"

namespace {

std::string opt(const std::optional<double>& v) { return v ? fmt::format("{:.4f}", *v) : std::string("-"); }

void print_summary(const ocl::RunSummary& summary) {
  fmt::print("{:<24} {:>16} {:>16} {:>16} {:>16} {:>14}\n", "model", "avg_acc", "aaa", "wc_acc", "min_acc", "rag%");
  for (const auto& m : summary.models) {
    auto cell = [](const ocl::Aggregate& a) { return fmt::format("{:.4f}±{:.4f}", a.mean, a.std); };
    fmt::print("{:<24} {:>16} {:>16} {:>16} {:>16} {:>14}\n", m.model_id, cell(m.avg_acc), cell(m.aaa),
               cell(m.wc_acc), cell(m.min_acc), fmt::format("{:.2f}", m.rag.mean));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Online continual learning with temporal-ensemble evaluation models"};
  app.require_subcommand(1);

  std::string config_path;
  auto* run = app.add_subcommand("run", "Train every seed and write traces plus summary.json");
  run->add_option("config", config_path, "Experiment config (INI)")->required()->check(CLI::ExistingFile);

  auto* sweep = app.add_subcommand("sweep-covering", "Naive checkpoint ensembles covering 1..n tasks");
  sweep->add_option("config", config_path, "Experiment config (INI)")->required()->check(CLI::ExistingFile);

  auto* compare = app.add_subcommand("compare-schemes", "Final accuracy of every tracked weighting scheme");
  compare->add_option("config", config_path, "Experiment config (INI)")->required()->check(CLI::ExistingFile);

  std::vector<std::string> traces;
  std::string plot_out;
  ocl::PlotOptions plot_options;
  auto* plot = app.add_subcommand("plot-data", "Plot-ready CSVs from metric traces");
  plot->add_option("traces", traces, "Trace CSV files")->required()->check(CLI::ExistingFile);
  plot->add_option("--out", plot_out, "Output directory")->required();
  plot->add_option("--boundary-task", plot_options.boundary_task, "Task whose end is zoomed on");
  plot->add_option("--window", plot_options.window, "Evaluations on each side of the boundary");

  std::string metrics_trace;
  auto* metrics = app.add_subcommand("metrics", "Recompute the continual metrics from a stored trace");
  metrics->add_option("trace", metrics_trace, "Trace CSV file")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto summary = ocl::run_experiment(ocl::load_config(config_path));
      print_summary(summary);
    } else if (*sweep) {
      const auto cfg = ocl::load_config(config_path);
      for (const auto& r : ocl::run_covering_sweep(cfg, cfg.sweep_n_models, cfg.sweep_ensembles_per_point)) {
        fmt::print("seed {} (final model acc {:.4f})\n", r.seed, r.final_model_acc);
        fmt::print("  {:>8} {:>8} {:>8} {:>8} {:>9}\n", "covered", "mean", "ci_low", "ci_high", "gain%");
        for (const auto& p : r.points) {
          fmt::print("  {:>8} {:>8.4f} {:>8.4f} {:>8.4f} {:>9.2f}\n", p.n_covered_tasks, p.mean, p.ci_low, p.ci_high,
                     p.rel_gain);
        }
      }
    } else if (*compare) {
      fmt::print("{:<10} {:<24} {:>10} {:>8}\n", "strategy", "model", "avg_acc", "std");
      for (const auto& r : ocl::run_scheme_comparison(ocl::load_config(config_path))) {
        fmt::print("{:<10} {:<24} {:>10.4f} {:>8.4f}\n", r.strategy, r.model_id, r.avg_acc.mean, r.avg_acc.std);
      }
    } else if (*plot) {
      std::vector<std::filesystem::path> paths(traces.begin(), traces.end());
      for (const auto& p : ocl::emit_plot_data(paths, plot_out, plot_options)) fmt::print("{}\n", p.string());
    } else if (*metrics) {
      const auto trace = ocl::read_trace(metrics_trace);
      fmt::print("{:<24} {:>8} {:>8} {:>8} {:>8} {:>8}\n", "model", "avg_acc", "aaa", "min_acc", "wc_acc", "rag%");
      for (const auto& [id, r] : ocl::recompute_metrics(trace)) {
        fmt::print("{:<24} {:>8.4f} {:>8.4f} {:>8} {:>8.4f} {:>8}\n", id, r.avg_acc, r.aaa, opt(r.min_acc), r.wc_acc,
                   r.rag ? fmt::format("{:.2f}", *r.rag) : std::string("-"));
      }
    }
  } catch (const ocl::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
