#include "ocl/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <thread>

#include <fmt/format.h>

#include "json.hpp"
#include "ocl/errors.hpp"

namespace ocl {

namespace {

using json = nlohmann::ordered_json;

Stream build_stream(const ExperimentConfig& cfg, std::uint64_t seed) {
  auto scfg = cfg.stream;
  scfg.seed = seed;
  if (scfg.source == StreamSource::kFileBacked) return load_file_stream(scfg.path, scfg);
  return generate_synthetic_stream(scfg);
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

std::vector<std::vector<Example>> split_sets(const Stream& stream, std::vector<Example> TaskData::*member) {
  std::vector<std::vector<Example>> sets;
  for (const auto& t : stream.tasks()) sets.push_back(t.*member);
  return sets;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json aggregate_json(const Aggregate& a) { return {{"mean", a.mean}, {"std", a.std}, {"n", a.n}}; }

// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first
// failure after all workers stop.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn fn) {
  std::size_t workers = threads > 0 ? static_cast<std::size_t>(threads) : std::thread::hardware_concurrency();
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
            next = n;
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

const ModelResult& SeedResult::model(std::string_view id) const {
  for (const auto& m : models) {
    if (m.model_id == id) return m;
  }
  throw ArgumentError(fmt::format("seed {}: no model '{}'", seed, id));
}

Aggregate aggregate(const std::vector<double>& values) {
  Aggregate a;
  a.n = values.size();
  if (values.empty()) return a;
  for (double v : values) a.mean += v;
  a.mean /= static_cast<double>(a.n);
  double ss = 0.0;
  for (double v : values) ss += (v - a.mean) * (v - a.mean);
  a.std = std::sqrt(ss / static_cast<double>(a.n));
  return a;
}

std::vector<std::string> tracked_model_ids(const ExperimentConfig& cfg) {
  std::vector<std::string> ids{"train"};
  if (cfg.ema.enabled) ids.emplace_back("ema");
  for (const auto& s : cfg.schemes) ids.push_back(s.name());
  return ids;
}

SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const std::filesystem::path& out_dir,
                    CheckpointStore* checkpoints) {
  cfg.validate();
  Stream stream = build_stream(cfg, seed);
  const auto sizes = cfg.layer_sizes();
  const auto val_sets = split_sets(stream, &TaskData::val);
  const auto test_sets = split_sets(stream, &TaskData::test);

  Network net = Network::initialized(sizes, seed);
  ReplayBuffer buffer(cfg.buffer_capacity, seed);
  Strategy strategy(cfg.strategy, seed);

  std::optional<EmaState> ema;
  if (cfg.ema.enabled) {
    ema.emplace(net.parameters(), cfg.ema.lambda, cfg.ema.warmup_momentum, cfg.ema.warmup_iters, cfg.ema.init);
  }
  std::vector<EnsembleAccumulator> ensembles;
  for (const auto& s : cfg.schemes) ensembles.emplace_back(s);
  const bool distill = cfg.strategy.distill_alpha > 0.0;
  Network teacher = net;

  SeedResult result;
  result.seed = seed;
  for (const auto& id : tracked_model_ids(cfg)) result.models.push_back({id, {}, {}, {}, {}});

  std::optional<TraceWriter> trace;
  if (!out_dir.empty()) {
    ensure_dir(out_dir);
    trace.emplace(out_dir / fmt::format("trace_seed{}.csv", seed), stream.n_tasks());
  }

  // Evaluation networks in trace order.
  auto snapshot = [&]() {
    std::vector<Network> nets{net};
    if (ema) nets.emplace_back(sizes, ema->parameters());
    for (const auto& acc : ensembles) nets.push_back(ensemble_extract(acc, net));
    return nets;
  };

  int batch_task = 0;
  auto on_step = [&](const Network& trained) {
    ++result.iterations;
    if (ema) ema->update(trained.parameters());
    for (auto& acc : ensembles) acc.update(trained.parameters());
    if (checkpoints && checkpoints->due(result.iterations)) {
      checkpoints->save(result.iterations, batch_task, trained.parameters());
    }
    if (distill) teacher.set_parameters(ema->parameters());
  };

  while (auto batch = stream.next_minibatch()) {
    batch_task = batch->task_id;
    strategy.train_on_batch(net, buffer, batch->examples, cfg.sgd, on_step, distill ? &teacher : nullptr);
    ++result.minibatches;

    const std::span<const std::vector<Example>> seen(val_sets.data(), static_cast<std::size_t>(batch->task_id) + 1);
    const auto nets = snapshot();
    for (std::size_t m = 0; m < nets.size(); ++m) {
      auto& model = result.models[m];
      model.matrix.append(result.iterations, batch->task_id, evaluate_model(nets[m], seen));
      if (trace) {
        TraceRow row;
        row.iteration = result.iterations;
        row.current_task = batch->task_id;
        row.model_id = model.model_id;
        row.metrics = compute_report(model.matrix, model.matrix.size() - 1);
        row.acc = model.matrix.back().acc;
        trace->write(row);
      }
    }
  }
  if (result.minibatches == 0) throw StateError("stream produced no mini-batches");

  const auto nets = snapshot();
  for (std::size_t m = 0; m < nets.size(); ++m) {
    auto& model = result.models[m];
    const auto report = compute_report(model.matrix, model.matrix.size() - 1);
    model.test_acc = evaluate_model(nets[m], test_sets);
    model.confusion = task_confusion(nets[m], test_sets, stream.class_to_task());
    double mean = 0.0;
    for (double a : model.test_acc) mean += a;
    model.final.avg_acc = mean / static_cast<double>(model.test_acc.size());
    model.final.aaa = report.aaa;
    model.final.min_acc = report.min_acc;
    model.final.wc_acc = report.wc_acc;
    model.final.rag = report.rag;
    model.final.recency_bias = model.confusion.recency_bias;
    if (!out_dir.empty()) {
      write_confusion_csv(out_dir / fmt::format("confusion_seed{}_{}.csv", seed, model.model_id), model.confusion);
    }
  }
  return result;
}

RunSummary run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto out_dir = cfg.resolved_output_dir();
  RunSummary summary;
  summary.seeds.resize(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), cfg.threads, [&](std::size_t i) {
    const auto seed = cfg.seeds[i];
    std::optional<CheckpointStore> store;
    if (cfg.checkpoint_every > 0) {
      std::filesystem::path dir;
      if (cfg.persist_checkpoints && !out_dir.empty()) dir = out_dir / fmt::format("checkpoints_seed{}", seed);
      store.emplace(cfg.checkpoint_every, dir);
    }
    summary.seeds[i] = run_seed(cfg, seed, out_dir, store ? &*store : nullptr);
  });

  for (const auto& id : tracked_model_ids(cfg)) {
    std::vector<double> avg, aaa_v, min_v, wc, rag_v, bias;
    for (const auto& s : summary.seeds) {
      const auto& f = s.model(id).final;
      avg.push_back(f.avg_acc);
      aaa_v.push_back(f.aaa);
      if (f.min_acc) min_v.push_back(*f.min_acc);
      wc.push_back(f.wc_acc);
      if (f.rag) rag_v.push_back(*f.rag);
      bias.push_back(f.recency_bias);
    }
    summary.models.push_back(
        {id, aggregate(avg), aggregate(aaa_v), aggregate(min_v), aggregate(wc), aggregate(rag_v), aggregate(bias)});
  }

  if (!out_dir.empty()) {
    ensure_dir(out_dir);
    std::ofstream out(out_dir / "summary.json");
    out << summary_json(summary) << '\n';
    if (!out) throw IoError("cannot write summary.json in " + out_dir.string());
  }
  return summary;
}

std::string summary_json(const RunSummary& summary) {
  json doc;
  json seeds = json::array();
  for (const auto& s : summary.seeds) seeds.push_back(s.seed);
  doc["seeds"] = seeds;
  json models = json::object();
  for (const auto& m : summary.models) {
    json per_seed = json::array();
    for (const auto& s : summary.seeds) {
      const auto& f = s.model(m.model_id).final;
      per_seed.push_back({{"seed", s.seed},
                          {"iterations", s.iterations},
                          {"avg_acc", f.avg_acc},
                          {"aaa", f.aaa},
                          {"min_acc", optional_json(f.min_acc)},
                          {"wc_acc", f.wc_acc},
                          {"rag", optional_json(f.rag)},
                          {"recency_bias", f.recency_bias}});
    }
    models[m.model_id] = {{"per_seed", per_seed},
                          {"avg_acc", aggregate_json(m.avg_acc)},
                          {"aaa", aggregate_json(m.aaa)},
                          {"min_acc", aggregate_json(m.min_acc)},
                          {"wc_acc", aggregate_json(m.wc_acc)},
                          {"rag", aggregate_json(m.rag)},
                          {"recency_bias", aggregate_json(m.recency_bias)}};
  }
  doc["models"] = models;
  return doc.dump(2);
}

std::vector<SweepResult> run_covering_sweep(const ExperimentConfig& cfg, int n_models, int ensembles_per_point) {
  cfg.validate();
  if (cfg.checkpoint_every <= 0) throw ConfigError("sweep-covering needs run.checkpoint_every > 0");
  if (n_models < 1 || ensembles_per_point < 1) throw ConfigError("sweep-covering: counts must be >= 1");
  const auto out_dir = cfg.resolved_output_dir();
  std::vector<SweepResult> results(cfg.seeds.size());

  parallel_for(cfg.seeds.size(), cfg.threads, [&](std::size_t s) {
    const auto seed = cfg.seeds[s];
    std::filesystem::path ckpt_dir;
    if (cfg.persist_checkpoints && !out_dir.empty()) ckpt_dir = out_dir / fmt::format("checkpoints_seed{}", seed);
    CheckpointStore store(cfg.checkpoint_every, ckpt_dir);
    const auto run = run_seed(cfg, seed, out_dir, &store);

    const Stream stream = build_stream(cfg, seed);
    const auto test_sets = split_sets(stream, &TaskData::test);
    const auto sizes = cfg.layer_sizes();

    SweepResult& result = results[s];
    result.seed = seed;
    result.final_model_acc = run.model("train").final.avg_acc;
    for (int covered = 1; covered <= stream.n_tasks(); ++covered) {
      SweepPoint point;
      point.n_covered_tasks = covered;
      for (int e = 0; e < ensembles_per_point; ++e) {
        const auto sample_seed = seed * 1000003ULL + static_cast<std::uint64_t>(covered) * 1009ULL + e;
        std::vector<Checkpoint> picked;
        try {
          picked = sample_covering_ensemble(store, n_models, covered, sample_seed);
        } catch (const ArgumentError& err) {
          throw ConfigError(fmt::format("sweep-covering (seed {}): {}", seed, err.what()));
        }
        std::vector<EnsembleMember> members;
        for (auto& c : picked) {
          members.push_back({Network(sizes, std::move(c.params)), predictable_classes(c.task_id, stream.class_to_task())});
        }
        const auto acc = evaluate_predictor(
            [&](std::span<const double> x) {
              const auto p = naive_ensemble_predict(members, x);
              return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
            },
            test_sets);
        double mean = 0.0;
        for (double a : acc) mean += a;
        point.accuracies.push_back(mean / static_cast<double>(acc.size()));
      }
      const auto n = static_cast<double>(point.accuracies.size());
      for (double a : point.accuracies) point.mean += a;
      point.mean /= n;
      double ss = 0.0;
      for (double a : point.accuracies) ss += (a - point.mean) * (a - point.mean);
      const double sd = point.accuracies.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
      point.ci_low = point.mean - 1.96 * sd / std::sqrt(n);
      point.ci_high = point.mean + 1.96 * sd / std::sqrt(n);
      result.points.push_back(std::move(point));
    }
    double worst = std::numeric_limits<double>::infinity();
    for (const auto& p : result.points) worst = std::min(worst, p.mean);
    for (auto& p : result.points) p.rel_gain = worst > 0.0 ? 100.0 * (p.mean / worst - 1.0) : 0.0;

    if (!out_dir.empty()) {
      std::ofstream out(out_dir / fmt::format("sweep_seed{}.csv", seed));
      out << "n_covered_tasks,mean,ci_low,ci_high,rel_gain\n";
      for (const auto& p : result.points) {
        out << fmt::format("{},{},{},{},{}\n", p.n_covered_tasks, p.mean, p.ci_low, p.ci_high, p.rel_gain);
      }
      if (!out) throw IoError("cannot write sweep table in " + out_dir.string());
    }
  });
  return results;
}

std::vector<ComparisonRow> run_scheme_comparison(const ExperimentConfig& cfg) {
  if (cfg.schemes.empty()) throw ConfigError("compare-schemes needs at least one scheme in [ensembles] schemes");
  auto strategies = cfg.compare_strategies;
  if (strategies.empty()) strategies.push_back(cfg.strategy.kind);

  const auto out_dir = cfg.resolved_output_dir();
  std::vector<ComparisonRow> rows;
  for (auto kind : strategies) {
    auto sub = cfg;
    sub.strategy.kind = kind;
    sub.compare_strategies.clear();
    if (!cfg.output_dir.empty()) sub.output_dir = cfg.output_dir / std::string(to_string(kind));
    const auto summary = run_experiment(sub);
    for (const auto& m : summary.models) rows.push_back({std::string(to_string(kind)), m.model_id, m.avg_acc});
  }
  if (!out_dir.empty()) {
    ensure_dir(out_dir);
    std::ofstream out(out_dir / "scheme_comparison.csv");
    out << "strategy,model_id,mean_avg_acc,std_avg_acc,n_seeds\n";
    for (const auto& r : rows) {
      out << fmt::format("{},{},{},{},{}\n", r.strategy, r.model_id, r.avg_acc.mean, r.avg_acc.std, r.avg_acc.n);
    }
    if (!out) throw IoError("cannot write scheme_comparison.csv in " + out_dir.string());
  }
  return rows;
}

std::vector<std::filesystem::path> emit_plot_data(const std::vector<std::filesystem::path>& traces,
                                                  const std::filesystem::path& out_dir, const PlotOptions& options) {
  if (traces.empty()) throw ArgumentError("plot-data: no traces given");
  if (options.window < 0) throw ArgumentError("plot-data: window must be >= 0");
  ensure_dir(out_dir);

  const std::vector<std::filesystem::path> paths{out_dir / "task_accuracy.csv", out_dir / "aaa.csv",
                                                 out_dir / "wc_acc.csv", out_dir / "stability_zoom.csv"};
  std::ofstream task_acc(paths[0]), aaa_out(paths[1]), wc_out(paths[2]), zoom(paths[3]);
  task_acc << "# Accuracy of each seen task's validation split after every evaluated mini-batch.\n"
              "# source: trace file; eval_index: 0-based evaluation count per model.\n"
              "source,model_id,iteration,eval_index,task,acc\n";
  aaa_out << "# Average anytime accuracy after every evaluated mini-batch.\n"
             "source,model_id,iteration,eval_index,aaa\n";
  wc_out << "# Worst-case accuracy after every evaluated mini-batch.\n"
            "source,model_id,iteration,eval_index,wc_acc\n";
  zoom << fmt::format(
      "# Accuracy on tasks {0} and {1} within {2} evaluations of the end of task {0}.\n"
      "# offset: evaluations relative to the last evaluation of task {0}.\n"
      "source,model_id,offset,iteration,task,acc\n",
      options.boundary_task, options.boundary_task + 1, options.window);

  for (const auto& path : traces) {
    const auto trace = read_trace(path);
    const auto source = path.filename().string();
    for (const auto& [model_id, matrix] : matrices_by_model(trace)) {
      for (std::size_t r = 0; r < matrix.size(); ++r) {
        const auto& row = matrix.rows()[r];
        for (std::size_t t = 0; t < row.acc.size(); ++t) {
          task_acc << fmt::format("{},{},{},{},{},{}\n", source, model_id, row.iteration, r, t, row.acc[t]);
        }
        aaa_out << fmt::format("{},{},{},{},{}\n", source, model_id, row.iteration, r, aaa(matrix, r));
        wc_out << fmt::format("{},{},{},{},{}\n", source, model_id, row.iteration, r, wc_acc(matrix, r));
      }
      const auto b = static_cast<std::size_t>(options.boundary_task);
      if (b >= matrix.boundaries().size()) continue;
      const auto centre = static_cast<std::ptrdiff_t>(matrix.row_at_iteration(matrix.boundaries()[b]));
      const auto lo = std::max<std::ptrdiff_t>(0, centre - options.window);
      const auto hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(matrix.size()) - 1, centre + options.window);
      for (auto r = lo; r <= hi; ++r) {
        const auto& row = matrix.rows()[static_cast<std::size_t>(r)];
        for (std::size_t t = b; t <= b + 1 && t < row.acc.size(); ++t) {
          zoom << fmt::format("{},{},{},{},{},{}\n", source, model_id, r - centre, row.iteration, t, row.acc[t]);
        }
      }
    }
  }
  for (auto* f : {&task_acc, &aaa_out, &wc_out, &zoom}) {
    f->flush();
    if (!*f) throw IoError("cannot write plot data in " + out_dir.string());
  }
  return paths;
}

std::vector<std::pair<std::string, MetricsReport>> recompute_metrics(const Trace& trace) {
  std::vector<std::pair<std::string, MetricsReport>> out;
  for (const auto& [id, matrix] : matrices_by_model(trace)) {
    out.emplace_back(id, compute_report(matrix, matrix.size() - 1));
  }
  return out;
}

}  // namespace ocl
