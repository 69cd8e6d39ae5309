#include "ocl/ensemble.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "ocl/errors.hpp"
#include "ocl/rng.hpp"

namespace ocl {

EmaState::EmaState(ParameterVector initial, double momentum, double warmup_momentum, int warmup_iters, EmaInit init)
    : params_(std::move(initial)),
      momentum_(momentum),
      warmup_momentum_(warmup_momentum),
      warmup_iters_(warmup_iters),
      init_(init) {
  if (!(momentum >= 0.0 && momentum <= 1.0) || !(warmup_momentum >= 0.0 && warmup_momentum <= 1.0)) {
    throw ConfigError("ema: momentum values must lie in [0, 1]");
  }
  if (warmup_iters < 0) throw ConfigError("ema: warmup_iters must be >= 0");
}

double EmaState::effective_momentum() const {
  return iteration_ < warmup_iters_ ? warmup_momentum_ : momentum_;
}

void EmaState::update(const ParameterVector& theta) {
  params_.require_combinable(theta, "ema_update");
  if (iteration_ == 0 && init_ == EmaInit::kFirstUpdate) params_ = theta;
  const double m = effective_momentum();
  auto ema = params_.values();
  const auto cur = theta.values();
  for (std::size_t i = 0; i < ema.size(); ++i) ema[i] = m * ema[i] + (1.0 - m) * cur[i];
  ++iteration_;
}

std::string WeightScheme::name() const {
  switch (kind) {
    case SchemeKind::kUniform: return "uniform";
    case SchemeKind::kLinear: return "linear";
    case SchemeKind::kLogarithmic: return "logarithmic";
    case SchemeKind::kQuadratic: return "quadratic";
    case SchemeKind::kEmaRecursive: return fmt::format("ema_recursive:{}", lambda);
  }
  return "?";
}

WeightScheme WeightScheme::parse(std::string_view text) {
  if (text == "uniform") return {SchemeKind::kUniform};
  if (text == "linear") return {SchemeKind::kLinear};
  if (text == "logarithmic") return {SchemeKind::kLogarithmic};
  if (text == "quadratic") return {SchemeKind::kQuadratic};
  constexpr std::string_view kEma = "ema_recursive";
  if (text.substr(0, kEma.size()) == kEma) {
    WeightScheme s{SchemeKind::kEmaRecursive, 0.99};
    auto rest = text.substr(kEma.size());
    if (!rest.empty()) {
      if (rest.front() != ':') throw ConfigError(fmt::format("bad weight scheme '{}'", text));
      rest.remove_prefix(1);
      auto [p, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), s.lambda);
      if (ec != std::errc() || p != rest.data() + rest.size()) {
        throw ConfigError(fmt::format("bad lambda in weight scheme '{}'", text));
      }
    }
    if (!(s.lambda > 0.0 && s.lambda < 1.0)) throw ConfigError("ema_recursive lambda must lie in (0, 1)");
    return s;
  }
  throw ConfigError(fmt::format(
      "unknown weight scheme '{}' (expected uniform, linear, logarithmic, quadratic or ema_recursive:<lambda>)",
      text));
}

EnsembleAccumulator::EnsembleAccumulator(WeightScheme scheme) : scheme_(scheme) {}

void EnsembleAccumulator::update(const ParameterVector& theta) {
  const auto i = static_cast<double>(iteration_ + 1);
  const double unit = std::exp(-log_scale_);  // absolute weight 1 in relative units
  double w = 0.0;
  if (iteration_ == 0) {
    w = 1.0;
  } else {
    switch (scheme_.kind) {
      case SchemeKind::kEmaRecursive: w = last_weight_ / scheme_.lambda; break;
      case SchemeKind::kUniform: w = unit; break;
      case SchemeKind::kLinear: w = i * unit; break;
      case SchemeKind::kLogarithmic: w = last_weight_ + std::log(i) * unit; break;
      case SchemeKind::kQuadratic: w = last_weight_ + i * i * unit; break;
    }
  }
  fold(theta, w);
}

void EnsembleAccumulator::add(const ParameterVector& theta, double weight) {
  if (!(weight > 0.0) || !std::isfinite(weight)) throw ArgumentError("ensemble weight must be finite and > 0");
  fold(theta, weight * std::exp(-log_scale_));
}

void EnsembleAccumulator::fold(const ParameterVector& theta, double w) {
  if (!std::isfinite(w) || !(w > 0.0)) {
    throw NumericError(fmt::format("ensemble weight became non-finite at iteration {}", iteration_ + 1));
  }
  if (iteration_ == 0) {
    mean_ = theta;
  } else {
    mean_.require_combinable(theta, "ensemble_update");
  }
  const double total = weight_total_ + w;
  const double keep = weight_total_ / total;
  const double take = w / total;
  auto m = mean_.values();
  const auto x = theta.values();
  for (std::size_t k = 0; k < m.size(); ++k) m[k] = keep * m[k] + take * x[k];
  log_scale_ += std::log(total);
  last_weight_ = take;
  weight_total_ = 1.0;
  ++iteration_;
}

const ParameterVector& EnsembleAccumulator::mean() const {
  if (empty()) throw StateError("ensemble accumulator has no models yet");
  return mean_;
}

Network ensemble_extract(const EnsembleAccumulator& acc, const Network& like) {
  return Network(like.layer_sizes(), acc.mean());
}

double task_weight_mass(double lambda, int iters_per_task, int tasks_back) {
  if (!(lambda > 0.0 && lambda < 1.0)) throw ArgumentError("task_weight_mass: lambda must lie in (0, 1)");
  if (iters_per_task < 1) throw ArgumentError("task_weight_mass: iters_per_task must be >= 1");
  if (tasks_back < 0) throw ArgumentError("task_weight_mass: tasks_back must be >= 0");
  const double per_task = std::pow(lambda, iters_per_task);
  return std::pow(per_task, tasks_back) * (1.0 - per_task);
}

CheckpointStore::CheckpointStore(int save_every, std::filesystem::path directory)
    : save_every_(save_every), directory_(std::move(directory)) {
  if (save_every_ < 1) throw ConfigError("checkpoint store: save_every must be >= 1");
  if (!directory_.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(directory_, ec);
    if (ec) throw IoError("cannot create checkpoint directory " + directory_.string() + ": " + ec.message());
    std::ofstream manifest(directory_ / "manifest.csv", std::ios::trunc);
    if (!manifest) throw IoError("cannot write checkpoint manifest in " + directory_.string());
    manifest << "iteration,task_id\n";
  }
}

std::string CheckpointStore::filename_for(std::int64_t iteration) { return fmt::format("ckpt_{:07}.bin", iteration); }

void CheckpointStore::save(std::int64_t iteration, int task_id, const ParameterVector& params) {
  if (!due(iteration)) {
    throw StateError(fmt::format("checkpoint at iteration {} is not a multiple of {}", iteration, save_every_));
  }
  if (!checkpoints_.empty() && iteration <= checkpoints_.back().iteration) {
    throw StateError(fmt::format("checkpoint iteration {} is not after {}", iteration, checkpoints_.back().iteration));
  }
  if (!directory_.empty()) {
    save_checkpoint(directory_ / filename_for(iteration), params);
    std::ofstream manifest(directory_ / "manifest.csv", std::ios::app);
    manifest << iteration << ',' << task_id << '\n';
    if (!manifest) throw IoError("cannot append to checkpoint manifest in " + directory_.string());
  }
  checkpoints_.push_back({iteration, task_id, params});
}

CheckpointStore CheckpointStore::load(const std::filesystem::path& directory, int save_every) {
  std::ifstream manifest(directory / "manifest.csv");
  if (!manifest) throw IoError("cannot open checkpoint manifest in " + directory.string());
  CheckpointStore store(save_every);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ParseError(line_no, "manifest row needs iteration,task_id");
    std::int64_t iteration = 0;
    int task_id = 0;
    const char* b = line.data();
    const char* e = line.data() + line.size();
    auto r1 = std::from_chars(b, b + comma, iteration);
    auto r2 = std::from_chars(b + comma + 1, e, task_id);
    if (r1.ec != std::errc() || r2.ec != std::errc()) throw ParseError(line_no, "malformed manifest row");
    store.save(iteration, task_id, load_checkpoint(directory / filename_for(iteration)));
  }
  return store;
}

std::vector<Checkpoint> sample_covering_ensemble(const CheckpointStore& store, int n_models, int n_covered_tasks,
                                                 std::uint64_t seed) {
  if (n_models < 1) throw ArgumentError("covering ensemble: n_models must be >= 1");
  const auto& all = store.checkpoints();
  if (all.empty()) throw ArgumentError("covering ensemble: no checkpoints");

  std::vector<int> tasks;
  for (const auto& c : all) {
    if (tasks.empty() || tasks.back() != c.task_id) tasks.push_back(c.task_id);
  }
  if (n_covered_tasks < 1 || n_covered_tasks > static_cast<int>(tasks.size())) {
    throw ArgumentError(fmt::format("covering ensemble: checkpoints span {} tasks, {} requested", tasks.size(),
                                    n_covered_tasks));
  }
  const std::vector<int> covered(tasks.end() - n_covered_tasks, tasks.end());

  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i + 1 < all.size(); ++i) {
    if (std::find(covered.begin(), covered.end(), all[i].task_id) != covered.end()) pool.push_back(i);
  }
  const auto want = static_cast<std::size_t>(n_models - 1);
  if (pool.size() < want) {
    throw ArgumentError(fmt::format("covering ensemble: {} checkpoints available over the last {} tasks, need {}",
                                    pool.size(), n_covered_tasks, want));
  }

  auto rng = make_rng(seed, rng_tag::kCovering);
  for (std::size_t i = 0; i < want; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(want);
  std::sort(pool.begin(), pool.end());

  std::vector<Checkpoint> members;
  members.reserve(want + 1);
  for (auto i : pool) members.push_back(all[i]);
  members.push_back(all.back());
  return members;
}

std::vector<bool> predictable_classes(int task_id, std::span<const int> class_to_task) {
  std::vector<bool> out(class_to_task.size());
  for (std::size_t c = 0; c < class_to_task.size(); ++c) out[c] = class_to_task[c] <= task_id;
  return out;
}

std::vector<double> naive_ensemble_predict(std::span<const EnsembleMember> members, std::span<const double> features) {
  if (members.empty()) throw ArgumentError("naive ensemble: no members");
  const auto n_classes = static_cast<std::size_t>(members.front().net.n_classes());
  std::vector<double> sum(n_classes, 0.0);
  std::vector<int> count(n_classes, 0);
  for (const auto& m : members) {
    if (m.predictable.size() != n_classes) throw ShapeError("naive ensemble: predictable set size != n_classes");
    const auto z = m.net.forward(features);
    std::vector<double> kept;
    for (std::size_t c = 0; c < n_classes; ++c) {
      if (m.predictable[c]) kept.push_back(z[c]);
    }
    if (kept.empty()) continue;
    const double lse = log_sum_exp(kept);
    for (std::size_t c = 0; c < n_classes; ++c) {
      if (!m.predictable[c]) continue;
      sum[c] += std::exp(z[c] - lse);
      ++count[c];
    }
  }
  for (std::size_t c = 0; c < n_classes; ++c) sum[c] = count[c] ? sum[c] / count[c] : 0.0;
  return sum;
}

}  // namespace ocl
