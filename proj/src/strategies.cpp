#include "ocl/strategies.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "ocl/errors.hpp"

namespace ocl {

ReplayBuffer::ReplayBuffer(std::size_t capacity, std::uint64_t seed)
    : capacity_(capacity), rng_(make_rng(seed, rng_tag::kReservoir)) {
  if (capacity_ == 0) throw ConfigError("replay buffer capacity must be > 0");
  entries_.reserve(capacity_);
}

void ReplayBuffer::insert(Example example, std::optional<std::vector<double>> logits) {
  ++seen_;
  if (entries_.size() < capacity_) {
    entries_.push_back({std::move(example), std::move(logits)});
    return;
  }
  std::uniform_int_distribution<std::uint64_t> slot(0, seen_ - 1);
  const auto j = slot(rng_);
  if (j < capacity_) entries_[j] = {std::move(example), std::move(logits)};
}

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t n, Rng& rng) const {
  std::vector<std::size_t> out;
  if (entries_.empty() || n == 0) return out;
  if (n > entries_.size()) {
    std::uniform_int_distribution<std::size_t> pick(0, entries_.size() - 1);
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(pick(rng));
    return out;
  }
  // Partial Fisher-Yates.
  std::vector<std::size_t> idx(entries_.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(n);
  return idx;
}

std::vector<BufferEntry> ReplayBuffer::sample(std::size_t n, Rng& rng) const {
  std::vector<BufferEntry> out;
  for (auto i : sample_indices(n, rng)) out.push_back(entries_[i]);
  return out;
}

std::vector<BufferEntry> ReplayBuffer::sample(std::size_t n, std::uint64_t seed) const {
  auto rng = make_rng(seed, rng_tag::kReplaySample);
  return sample(n, rng);
}

std::string_view to_string(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::kEr: return "er";
    case StrategyKind::kErAce: return "er_ace";
    case StrategyKind::kMir: return "mir";
    case StrategyKind::kDer: return "der";
    case StrategyKind::kRar: return "rar";
  }
  return "?";
}

StrategyKind parse_strategy_kind(std::string_view name) {
  for (auto k : {StrategyKind::kEr, StrategyKind::kErAce, StrategyKind::kMir, StrategyKind::kDer,
                 StrategyKind::kRar}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError(fmt::format("unknown strategy '{}' (expected er, er_ace, mir, der or rar)", name));
}

void StrategyConfig::validate(int batch_size) const {
  if (der_alpha < 0 || der_beta < 0 || rar_noise_sigma < 0 || distill_alpha < 0) {
    throw ConfigError("strategy: coefficients must be >= 0");
  }
  if (rar_passes < 1) throw ConfigError("strategy: rar_passes must be >= 1");
  if (mir_candidates < batch_size / 2) throw ConfigError("strategy: mir_candidates must be >= batch_size / 2");
}

std::vector<MirPick> mir_select(const Network& net, const ReplayBuffer& buf, std::span<const Example> current,
                                const SgdConfig& sgd, std::size_t n, std::size_t candidates, Rng& rng) {
  if (buf.empty() || n == 0) return {};
  const auto idx = buf.sample_indices(std::min(candidates, buf.size()), rng);

  std::vector<Example> cand;
  cand.reserve(idx.size());
  for (auto i : idx) cand.push_back(buf.entries()[i].example);

  Network virtual_net = net;
  if (!current.empty()) sgd_step(virtual_net, loss_and_grad(net, current, CrossEntropy{}).grad, sgd);

  const auto before = per_example_cross_entropy(net, cand);
  const auto after = per_example_cross_entropy(virtual_net, cand);
  std::vector<MirPick> picks(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) picks[i] = {idx[i], after[i] - before[i]};
  std::sort(picks.begin(), picks.end(), [](const MirPick& a, const MirPick& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;
  });
  if (picks.size() > n) picks.resize(n);
  return picks;
}

LossAndGrad mtd_loss(const Network& net, const Network& teacher, std::span<const Example> batch, double alpha) {
  net.parameters().require_combinable(teacher.parameters(), "mtd_loss");
  auto out = loss_and_grad(net, batch, CrossEntropy{});
  if (alpha == 0.0) return out;
  DistillTo distill;
  distill.teacher_logits.reserve(batch.size());
  for (const auto& ex : batch) distill.teacher_logits.push_back(teacher.forward(ex.features));
  const auto term = loss_and_grad(net, batch, distill);
  out.loss += alpha * term.loss;
  out.grad.axpy(alpha, term.grad);
  return out;
}

Strategy::Strategy(StrategyConfig config, std::uint64_t seed)
    : config_(config),
      replay_rng_(make_rng(seed, rng_tag::kReplaySample)),
      noise_rng_(make_rng(seed, rng_tag::kAugment)) {}

std::vector<Example> Strategy::draw_replay(const Network& net, const ReplayBuffer& buf,
                                           std::span<const Example> current, const SgdConfig& sgd,
                                           std::vector<std::optional<std::vector<double>>>& logits) {
  std::vector<std::size_t> idx;
  if (config_.kind == StrategyKind::kMir) {
    for (const auto& p : mir_select(net, buf, current, sgd, current.size(),
                                    static_cast<std::size_t>(config_.mir_candidates), replay_rng_)) {
      idx.push_back(p.index);
    }
  } else {
    idx = buf.sample_indices(current.size(), replay_rng_);
  }
  std::vector<Example> replay;
  logits.clear();
  for (auto i : idx) {
    replay.push_back(buf.entries()[i].example);
    logits.push_back(buf.entries()[i].logits);
  }
  return replay;
}

LossAndGrad Strategy::strategy_loss(const Network& net, std::span<const Example> current,
                                    std::span<const Example> replay,
                                    const std::vector<std::optional<std::vector<double>>>& replay_logits) const {
  auto concat = [&] {
    std::vector<Example> all(current.begin(), current.end());
    all.insert(all.end(), replay.begin(), replay.end());
    return all;
  };

  switch (config_.kind) {
    case StrategyKind::kEr:
    case StrategyKind::kMir:
    case StrategyKind::kRar:
      return loss_and_grad(net, concat(), CrossEntropy{});

    case StrategyKind::kErAce: {
      MaskedCrossEntropy mask{std::vector<bool>(static_cast<std::size_t>(net.n_classes()), false)};
      for (const auto& ex : current) mask.allowed[ex.label] = true;
      auto out = loss_and_grad(net, current, mask);
      if (!replay.empty()) {
        const auto r = loss_and_grad(net, replay, CrossEntropy{});
        out.loss += r.loss;
        out.grad += r.grad;
      }
      return out;
    }

    case StrategyKind::kDer: {
      auto out = loss_and_grad(net, current, CrossEntropy{});
      if (replay.empty()) return out;
      std::vector<Example> with_logits;
      MseOnLogits mse;
      for (std::size_t i = 0; i < replay.size(); ++i) {
        if (!replay_logits[i]) continue;
        with_logits.push_back(replay[i]);
        mse.targets.push_back(*replay_logits[i]);
      }
      if (!with_logits.empty() && config_.der_alpha > 0.0) {
        const auto m = loss_and_grad(net, with_logits, mse);
        out.loss += config_.der_alpha * m.loss;
        out.grad.axpy(config_.der_alpha, m.grad);
      }
      if (config_.der_beta > 0.0) {
        const auto c = loss_and_grad(net, replay, CrossEntropy{});
        out.loss += config_.der_beta * c.loss;
        out.grad.axpy(config_.der_beta, c.grad);
      }
      return out;
    }
  }
  throw StateError("unhandled strategy kind");
}

void add_feature_noise(std::span<Example> examples, double sigma, Rng& rng) {
  if (sigma < 0.0) throw ArgumentError("add_feature_noise: sigma must be >= 0");
  if (sigma == 0.0) return;
  std::normal_distribution<double> noise(0.0, sigma);
  for (auto& ex : examples) {
    for (auto& v : ex.features) v += noise(rng);
  }
}

int Strategy::train_on_batch(Network& net, ReplayBuffer& buf, std::span<const Example> current,
                             const SgdConfig& sgd, const StepCallback& on_step, const Network* teacher) {
  if (current.empty()) return 0;
  const bool rar = config_.kind == StrategyKind::kRar;
  const int passes = rar ? config_.rar_passes : sgd.passes_per_batch;
  const bool resample = rar || config_.resample_replay_each_pass;
  const bool distill = config_.distill_alpha > 0.0 && teacher != nullptr;

  std::vector<Example> replay;
  std::vector<std::optional<std::vector<double>>> replay_logits;
  for (int pass = 0; pass < passes; ++pass) {
    if (pass == 0 || resample) replay = draw_replay(net, buf, current, sgd, replay_logits);

    std::vector<Example> cur(current.begin(), current.end());
    std::vector<Example> rep = replay;
    if (rar) {
      add_feature_noise(cur, config_.rar_noise_sigma, noise_rng_);
      add_feature_noise(rep, config_.rar_noise_sigma, noise_rng_);
    }

    auto step = strategy_loss(net, cur, rep, replay_logits);
    if (distill) {
      std::vector<Example> all = cur;
      all.insert(all.end(), rep.begin(), rep.end());
      DistillTo target;
      for (const auto& ex : all) target.teacher_logits.push_back(teacher->forward(ex.features));
      step.grad.axpy(config_.distill_alpha, loss_and_grad(net, all, target).grad);
    }
    sgd_step(net, step.grad, sgd);
    if (on_step) on_step(net);
  }

  for (const auto& ex : current) {
    if (config_.kind == StrategyKind::kDer) {
      buf.insert(ex, net.forward(ex.features));
    } else {
      buf.insert(ex);
    }
  }
  return passes;
}

}  // namespace ocl
