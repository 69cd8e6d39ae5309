#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ocl/net.hpp"
#include "ocl/rng.hpp"
#include "ocl/stream.hpp"

namespace ocl {

struct BufferEntry {
  Example example;
  std::optional<std::vector<double>> logits;
};

// Bounded replay memory with reservoir insertion.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, std::uint64_t seed);

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::uint64_t seen_count() const { return seen_; }
  const std::vector<BufferEntry>& entries() const { return entries_; }

  // Appends while under capacity; afterwards the N-th candidate replaces a
  // uniformly chosen slot with probability capacity / N.
  void insert(Example example, std::optional<std::vector<double>> logits = std::nullopt);

  // Uniform without replacement when n <= size(), with replacement otherwise.
  // An empty buffer yields no indices.
  std::vector<std::size_t> sample_indices(std::size_t n, Rng& rng) const;
  std::vector<BufferEntry> sample(std::size_t n, Rng& rng) const;
  std::vector<BufferEntry> sample(std::size_t n, std::uint64_t seed) const;

 private:
  std::size_t capacity_;
  std::vector<BufferEntry> entries_;
  std::uint64_t seen_ = 0;
  Rng rng_;
};

enum class StrategyKind { kEr, kErAce, kMir, kDer, kRar };

std::string_view to_string(StrategyKind kind);
StrategyKind parse_strategy_kind(std::string_view name);

struct StrategyConfig {
  StrategyKind kind = StrategyKind::kEr;
  double der_alpha = 0.1;
  double der_beta = 0.5;
  int rar_passes = 3;
  double rar_noise_sigma = 0.1;
  int mir_candidates = 64;
  // Weight of the mean-teacher distillation term; 0 disables it.
  double distill_alpha = 0.0;
  // Draw a fresh replay half on every pass over a mini-batch. RAR always does.
  bool resample_replay_each_pass = true;

  void validate(int batch_size) const;
};

struct MirPick {
  std::size_t index = 0;  // position in the buffer
  double score = 0.0;     // loss after virtual step - loss before
};

// Scores up to `candidates` uniformly drawn buffer entries by how much a
// virtual SGD step on `current` increases their loss and returns the top n,
// ties broken by ascending buffer index. `net` is not modified.
std::vector<MirPick> mir_select(const Network& net, const ReplayBuffer& buf, std::span<const Example> current,
                                const SgdConfig& sgd, std::size_t n, std::size_t candidates, Rng& rng);

// CE(student, y) + alpha * CE(student, softmax(teacher)). No gradient flows
// into the teacher.
LossAndGrad mtd_loss(const Network& net, const Network& teacher, std::span<const Example> batch, double alpha);

// Adds N(0, sigma^2) noise to every feature. Used as RAR's augmentation.
void add_feature_noise(std::span<Example> examples, double sigma, Rng& rng);

// Called after every optimizer iteration with the updated network.
using StepCallback = std::function<void(const Network&)>;

// Online replay learner. Only ever sees example spans, never task ids.
class Strategy {
 public:
  Strategy(StrategyConfig config, std::uint64_t seed);

  const StrategyConfig& config() const { return config_; }

  // Runs the configured number of passes over `current` (each pass mixes in a
  // replay half of equal size), then inserts `current` into the buffer.
  // `teacher` is only consulted when distill_alpha > 0. Returns the number of
  // optimizer iterations performed.
  int train_on_batch(Network& net, ReplayBuffer& buf, std::span<const Example> current, const SgdConfig& sgd,
                     const StepCallback& on_step = {}, const Network* teacher = nullptr);

 private:
  std::vector<Example> draw_replay(const Network& net, const ReplayBuffer& buf, std::span<const Example> current,
                                   const SgdConfig& sgd, std::vector<std::optional<std::vector<double>>>& logits);
  LossAndGrad strategy_loss(const Network& net, std::span<const Example> current, std::span<const Example> replay,
                            const std::vector<std::optional<std::vector<double>>>& replay_logits) const;

  StrategyConfig config_;
  Rng replay_rng_;
  Rng noise_rng_;
};

}  // namespace ocl
