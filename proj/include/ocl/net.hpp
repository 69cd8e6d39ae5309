#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ocl/stream.hpp"

namespace ocl {

struct LayoutEntry {
  std::string name;
  std::size_t count = 0;

  bool operator==(const LayoutEntry&) const = default;
};

using Layout = std::vector<LayoutEntry>;

std::size_t layout_size(const Layout& layout);

// Flat weight vector of a network. Two vectors combine only when their
// layouts are identical; every arithmetic operation checks this.
class ParameterVector {
 public:
  ParameterVector() = default;
  explicit ParameterVector(Layout layout);
  ParameterVector(Layout layout, std::vector<double> values);

  const Layout& layout() const { return layout_; }
  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  std::size_t size() const { return values_.size(); }

  bool combinable_with(const ParameterVector& other) const { return layout_ == other.layout_; }
  void require_combinable(const ParameterVector& other, std::string_view where) const;

  // this += alpha * x
  ParameterVector& axpy(double alpha, const ParameterVector& x);
  ParameterVector& operator+=(const ParameterVector& x) { return axpy(1.0, x); }
  ParameterVector& operator-=(const ParameterVector& x) { return axpy(-1.0, x); }
  ParameterVector& operator*=(double s);
  void set_zero();

  bool operator==(const ParameterVector&) const = default;

 private:
  Layout layout_;
  std::vector<double> values_;
};

ParameterVector operator+(ParameterVector a, const ParameterVector& b);
ParameterVector operator-(ParameterVector a, const ParameterVector& b);
ParameterVector operator*(double s, ParameterVector a);

// Fully connected ReLU classifier. Weights of layer l are stored row-major
// (out x in) under "fc{l}.weight", followed by "fc{l}.bias".
class Network {
 public:
  explicit Network(std::vector<int> layer_sizes);
  Network(std::vector<int> layer_sizes, ParameterVector parameters);

  // Glorot-uniform weights, zero biases.
  static Network initialized(std::vector<int> layer_sizes, std::uint64_t seed);

  static Layout layout_for(const std::vector<int>& layer_sizes);

  const std::vector<int>& layer_sizes() const { return layer_sizes_; }
  int input_dim() const { return layer_sizes_.front(); }
  int n_classes() const { return layer_sizes_.back(); }
  std::size_t n_layers() const { return layer_sizes_.size() - 1; }

  const ParameterVector& parameters() const { return params_; }
  ParameterVector& parameters() { return params_; }
  void set_parameters(ParameterVector params);

  std::vector<double> forward(std::span<const double> features) const;

 private:
  friend struct NetworkBackprop;

  std::vector<int> layer_sizes_;
  ParameterVector params_;
};

std::vector<int> default_layer_sizes(int input_dim, int n_classes);

struct SgdConfig {
  double learning_rate = 0.1;
  int passes_per_batch = 3;

  void validate() const;
};

struct CrossEntropy {};

// Softmax restricted to the allowed classes; masked-out classes receive zero
// probability and zero gradient.
struct MaskedCrossEntropy {
  std::vector<bool> allowed;
};

// Mean squared error between logits and per-example targets, averaged over
// classes and batch.
struct MseOnLogits {
  std::vector<std::vector<double>> targets;
};

// Cross-entropy against softmax(teacher_logits) at temperature 1. The teacher
// is a constant; labels are ignored.
struct DistillTo {
  std::vector<std::vector<double>> teacher_logits;
};

using LossSpec = std::variant<CrossEntropy, MaskedCrossEntropy, MseOnLogits, DistillTo>;

struct LossAndGrad {
  double loss = 0.0;
  ParameterVector grad;
};

LossAndGrad loss_and_grad(const Network& net, std::span<const Example> batch, const LossSpec& spec);
double batch_loss(const Network& net, std::span<const Example> batch, const LossSpec& spec);
std::vector<double> per_example_cross_entropy(const Network& net, std::span<const Example> batch);

void sgd_step(Network& net, const ParameterVector& grad, const SgdConfig& cfg);

double log_sum_exp(std::span<const double> z);
std::vector<double> softmax(std::span<const double> z);
std::vector<double> predict_proba(const Network& net, std::span<const double> features);
int predict_class(const Network& net, std::span<const double> features);

// Checkpoint wire format: text line `layout: (name,count);(name,count);...\n`
// followed by the values as little-endian IEEE-754 binary32.
std::string encode_checkpoint(const ParameterVector& params);
ParameterVector decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const ParameterVector& params);
ParameterVector load_checkpoint(const std::filesystem::path& path);

}  // namespace ocl
