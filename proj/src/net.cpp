#include "ocl/net.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "ocl/errors.hpp"
#include "ocl/rng.hpp"

namespace ocl {

std::size_t layout_size(const Layout& layout) {
  std::size_t n = 0;
  for (const auto& e : layout) n += e.count;
  return n;
}

ParameterVector::ParameterVector(Layout layout)
    : layout_(std::move(layout)), values_(layout_size(layout_), 0.0) {}

ParameterVector::ParameterVector(Layout layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (values_.size() != layout_size(layout_)) {
    throw ShapeError(fmt::format("parameter vector has {} values but layout describes {}", values_.size(),
                                 layout_size(layout_)));
  }
}

void ParameterVector::require_combinable(const ParameterVector& other, std::string_view where) const {
  if (!combinable_with(other)) throw ShapeError(fmt::format("{}: parameter layouts differ", where));
}

ParameterVector& ParameterVector::axpy(double alpha, const ParameterVector& x) {
  require_combinable(x, "axpy");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += alpha * x.values_[i];
  return *this;
}

ParameterVector& ParameterVector::operator*=(double s) {
  for (auto& v : values_) v *= s;
  return *this;
}

void ParameterVector::set_zero() { std::fill(values_.begin(), values_.end(), 0.0); }

ParameterVector operator+(ParameterVector a, const ParameterVector& b) { return a += b; }
ParameterVector operator-(ParameterVector a, const ParameterVector& b) { return a -= b; }
ParameterVector operator*(double s, ParameterVector a) { return a *= s; }

namespace {

void check_layer_sizes(const std::vector<int>& sizes) {
  if (sizes.size() < 2) throw ShapeError("network needs at least an input and an output size");
  for (int s : sizes) {
    if (s < 1) throw ShapeError("network layer sizes must be positive");
  }
}

// Offsets of each layer's weight block and bias block in the flat vector.
struct LayerView {
  int in = 0;
  int out = 0;
  std::size_t weight = 0;
  std::size_t bias = 0;
};

std::vector<LayerView> layer_views(const std::vector<int>& sizes) {
  std::vector<LayerView> views;
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    LayerView v;
    v.in = sizes[l];
    v.out = sizes[l + 1];
    v.weight = offset;
    offset += static_cast<std::size_t>(v.in) * v.out;
    v.bias = offset;
    offset += static_cast<std::size_t>(v.out);
    views.push_back(v);
  }
  return views;
}

}  // namespace

Layout Network::layout_for(const std::vector<int>& layer_sizes) {
  check_layer_sizes(layer_sizes);
  Layout layout;
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    layout.push_back({fmt::format("fc{}.weight", l),
                      static_cast<std::size_t>(layer_sizes[l]) * static_cast<std::size_t>(layer_sizes[l + 1])});
    layout.push_back({fmt::format("fc{}.bias", l), static_cast<std::size_t>(layer_sizes[l + 1])});
  }
  return layout;
}

Network::Network(std::vector<int> layer_sizes)
    : layer_sizes_(std::move(layer_sizes)), params_(layout_for(layer_sizes_)) {}

Network::Network(std::vector<int> layer_sizes, ParameterVector parameters)
    : layer_sizes_(std::move(layer_sizes)), params_(std::move(parameters)) {
  if (params_.layout() != layout_for(layer_sizes_)) {
    throw ShapeError("network: parameter layout does not match layer sizes");
  }
}

Network Network::initialized(std::vector<int> layer_sizes, std::uint64_t seed) {
  Network net(std::move(layer_sizes));
  auto rng = make_rng(seed, rng_tag::kNetInit);
  auto values = net.params_.values();
  for (const auto& v : layer_views(net.layer_sizes_)) {
    const double limit = std::sqrt(6.0 / static_cast<double>(v.in + v.out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (std::size_t i = 0; i < static_cast<std::size_t>(v.in) * v.out; ++i) values[v.weight + i] = dist(rng);
  }
  return net;
}

void Network::set_parameters(ParameterVector params) {
  params_.require_combinable(params, "set_parameters");
  params_ = std::move(params);
}

std::vector<int> default_layer_sizes(int input_dim, int n_classes) { return {input_dim, 64, 64, n_classes}; }

// Forward pass that keeps every layer input for the backward pass.
struct NetworkBackprop {
  const Network& net;
  std::vector<LayerView> views;
  std::vector<std::vector<double>> inputs;  // inputs[l] feeds layer l
  std::vector<double> logits;

  explicit NetworkBackprop(const Network& n) : net(n), views(layer_views(n.layer_sizes_)) {
    inputs.resize(views.size());
  }

  void forward(std::span<const double> x) {
    if (static_cast<int>(x.size()) != net.input_dim()) {
      throw ShapeError(fmt::format("forward: expected {} features, got {}", net.input_dim(), x.size()));
    }
    const auto w = net.params_.values();
    inputs[0].assign(x.begin(), x.end());
    for (std::size_t l = 0; l < views.size(); ++l) {
      const auto& v = views[l];
      const auto& a = inputs[l];
      std::vector<double> z(static_cast<std::size_t>(v.out));
      for (int o = 0; o < v.out; ++o) {
        const double* row = &w[v.weight + static_cast<std::size_t>(o) * v.in];
        double acc = w[v.bias + o];
        for (int i = 0; i < v.in; ++i) acc += row[i] * a[i];
        z[o] = acc;
      }
      if (l + 1 < views.size()) {
        for (auto& zi : z) zi = zi > 0.0 ? zi : 0.0;
        inputs[l + 1] = std::move(z);
      } else {
        logits = std::move(z);
      }
    }
  }

  // Accumulates scale * dL/dtheta given dL/dlogits for the last forward().
  void backward(std::vector<double> delta, double scale, std::span<double> grad) const {
    const auto w = net.params_.values();
    for (std::size_t l = views.size(); l-- > 0;) {
      const auto& v = views[l];
      const auto& a = inputs[l];
      for (int o = 0; o < v.out; ++o) {
        const double d = scale * delta[o];
        if (d == 0.0) continue;
        double* g = &grad[v.weight + static_cast<std::size_t>(o) * v.in];
        for (int i = 0; i < v.in; ++i) g[i] += d * a[i];
        grad[v.bias + o] += d;
      }
      if (l == 0) break;
      std::vector<double> prev(static_cast<std::size_t>(v.in), 0.0);
      for (int o = 0; o < v.out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        const double* row = &w[v.weight + static_cast<std::size_t>(o) * v.in];
        for (int i = 0; i < v.in; ++i) prev[i] += row[i] * d;
      }
      for (int i = 0; i < v.in; ++i) {
        if (!(a[i] > 0.0)) prev[i] = 0.0;
      }
      delta = std::move(prev);
    }
  }
};

std::vector<double> Network::forward(std::span<const double> features) const {
  NetworkBackprop bp(*this);
  bp.forward(features);
  return std::move(bp.logits);
}

void SgdConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("sgd: learning_rate must be > 0");
  if (passes_per_batch < 1) throw ConfigError("sgd: passes_per_batch must be >= 1");
}

double log_sum_exp(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

std::vector<double> softmax(std::span<const double> z) {
  const double lse = log_sum_exp(z);
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) p[i] = std::exp(z[i] - lse);
  return p;
}

std::vector<double> predict_proba(const Network& net, std::span<const double> features) {
  return softmax(net.forward(features));
}

int predict_class(const Network& net, std::span<const double> features) {
  const auto z = net.forward(features);
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

namespace {

void check_label(const Network& net, const Example& ex) {
  if (ex.label < 0 || ex.label >= net.n_classes()) {
    throw ArgumentError(fmt::format("label {} outside [0, {})", ex.label, net.n_classes()));
  }
}

void check_spec(const Network& net, std::span<const Example> batch, const LossSpec& spec) {
  if (batch.empty()) throw ArgumentError("loss: empty batch");
  const auto n_classes = static_cast<std::size_t>(net.n_classes());
  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, MaskedCrossEntropy>) {
          if (s.allowed.size() != n_classes) throw ShapeError("masked cross-entropy: mask size != n_classes");
          if (std::none_of(s.allowed.begin(), s.allowed.end(), [](bool b) { return b; })) {
            throw ArgumentError("masked cross-entropy: empty class mask");
          }
        } else if constexpr (std::is_same_v<T, MseOnLogits> || std::is_same_v<T, DistillTo>) {
          const auto& targets = [&]() -> const auto& {
            if constexpr (std::is_same_v<T, MseOnLogits>) return s.targets;
            else return s.teacher_logits;
          }();
          if (targets.size() != batch.size()) throw ShapeError("loss: one target row per example required");
          for (const auto& row : targets) {
            if (row.size() != n_classes) throw ShapeError("loss: target row length != n_classes");
          }
        }
      },
      spec);
}

// Loss of one example and (optionally) dL/dlogits.
double output_loss(const LossSpec& spec, std::size_t i, std::span<const double> z, int label,
                   std::vector<double>* dz) {
  const std::size_t c = z.size();
  return std::visit(
      [&](const auto& s) -> double {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, CrossEntropy>) {
          const double lse = log_sum_exp(z);
          if (dz) {
            dz->resize(c);
            for (std::size_t k = 0; k < c; ++k) (*dz)[k] = std::exp(z[k] - lse);
            (*dz)[label] -= 1.0;
          }
          return lse - z[label];
        } else if constexpr (std::is_same_v<T, MaskedCrossEntropy>) {
          if (!s.allowed[label]) throw ArgumentError("masked cross-entropy: label outside class mask");
          std::vector<double> kept;
          for (std::size_t k = 0; k < c; ++k) {
            if (s.allowed[k]) kept.push_back(z[k]);
          }
          const double lse = log_sum_exp(kept);
          if (dz) {
            dz->assign(c, 0.0);
            for (std::size_t k = 0; k < c; ++k) {
              if (s.allowed[k]) (*dz)[k] = std::exp(z[k] - lse);
            }
            (*dz)[label] -= 1.0;
          }
          return lse - z[label];
        } else if constexpr (std::is_same_v<T, MseOnLogits>) {
          const auto& t = s.targets[i];
          double loss = 0.0;
          if (dz) dz->resize(c);
          for (std::size_t k = 0; k < c; ++k) {
            const double d = z[k] - t[k];
            loss += d * d;
            if (dz) (*dz)[k] = 2.0 * d / static_cast<double>(c);
          }
          return loss / static_cast<double>(c);
        } else {
          const auto q = softmax(s.teacher_logits[i]);
          const double lse = log_sum_exp(z);
          double loss = 0.0;
          if (dz) dz->resize(c);
          for (std::size_t k = 0; k < c; ++k) {
            loss -= q[k] * (z[k] - lse);
            if (dz) (*dz)[k] = std::exp(z[k] - lse) - q[k];
          }
          return loss;
        }
      },
      spec);
}

}  // namespace

LossAndGrad loss_and_grad(const Network& net, std::span<const Example> batch, const LossSpec& spec) {
  check_spec(net, batch, spec);
  LossAndGrad out{0.0, ParameterVector(net.parameters().layout())};
  NetworkBackprop bp(net);
  const double scale = 1.0 / static_cast<double>(batch.size());
  std::vector<double> dz;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    check_label(net, batch[i]);
    bp.forward(batch[i].features);
    out.loss += output_loss(spec, i, bp.logits, batch[i].label, &dz);
    bp.backward(dz, scale, out.grad.values());
  }
  out.loss *= scale;
  return out;
}

double batch_loss(const Network& net, std::span<const Example> batch, const LossSpec& spec) {
  check_spec(net, batch, spec);
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    check_label(net, batch[i]);
    loss += output_loss(spec, i, net.forward(batch[i].features), batch[i].label, nullptr);
  }
  return loss / static_cast<double>(batch.size());
}

std::vector<double> per_example_cross_entropy(const Network& net, std::span<const Example> batch) {
  std::vector<double> out;
  out.reserve(batch.size());
  for (const auto& ex : batch) {
    check_label(net, ex);
    const auto z = net.forward(ex.features);
    out.push_back(log_sum_exp(z) - z[ex.label]);
  }
  return out;
}

void sgd_step(Network& net, const ParameterVector& grad, const SgdConfig& cfg) {
  net.parameters().axpy(-cfg.learning_rate, grad);
}

std::string encode_checkpoint(const ParameterVector& params) {
  std::string out = "layout: ";
  for (std::size_t i = 0; i < params.layout().size(); ++i) {
    const auto& e = params.layout()[i];
    if (e.name.find_first_of("(),;\n") != std::string::npos) {
      throw ArgumentError("checkpoint: layer name contains a reserved character: " + e.name);
    }
    if (i) out += ';';
    out += fmt::format("({},{})", e.name, e.count);
  }
  out += '\n';
  const std::size_t header = out.size();
  out.resize(header + 4 * params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(params.values()[i]));
    for (int b = 0; b < 4; ++b) out[header + 4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
  }
  return out;
}

ParameterVector decode_checkpoint(std::string_view bytes) {
  constexpr std::string_view kPrefix = "layout: ";
  const auto eol = bytes.find('\n');
  if (eol == std::string_view::npos || bytes.substr(0, kPrefix.size()) != kPrefix) {
    throw ParseError(1, "checkpoint: missing layout header");
  }
  std::string_view spec = bytes.substr(kPrefix.size(), eol - kPrefix.size());
  Layout layout;
  while (!spec.empty()) {
    const auto close = spec.find(')');
    if (spec.front() != '(' || close == std::string_view::npos) throw ParseError(1, "checkpoint: bad layout entry");
    const auto entry = spec.substr(1, close - 1);
    const auto comma = entry.rfind(',');
    if (comma == std::string_view::npos) throw ParseError(1, "checkpoint: bad layout entry");
    LayoutEntry e;
    e.name = std::string(entry.substr(0, comma));
    const auto count = entry.substr(comma + 1);
    try {
      std::size_t used = 0;
      e.count = std::stoull(std::string(count), &used);
      if (used != count.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ParseError(1, "checkpoint: bad element count '" + std::string(count) + "'");
    }
    layout.push_back(std::move(e));
    spec.remove_prefix(close + 1);
    if (!spec.empty()) {
      if (spec.front() != ';') throw ParseError(1, "checkpoint: expected ';' between layout entries");
      spec.remove_prefix(1);
    }
  }
  const auto payload = bytes.substr(eol + 1);
  const std::size_t n = layout_size(layout);
  if (payload.size() != 4 * n) {
    throw ShapeError(fmt::format("checkpoint: payload holds {} bytes, layout needs {}", payload.size(), 4 * n));
  }
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[4 * i + b])) << (8 * b);
    values[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return ParameterVector(std::move(layout), std::move(values));
}

void save_checkpoint(const std::filesystem::path& path, const ParameterVector& params) {
  const auto bytes = encode_checkpoint(params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

ParameterVector load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str());
}

}  // namespace ocl
