#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ocl/ensemble.hpp"
#include "ocl/errors.hpp"
#include "ocl/eval.hpp"
#include "ocl/harness.hpp"
#include "ocl/net.hpp"
#include "ocl/strategies.hpp"
#include "ocl/stream.hpp"

namespace py = pybind11;
using namespace pybind11::literals;

namespace {

std::vector<ocl::Example> to_examples(const std::vector<std::vector<double>>& features, const std::vector<int>& labels) {
  if (features.size() != labels.size()) throw ocl::ShapeError("features and labels differ in length");
  std::vector<ocl::Example> out;
  out.reserve(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) out.push_back({features[i], labels[i]});
  return out;
}

py::tuple batch_tuple(const std::vector<ocl::Example>& batch) {
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (const auto& ex : batch) {
    x.push_back(ex.features);
    y.push_back(ex.label);
  }
  return py::make_tuple(x, y);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Online continual learning with temporal-ensemble evaluation models";

  auto base = py::register_exception<ocl::Error>(m, "OclError", PyExc_RuntimeError);
  py::register_exception<ocl::ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ocl::ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<ocl::ArgumentError>(m, "ArgumentError", base.ptr());
  py::register_exception<ocl::StateError>(m, "StateError", base.ptr());
  py::register_exception<ocl::NumericError>(m, "NumericError", base.ptr());
  py::register_exception<ocl::ParseError>(m, "ParseError", base.ptr());
  py::register_exception<ocl::IoError>(m, "IoError", base.ptr());
  py::register_exception<ocl::SchemaError>(m, "SchemaError", base.ptr());

  // stream
  py::class_<ocl::StreamConfig>(m, "StreamConfig")
      .def(py::init<>())
      .def_readwrite("n_tasks", &ocl::StreamConfig::n_tasks)
      .def_readwrite("classes_per_task", &ocl::StreamConfig::classes_per_task)
      .def_readwrite("input_dim", &ocl::StreamConfig::input_dim)
      .def_readwrite("batch_size", &ocl::StreamConfig::batch_size)
      .def_readwrite("seed", &ocl::StreamConfig::seed)
      .def_readwrite("train_per_class", &ocl::StreamConfig::train_per_class)
      .def_readwrite("test_per_class", &ocl::StreamConfig::test_per_class)
      .def_readwrite("val_fraction", &ocl::StreamConfig::val_fraction);

  py::class_<ocl::Stream>(m, "Stream")
      .def_property_readonly("n_tasks", &ocl::Stream::n_tasks)
      .def_property_readonly("n_classes", &ocl::Stream::n_classes)
      .def_property_readonly("class_to_task", &ocl::Stream::class_to_task)
      .def("total_minibatches", &ocl::Stream::total_minibatches)
      .def("task_classes", [](const ocl::Stream& s, int t) { return s.tasks().at(t).spec.class_ids; })
      .def("split", [](const ocl::Stream& s, int t, const std::string& which) {
        const auto& task = s.tasks().at(t);
        if (which == "train") return batch_tuple(task.train);
        if (which == "val") return batch_tuple(task.val);
        if (which == "test") return batch_tuple(task.test);
        throw ocl::ArgumentError("split must be train, val or test");
      }, "task"_a, "which"_a)
      .def("next_minibatch", [](ocl::Stream& s) -> py::object {
        auto b = s.next_minibatch();
        if (!b) return py::none();
        auto xy = batch_tuple(b->examples);
        return py::make_tuple(xy[0], xy[1], b->task_id);
      }, "Returns (features, labels, task_id) or None at the end of the stream.")
      .def("reset", &ocl::Stream::reset);

  m.def("generate_synthetic_stream", &ocl::generate_synthetic_stream, "config"_a);

  // net
  py::class_<ocl::ParameterVector>(m, "ParameterVector")
      .def_property_readonly("values", [](const ocl::ParameterVector& p) {
        return std::vector<double>(p.values().begin(), p.values().end());
      })
      .def_property_readonly("layout", [](const ocl::ParameterVector& p) {
        std::vector<std::pair<std::string, std::size_t>> out;
        for (const auto& e : p.layout()) out.emplace_back(e.name, e.count);
        return out;
      })
      .def("__len__", &ocl::ParameterVector::size)
      .def("with_values", [](const ocl::ParameterVector& p, std::vector<double> v) {
        return ocl::ParameterVector(p.layout(), std::move(v));
      });

  py::class_<ocl::Network>(m, "Network")
      .def(py::init<std::vector<int>>(), "layer_sizes"_a)
      .def_static("initialized", &ocl::Network::initialized, "layer_sizes"_a, "seed"_a)
      .def_property_readonly("layer_sizes", &ocl::Network::layer_sizes)
      .def_property("parameters", py::overload_cast<>(&ocl::Network::parameters, py::const_),
                    &ocl::Network::set_parameters)
      .def("forward", [](const ocl::Network& n, std::vector<double> x) { return n.forward(x); })
      .def("predict_proba", [](const ocl::Network& n, std::vector<double> x) { return ocl::predict_proba(n, x); });

  m.def("cross_entropy", [](const ocl::Network& net, const std::vector<std::vector<double>>& x,
                            const std::vector<int>& y) {
    const auto r = ocl::loss_and_grad(net, to_examples(x, y), ocl::CrossEntropy{});
    return py::make_tuple(r.loss, r.grad);
  }, "net"_a, "features"_a, "labels"_a, "Batch-mean cross-entropy and its gradient.");

  py::class_<ocl::SgdConfig>(m, "SgdConfig")
      .def(py::init<>())
      .def_readwrite("learning_rate", &ocl::SgdConfig::learning_rate)
      .def_readwrite("passes_per_batch", &ocl::SgdConfig::passes_per_batch);
  m.def("sgd_step", [](ocl::Network net, const ocl::ParameterVector& g, const ocl::SgdConfig& cfg) {
    ocl::sgd_step(net, g, cfg);
    return net;
  });

  // strategies
  py::class_<ocl::ReplayBuffer>(m, "ReplayBuffer")
      .def(py::init<std::size_t, std::uint64_t>(), "capacity"_a, "seed"_a)
      .def("insert", [](ocl::ReplayBuffer& b, std::vector<double> x, int y) { b.insert({std::move(x), y}); })
      .def("labels", [](const ocl::ReplayBuffer& b) {
        std::vector<int> out;
        for (const auto& e : b.entries()) out.push_back(e.example.label);
        return out;
      })
      .def("sample_labels", [](const ocl::ReplayBuffer& b, std::size_t n, std::uint64_t seed) {
        std::vector<int> out;
        for (const auto& e : b.sample(n, seed)) out.push_back(e.example.label);
        return out;
      })
      .def("__len__", &ocl::ReplayBuffer::size)
      .def_property_readonly("capacity", &ocl::ReplayBuffer::capacity)
      .def_property_readonly("seen_count", &ocl::ReplayBuffer::seen_count);

  // ensemble
  py::enum_<ocl::EmaInit>(m, "EmaInit")
      .value("INITIAL_MODEL", ocl::EmaInit::kInitialModel)
      .value("FIRST_UPDATE", ocl::EmaInit::kFirstUpdate);

  py::class_<ocl::EmaState>(m, "EmaState")
      .def(py::init<ocl::ParameterVector, double, double, int, ocl::EmaInit>(), "initial"_a, "momentum"_a = 0.99,
           "warmup_momentum"_a = 0.9, "warmup_iters"_a = 50, "init"_a = ocl::EmaInit::kInitialModel)
      .def("update", &ocl::EmaState::update)
      .def_property_readonly("parameters", &ocl::EmaState::parameters)
      .def_property_readonly("iteration", &ocl::EmaState::iteration)
      .def_property_readonly("effective_momentum", &ocl::EmaState::effective_momentum);

  py::class_<ocl::WeightScheme>(m, "WeightScheme")
      .def_static("parse", &ocl::WeightScheme::parse)
      .def_property_readonly("name", &ocl::WeightScheme::name);

  py::class_<ocl::EnsembleAccumulator>(m, "EnsembleAccumulator")
      .def(py::init<ocl::WeightScheme>())
      .def("update", &ocl::EnsembleAccumulator::update)
      .def("add", &ocl::EnsembleAccumulator::add, "theta"_a, "weight"_a)
      .def("mean", &ocl::EnsembleAccumulator::mean)
      .def_property_readonly("iteration", &ocl::EnsembleAccumulator::iteration);

  m.def("task_weight_mass", &ocl::task_weight_mass, "lam"_a, "iters_per_task"_a, "tasks_back"_a);

  // eval
  py::class_<ocl::AccuracyMatrix>(m, "AccuracyMatrix")
      .def(py::init<>())
      .def("append", &ocl::AccuracyMatrix::append, "iteration"_a, "current_task"_a, "acc"_a)
      .def("__len__", &ocl::AccuracyMatrix::size)
      .def_property_readonly("boundaries", &ocl::AccuracyMatrix::boundaries);

  auto last = [](const ocl::AccuracyMatrix& mat) {
    if (mat.empty()) throw ocl::ArgumentError("empty accuracy matrix");
    return mat.size() - 1;
  };
  m.def("aaa", [=](const ocl::AccuracyMatrix& mat) { return ocl::aaa(mat, last(mat)); });
  m.def("avg_acc", [=](const ocl::AccuracyMatrix& mat) { return ocl::avg_acc(mat, last(mat)); });
  m.def("min_acc", [=](const ocl::AccuracyMatrix& mat) { return ocl::min_acc(mat, last(mat)); });
  m.def("wc_acc", [=](const ocl::AccuracyMatrix& mat) { return ocl::wc_acc(mat, last(mat)); });
  m.def("rag", [=](const ocl::AccuracyMatrix& mat) { return ocl::rag(mat, last(mat)); });
  m.def("stability_gap_depth", [](const ocl::AccuracyMatrix& mat, int task) {
    return ocl::stability_gap_trace(mat, task).depth;
  });

  // harness
  m.def("run_experiment_json", [](const std::string& config_text) {
    py::gil_scoped_release release;
    return ocl::summary_json(ocl::run_experiment(ocl::parse_config(config_text)));
  }, "config_text"_a, "Runs an INI config and returns summary.json contents.");
}
