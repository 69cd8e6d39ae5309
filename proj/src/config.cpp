#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include "ocl/errors.hpp"
#include "ocl/harness.hpp"

namespace ocl {

namespace pt = boost::property_tree;

namespace {

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"stream",
       {"source", "n_tasks", "classes_per_task", "input_dim", "batch_size", "train_per_class", "test_per_class",
        "val_fraction", "path", "test_path"}},
      {"model", {"hidden"}},
      {"strategy",
       {"kind", "der_alpha", "der_beta", "rar_passes", "rar_noise_sigma", "mir_candidates", "distill_alpha",
        "resample_replay_each_pass"}},
      {"sgd", {"learning_rate", "passes_per_batch"}},
      {"ema", {"enabled", "lambda", "warmup_momentum", "warmup_iters", "init"}},
      {"ensembles", {"schemes"}},
      {"run", {"seeds", "buffer_capacity", "output_dir", "checkpoint_every", "persist_checkpoints", "threads"}},
      {"sweep", {"n_models", "ensembles_per_point"}},
      {"compare", {"strategies"}},
  };
  return keys;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

template <typename T>
void read(const pt::ptree& tree, const std::string& key, T& value) {
  auto v = tree.get_optional<std::string>(key);
  if (!v) return;
  auto parsed = tree.get_optional<T>(key);
  if (!parsed) throw ConfigError(fmt::format("config: cannot parse {} = '{}'", key, *v));
  value = *parsed;
}

void read_bool(const pt::ptree& tree, const std::string& key, bool& value) {
  auto v = tree.get_optional<std::string>(key);
  if (!v) return;
  if (*v == "true" || *v == "1" || *v == "yes") value = true;
  else if (*v == "false" || *v == "0" || *v == "no") value = false;
  else throw ConfigError(fmt::format("config: {} must be a boolean, got '{}'", key, *v));
}

}  // namespace

void ExperimentConfig::validate() const {
  stream.validate();
  sgd.validate();
  strategy.validate(stream.batch_size);
  if (seeds.empty()) throw ConfigError("run: seeds must not be empty");
  if (buffer_capacity == 0) throw ConfigError("run: buffer_capacity must be > 0");
  if (checkpoint_every < 0) throw ConfigError("run: checkpoint_every must be >= 0");
  if (threads < 0) throw ConfigError("run: threads must be >= 0");
  for (int h : hidden) {
    if (h < 1) throw ConfigError("model: hidden sizes must be positive");
  }
  if (!(ema.lambda >= 0.0 && ema.lambda <= 1.0) || !(ema.warmup_momentum >= 0.0 && ema.warmup_momentum <= 1.0)) {
    throw ConfigError("ema: lambda and warmup_momentum must lie in [0, 1]");
  }
  if (ema.warmup_iters < 0) throw ConfigError("ema: warmup_iters must be >= 0");
  if (strategy.distill_alpha > 0.0 && !ema.enabled) {
    throw ConfigError("strategy: distill_alpha > 0 needs the EMA model as teacher (ema.enabled = true)");
  }
  if (stream.source == StreamSource::kFileBacked && stream.path.empty()) {
    throw ConfigError("stream: file_backed source needs a path");
  }
  if (sweep_n_models < 1 || sweep_ensembles_per_point < 1) throw ConfigError("sweep: counts must be >= 1");
  std::set<std::string> names;
  for (const auto& s : schemes) {
    if (!names.insert(s.name()).second) throw ConfigError("ensembles: duplicate scheme " + s.name());
  }
}

std::vector<int> ExperimentConfig::layer_sizes() const {
  std::vector<int> sizes{stream.input_dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(stream.total_classes());
  return sizes;
}

std::filesystem::path ExperimentConfig::resolved_output_dir() const {
  const char* root = std::getenv(kOutputRootEnv);
  if (!root || !*root || output_dir.empty()) return output_dir;
  const auto rel = output_dir.is_absolute() ? output_dir.relative_path() : output_dir;
  return std::filesystem::path(root) / rel;
}

ExperimentConfig parse_config(std::string_view text) {
  pt::ptree tree;
  try {
    std::istringstream in{std::string(text)};
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ParseError(e.line(), e.message());
  }

  for (const auto& [section, body] : tree) {
    auto it = known_keys().find(section);
    if (it == known_keys().end()) throw ConfigError(fmt::format("config: unknown section [{}]", section));
    if (!body.data().empty()) throw ConfigError(fmt::format("config: key '{}' outside any section", section));
    for (const auto& [key, _] : body) {
      if (!it->second.count(key)) throw ConfigError(fmt::format("config: unknown key '{}' in [{}]", key, section));
    }
  }

  ExperimentConfig cfg;
  const auto empty = pt::ptree();
  auto section = [&](const char* name) -> const pt::ptree& {
    auto child = tree.get_child_optional(name);
    return child ? *child : empty;
  };

  const auto& stream = section("stream");
  if (auto src = stream.get_optional<std::string>("source")) {
    if (*src == "synthetic_gaussian") cfg.stream.source = StreamSource::kSyntheticGaussian;
    else if (*src == "file_backed") cfg.stream.source = StreamSource::kFileBacked;
    else throw ConfigError("stream: source must be synthetic_gaussian or file_backed");
  }
  read(stream, "n_tasks", cfg.stream.n_tasks);
  read(stream, "classes_per_task", cfg.stream.classes_per_task);
  read(stream, "input_dim", cfg.stream.input_dim);
  read(stream, "batch_size", cfg.stream.batch_size);
  read(stream, "train_per_class", cfg.stream.train_per_class);
  read(stream, "test_per_class", cfg.stream.test_per_class);
  read(stream, "val_fraction", cfg.stream.val_fraction);
  if (auto p = stream.get_optional<std::string>("path")) cfg.stream.path = *p;
  if (auto p = stream.get_optional<std::string>("test_path")) cfg.stream.test_path = *p;

  if (auto hidden = section("model").get_optional<std::string>("hidden")) {
    cfg.hidden.clear();
    for (const auto& h : split_list(*hidden)) {
      try {
        cfg.hidden.push_back(std::stoi(h));
      } catch (const std::exception&) {
        throw ConfigError("model: bad hidden size '" + h + "'");
      }
    }
  }

  const auto& strat = section("strategy");
  if (auto kind = strat.get_optional<std::string>("kind")) cfg.strategy.kind = parse_strategy_kind(*kind);
  read(strat, "der_alpha", cfg.strategy.der_alpha);
  read(strat, "der_beta", cfg.strategy.der_beta);
  read(strat, "rar_passes", cfg.strategy.rar_passes);
  read(strat, "rar_noise_sigma", cfg.strategy.rar_noise_sigma);
  read(strat, "mir_candidates", cfg.strategy.mir_candidates);
  read(strat, "distill_alpha", cfg.strategy.distill_alpha);
  read_bool(strat, "resample_replay_each_pass", cfg.strategy.resample_replay_each_pass);

  read(section("sgd"), "learning_rate", cfg.sgd.learning_rate);
  read(section("sgd"), "passes_per_batch", cfg.sgd.passes_per_batch);

  const auto& ema = section("ema");
  read_bool(ema, "enabled", cfg.ema.enabled);
  read(ema, "lambda", cfg.ema.lambda);
  read(ema, "warmup_momentum", cfg.ema.warmup_momentum);
  read(ema, "warmup_iters", cfg.ema.warmup_iters);
  if (auto init = ema.get_optional<std::string>("init")) {
    if (*init == "initial_model") cfg.ema.init = EmaInit::kInitialModel;
    else if (*init == "first_update") cfg.ema.init = EmaInit::kFirstUpdate;
    else throw ConfigError("ema: init must be initial_model or first_update");
  }

  if (auto schemes = section("ensembles").get_optional<std::string>("schemes")) {
    for (const auto& s : split_list(*schemes)) cfg.schemes.push_back(WeightScheme::parse(s));
  }

  const auto& run = section("run");
  if (auto seeds = run.get_optional<std::string>("seeds")) {
    cfg.seeds.clear();
    for (const auto& s : split_list(*seeds)) {
      try {
        std::size_t used = 0;
        cfg.seeds.push_back(std::stoull(s, &used));
        if (used != s.size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ConfigError("run: bad seed '" + s + "'");
      }
    }
  }
  read(run, "buffer_capacity", cfg.buffer_capacity);
  if (auto out = run.get_optional<std::string>("output_dir")) cfg.output_dir = *out;
  read(run, "checkpoint_every", cfg.checkpoint_every);
  read_bool(run, "persist_checkpoints", cfg.persist_checkpoints);
  read(run, "threads", cfg.threads);

  read(section("sweep"), "n_models", cfg.sweep_n_models);
  read(section("sweep"), "ensembles_per_point", cfg.sweep_ensembles_per_point);

  if (auto list = section("compare").get_optional<std::string>("strategies")) {
    for (const auto& s : split_list(*list)) cfg.compare_strategies.push_back(parse_strategy_kind(s));
  }

  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  auto cfg = parse_config(buf.str());
  // Dataset paths are relative to the config file.
  const auto base = path.parent_path();
  if (!cfg.stream.path.empty() && cfg.stream.path.is_relative()) cfg.stream.path = base / cfg.stream.path;
  if (!cfg.stream.test_path.empty() && cfg.stream.test_path.is_relative()) {
    cfg.stream.test_path = base / cfg.stream.test_path;
  }
  return cfg;
}

}  // namespace ocl
