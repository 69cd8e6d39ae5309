#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "ocl/ensemble.hpp"
#include "ocl/errors.hpp"
#include "test_util.hpp"

using namespace ocl;
using ocl::testing::random_params;

namespace {

const Layout kLayout = {{"w", 7}, {"b", 3}};

std::vector<ParameterVector> trajectory(std::uint64_t seed, int n, const Layout& layout = kLayout) {
  std::mt19937_64 rng(seed);
  std::vector<ParameterVector> out;
  for (int i = 0; i < n; ++i) out.push_back(random_params(rng, layout));
  return out;
}

// w_1..w_t straight from the recurrences.
std::vector<double> scheme_weights(const WeightScheme& s, int t) {
  std::vector<double> w(static_cast<std::size_t>(t));
  w[0] = 1.0;
  for (int i = 2; i <= t; ++i) {
    const double prev = w[i - 2];
    switch (s.kind) {
      case SchemeKind::kEmaRecursive: w[i - 1] = prev / s.lambda; break;
      case SchemeKind::kUniform: w[i - 1] = 1.0; break;
      case SchemeKind::kLinear: w[i - 1] = i; break;
      case SchemeKind::kLogarithmic: w[i - 1] = prev + std::log(static_cast<double>(i)); break;
      case SchemeKind::kQuadratic: w[i - 1] = prev + static_cast<double>(i) * i; break;
    }
  }
  return w;
}

std::vector<double> weighted_mean(const std::vector<ParameterVector>& thetas, const std::vector<double>& w) {
  std::vector<double> out(thetas[0].size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < thetas.size(); ++i) {
    total += w[i];
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += w[i] * thetas[i].values()[k];
  }
  for (auto& v : out) v /= total;
  return out;
}

void check_rel(std::span<const double> got, std::span<const double> want, double tol) {
  REQUIRE(got.size() == want.size());
  for (std::size_t k = 0; k < got.size(); ++k) {
    CAPTURE(k);
    CHECK(std::abs(got[k] - want[k]) <= tol * std::max(1.0, std::abs(want[k])));
  }
}

const std::vector<WeightScheme> kAllSchemes = {
    {SchemeKind::kUniform},   {SchemeKind::kLinear},  {SchemeKind::kLogarithmic},
    {SchemeKind::kQuadratic}, {SchemeKind::kEmaRecursive, 0.99}, {SchemeKind::kEmaRecursive, 0.9}};

}  // namespace

TEST_CASE("ema with lambda 0 tracks the model, lambda 1 never moves") {
  const auto traj = trajectory(1, 5);
  const auto init = ParameterVector(kLayout);
  EmaState zero(init, 0.0, 0.0, 0);
  EmaState one(init, 1.0, 1.0, 0);
  for (const auto& t : traj) {
    zero.update(t);
    one.update(t);
    CHECK(zero.parameters() == t);
    CHECK(one.parameters() == init);
  }
  CHECK(zero.iteration() == 5);
}

TEST_CASE("recursive ema equals the explicit sum") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const int t = seed < 5 ? 100 : 1000;
    const double lambda = 0.99;
    const auto traj = trajectory(seed, t);
    const auto theta0 = trajectory(seed + 100, 1)[0];
    EmaState ema(theta0, lambda, lambda, 0);
    for (const auto& th : traj) ema.update(th);

    std::vector<double> explicit_sum(theta0.size());
    for (std::size_t k = 0; k < explicit_sum.size(); ++k) {
      double s = std::pow(lambda, t) * theta0.values()[k];
      for (int i = 1; i <= t; ++i) s += (1.0 - lambda) * std::pow(lambda, t - i) * traj[i - 1].values()[k];
      explicit_sum[k] = s;
    }
    for (std::size_t k = 0; k < explicit_sum.size(); ++k) {
      CHECK(std::abs(ema.parameters().values()[k] - explicit_sum[k]) <= 1e-6 * std::abs(explicit_sum[k]) + 1e-15);
    }
  }
}

TEST_CASE("warmup momentum applies to the first warmup_iters updates") {
  const auto traj = trajectory(2, 60);
  EmaState ema(ParameterVector(kLayout), 0.99, 0.9, 50);
  std::vector<double> oracle(kLayout[0].count + kLayout[1].count, 0.0);
  for (int i = 0; i < 60; ++i) {
    CHECK(ema.effective_momentum() == (i < 50 ? 0.9 : 0.99));
    const double m = i < 50 ? 0.9 : 0.99;
    for (std::size_t k = 0; k < oracle.size(); ++k) oracle[k] = m * oracle[k] + (1 - m) * traj[i].values()[k];
    ema.update(traj[i]);
  }
  check_rel(ema.parameters().values(), oracle, 1e-12);
}

TEST_CASE("ema init from the first update") {
  const auto traj = trajectory(3, 3);
  EmaState ema(ParameterVector(kLayout), 0.5, 0.5, 0, EmaInit::kFirstUpdate);
  ema.update(traj[0]);
  CHECK(ema.parameters() == traj[0]);
  ema.update(traj[1]);
  check_rel(ema.parameters().values(), (0.5 * traj[0] + 0.5 * traj[1]).values(), 1e-15);
}

TEST_CASE("ema rejects bad inputs") {
  CHECK_THROWS_AS(EmaState(ParameterVector(kLayout), 1.5), ConfigError);
  EmaState ema{ParameterVector(kLayout)};
  CHECK_THROWS_AS(ema.update(ParameterVector({{"w", 10}})), ShapeError);
}

TEST_CASE("weight mass of the explicit form plus lambda^t is one") {
  for (double lambda : {0.5, 0.9, 0.99, 0.999}) {
    for (int t : {1, 10, 460, 1000}) {
      double s = std::pow(lambda, t);
      for (int i = 1; i <= t; ++i) s += (1.0 - lambda) * std::pow(lambda, t - i);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("every scheme matches its explicit weighted mean") {
  for (const auto& scheme : kAllSchemes) {
    CAPTURE(scheme.name());
    const auto traj = trajectory(4, 300);
    EnsembleAccumulator acc(scheme);
    for (int t = 1; t <= 300; ++t) {
      acc.update(traj[t - 1]);
      if (t % 50 == 0 || t < 5) {
        const std::vector<ParameterVector> prefix(traj.begin(), traj.begin() + t);
        check_rel(acc.mean().values(), weighted_mean(prefix, scheme_weights(scheme, t)), 1e-10);
      }
    }
    CHECK(acc.iteration() == 300);
    CHECK(acc.weight_total() == 1.0);
  }
}

TEST_CASE("uniform is the arithmetic mean, linear is (a + 2b + 3c) / 6") {
  const auto t = trajectory(5, 3);
  EnsembleAccumulator uni({SchemeKind::kUniform});
  EnsembleAccumulator lin({SchemeKind::kLinear});
  for (const auto& x : t) {
    uni.update(x);
    lin.update(x);
  }
  check_rel(uni.mean().values(), ((1.0 / 3.0) * (t[0] + t[1] + t[2])).values(), 1e-14);
  check_rel(lin.mean().values(), ((1.0 / 6.0) * (t[0] + 2.0 * t[1] + 3.0 * t[2])).values(), 1e-14);
}

TEST_CASE("ema_recursive ensemble agrees with the ema seeded by the first model") {
  const double lambda = 0.9;
  const int t = 200;  // 0.9^200 < 1e-6
  const auto traj = trajectory(6, t);
  EnsembleAccumulator acc({SchemeKind::kEmaRecursive, lambda});
  EmaState ema(ParameterVector(kLayout), lambda, lambda, 0, EmaInit::kFirstUpdate);
  for (const auto& x : traj) {
    acc.update(x);
    ema.update(x);
  }
  REQUIRE(std::pow(lambda, t) < 1e-6);
  check_rel(acc.mean().values(), ema.parameters().values(), 1e-5);
}

TEST_CASE("quadratic and ema schemes stay finite over long trajectories") {
  const Layout tiny = {{"w", 2}};
  const auto traj = trajectory(7, 20000, tiny);
  EnsembleAccumulator quad({SchemeKind::kQuadratic});
  EnsembleAccumulator ema({SchemeKind::kEmaRecursive, 0.99});  // 0.99^-20000 overflows a double
  for (const auto& x : traj) {
    quad.update(x);
    ema.update(x);
  }
  for (double v : quad.mean().values()) CHECK(std::isfinite(v));
  for (double v : ema.mean().values()) CHECK(std::isfinite(v));
}

TEST_CASE("scaling every weight by a constant leaves the ensemble unchanged") {
  const auto traj = trajectory(8, 50);
  for (const auto& scheme : kAllSchemes) {
    const auto w = scheme_weights(scheme, 50);
    for (double c : {1e-3, 7.0, 1e6}) {
      EnsembleAccumulator base({SchemeKind::kUniform});
      EnsembleAccumulator scaled({SchemeKind::kUniform});
      for (int i = 0; i < 50; ++i) {
        base.add(traj[i], w[i]);
        scaled.add(traj[i], c * w[i]);
      }
      check_rel(base.mean().values(), scaled.mean().values(), 1e-12);
    }
  }
}

TEST_CASE("normalized weights are non-decreasing in recency") {
  // Unit vectors as models: the mean holds the normalized weights.
  const int t = 40;
  const Layout layout = {{"w", static_cast<std::size_t>(t)}};
  for (const auto& scheme : kAllSchemes) {
    CAPTURE(scheme.name());
    EnsembleAccumulator acc(scheme);
    for (int i = 0; i < t; ++i) {
      ParameterVector e(layout);
      e.values()[i] = 1.0;
      acc.update(e);
    }
    const auto w = acc.mean().values();
    double sum = 0.0;
    for (int i = 0; i < t; ++i) {
      sum += w[i];
      if (i) CHECK(w[i] >= w[i - 1] - 1e-15);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("extract") {
  const auto traj = trajectory(9, 4, Network::layout_for({3, 2}));
  const Network like({3, 2});
  EnsembleAccumulator acc({SchemeKind::kQuadratic});
  CHECK_THROWS_AS(ensemble_extract(acc, like), StateError);
  acc.update(traj[0]);
  CHECK(ensemble_extract(acc, like).parameters() == traj[0]);
  acc.update(traj[1]);
  CHECK(ensemble_extract(acc, like).parameters() == ensemble_extract(acc, like).parameters());

  EnsembleAccumulator same({SchemeKind::kUniform});
  for (int i = 0; i < 7; ++i) same.update(traj[2]);
  check_rel(same.mean().values(), traj[2].values(), 1e-15);
}

TEST_CASE("accumulator errors") {
  EnsembleAccumulator acc({SchemeKind::kLinear});
  acc.update(ParameterVector(kLayout));
  CHECK_THROWS_AS(acc.update(ParameterVector({{"w", 10}})), ShapeError);
  CHECK_THROWS_AS(acc.add(ParameterVector(kLayout), 0.0), ArgumentError);
  CHECK_THROWS_AS(acc.add(ParameterVector(kLayout), std::nan("")), ArgumentError);
}

TEST_CASE("scheme names round-trip") {
  for (const auto& s : kAllSchemes) CHECK(WeightScheme::parse(s.name()) == s);
  CHECK(WeightScheme::parse("ema_recursive").lambda == 0.99);
  CHECK(WeightScheme::parse("ema_recursive:0.995").lambda == 0.995);
  CHECK_THROWS_AS(WeightScheme::parse("cubic"), ConfigError);
  CHECK_THROWS_AS(WeightScheme::parse("ema_recursive:1.5"), ConfigError);
  CHECK_THROWS_AS(WeightScheme::parse("ema_recursive:x"), ConfigError);
}

TEST_CASE("task weight mass") {
  // 0.88 / 0.09 / 0.01 of the weight on the last three tasks at ~230 iterations each.
  CHECK(std::abs(task_weight_mass(0.99, 230, 0) - 0.88) <= 0.03);
  CHECK(std::abs(task_weight_mass(0.99, 230, 1) - 0.09) <= 0.03);
  CHECK(std::abs(task_weight_mass(0.99, 230, 2) - 0.01) <= 0.03);
  CHECK(task_weight_mass(0.5, 1, 0) == 0.5);

  for (double lambda : {0.5, 0.9, 0.99}) {
    for (int iters : {1, 7, 230}) {
      const int n_tasks = 5;
      double total = 0.0;
      for (int k = 0; k < n_tasks; ++k) {
        // Oracle: direct sum of (1 - lambda) lambda^(t - i) over the task's iterations.
        double direct = 0.0;
        for (int j = 0; j < iters; ++j) direct += (1 - lambda) * std::pow(lambda, k * iters + j);
        CHECK(task_weight_mass(lambda, iters, k) == doctest::Approx(direct).epsilon(1e-10));
        total += task_weight_mass(lambda, iters, k);
      }
      CHECK(total == doctest::Approx(1.0 - std::pow(lambda, n_tasks * iters)).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(task_weight_mass(1.0, 10, 0), ArgumentError);
  CHECK_THROWS_AS(task_weight_mass(0.0, 10, 0), ArgumentError);
}

TEST_CASE("checkpoint cadence") {
  CheckpointStore store(10);
  const ParameterVector p(kLayout);
  const int iters_per_task = 920;  // 4600 / 5
  for (std::int64_t it = 1; it <= 4600; ++it) {
    if (store.due(it)) store.save(it, static_cast<int>((it - 1) / iters_per_task), p);
  }
  CHECK(store.size() == 460);

  CheckpointStore per_task(10);
  for (std::int64_t it = 1; it <= 5 * 220; ++it) {
    if (per_task.due(it)) per_task.save(it, static_cast<int>((it - 1) / 220), p);
  }
  std::vector<int> counts(5, 0);
  for (const auto& c : per_task.checkpoints()) ++counts[c.task_id];
  CHECK(counts == std::vector<int>(5, 22));

  CHECK_THROWS_AS(store.save(4605, 4, p), StateError);
  CHECK_THROWS_AS(store.save(4590, 4, p), StateError);
  CHECK_THROWS_AS(CheckpointStore(0), ConfigError);
}

TEST_CASE("checkpoints persist to a directory and load back") {
  const auto dir = std::filesystem::temp_directory_path() / "ocl_test_ckpt_store";
  std::filesystem::remove_all(dir);
  {
    CheckpointStore store(10, dir);
    const auto traj = trajectory(10, 3);
    for (int i = 0; i < 3; ++i) {
      auto p = traj[i];
      for (auto& v : p.values()) v = static_cast<double>(static_cast<float>(v));
      store.save(10 * (i + 1), i, p);
    }
    CHECK(std::filesystem::exists(dir / "ckpt_0000020.bin"));
    std::ifstream manifest(dir / "manifest.csv");
    std::string header, row;
    std::getline(manifest, header);
    std::getline(manifest, row);
    CHECK(header == "iteration,task_id");
    CHECK(row == "10,0");

    const auto back = CheckpointStore::load(dir);
    REQUIRE(back.size() == 3);
    for (int i = 0; i < 3; ++i) {
      CHECK(back.checkpoints()[i].iteration == store.checkpoints()[i].iteration);
      CHECK(back.checkpoints()[i].task_id == i);
      CHECK(back.checkpoints()[i].params == store.checkpoints()[i].params);
    }
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("covering ensembles") {
  CheckpointStore store(10);
  const auto traj = trajectory(11, 110);
  for (int i = 0; i < 110; ++i) store.save(10 * (i + 1), i / 22, traj[i]);

  for (int covered = 1; covered <= 5; ++covered) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto members = sample_covering_ensemble(store, 20, covered, seed);
      REQUIRE(members.size() == 20);
      CHECK(members.back().iteration == 1100);
      std::set<std::int64_t> iters;
      for (const auto& m : members) {
        CHECK(m.task_id >= 5 - covered);
        iters.insert(m.iteration);
      }
      CHECK(iters.size() == 20);
      const auto again = sample_covering_ensemble(store, 20, covered, seed);
      for (std::size_t i = 0; i < 20; ++i) CHECK(again[i].iteration == members[i].iteration);
    }
  }
  // More coverage reaches further back.
  bool reached_first = false;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& m : sample_covering_ensemble(store, 20, 5, seed)) reached_first |= m.task_id == 0;
  }
  CHECK(reached_first);

  CHECK_THROWS_AS(sample_covering_ensemble(store, 20, 6, 0), ArgumentError);
  CHECK_THROWS_AS(sample_covering_ensemble(store, 30, 1, 0), ArgumentError);
  CHECK_THROWS_AS(sample_covering_ensemble(CheckpointStore(10), 2, 1, 0), ArgumentError);
}

TEST_CASE("naive ensemble on a hand-built 3-member, 4-class case") {
  // Single-layer members on 2-d input, so logits are W x + b.
  const std::vector<int> sizes = {2, 4};
  const std::vector<std::vector<double>> params = {
      {1.0, 0.0, 0.0, 1.0, -1.0, 0.5, 0.3, -0.2, 0.1, 0.0, 0.0, 0.2},
      {0.5, 0.5, -0.5, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.3, -0.1, 0.0},
      {-1.0, 1.0, 0.2, 0.2, 0.0, -2.0, 1.0, 1.0, 0.5, -0.5, 0.0, 0.7},
  };
  const std::vector<std::vector<bool>> predictable = {
      {true, true, false, false}, {true, true, true, false}, {true, true, true, true}};
  std::vector<EnsembleMember> members;
  for (int m = 0; m < 3; ++m) {
    members.push_back({Network(sizes, ParameterVector(Network::layout_for(sizes), params[m])), predictable[m]});
  }
  const std::vector<double> x = {0.7, -1.2};

  // Brute force over the 3x4 table.
  double table[3][4] = {};
  for (int m = 0; m < 3; ++m) {
    double z[4], denom = 0.0;
    for (int c = 0; c < 4; ++c) {
      z[c] = params[m][2 * c] * x[0] + params[m][2 * c + 1] * x[1] + params[m][8 + c];
      if (predictable[m][c]) denom += std::exp(z[c]);
    }
    for (int c = 0; c < 4; ++c) table[m][c] = predictable[m][c] ? std::exp(z[c]) / denom : 0.0;
  }
  const double expect[4] = {
      (table[0][0] + table[1][0] + table[2][0]) / 3.0,
      (table[0][1] + table[1][1] + table[2][1]) / 3.0,
      (table[1][2] + table[2][2]) / 2.0,
      table[2][3],
  };
  const auto got = naive_ensemble_predict(members, x);
  for (int c = 0; c < 4; ++c) CHECK(got[c] == doctest::Approx(expect[c]).epsilon(1e-14));
}

TEST_CASE("naive ensemble degenerate cases") {
  std::mt19937_64 rng(12);
  const std::vector<int> sizes = {3, 6, 4};
  const auto a = Network(sizes, random_params(rng, Network::layout_for(sizes)));
  const auto b = Network(sizes, random_params(rng, Network::layout_for(sizes)));
  const std::vector<bool> all(4, true);
  const std::vector<double> x = {0.3, -0.1, 2.0};

  const std::vector<EnsembleMember> single = {{a, all}};
  check_rel(naive_ensemble_predict(single, x), predict_proba(a, x), 1e-15);

  const std::vector<EnsembleMember> pair = {{a, all}, {b, all}};
  const auto pa = predict_proba(a, x), pb = predict_proba(b, x);
  const auto avg = naive_ensemble_predict(pair, x);
  for (int c = 0; c < 4; ++c) CHECK(avg[c] == doctest::Approx((pa[c] + pb[c]) / 2).epsilon(1e-14));

  const std::vector<EnsembleMember> same = {{a, all}, {a, all}, {a, all}};
  check_rel(naive_ensemble_predict(same, x), pa, 1e-14);

  const std::vector<EnsembleMember> partial = {{a, {true, true, false, false}}};
  const auto p = naive_ensemble_predict(partial, x);
  CHECK(p[2] == 0.0);
  CHECK(p[3] == 0.0);

  CHECK_THROWS_AS(naive_ensemble_predict(std::vector<EnsembleMember>{}, x), ArgumentError);
  CHECK(predictable_classes(1, std::vector<int>{0, 0, 1, 1, 2, 2}) ==
        std::vector<bool>{true, true, true, true, false, false});
}
