#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <thread>

#include "critgen/errors.hpp"
#include "critgen/search.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace critgen;

namespace {

// Wraps a risk function and counts every call it receives.
struct Counted {
  RiskFn inner;
  std::shared_ptr<std::atomic<std::uint64_t>> calls = std::make_shared<std::atomic<std::uint64_t>>(0);
  RiskFn fn() const {
    return [inner = inner, calls = calls](std::span<const double> x, std::span<const double> y) {
      calls->fetch_add(1);
      return inner(x, y);
    };
  }
};

double bump(std::span<const double> x, std::span<const double>) {
  double sq = 0.0;
  for (double v : x) sq += (v - 0.4) * (v - 0.4);
  return std::exp(-sq / 0.05);
}

GeneratorTrainer small_trainer(std::size_t dim, std::size_t cond_dim) {
  GeneratorTrainer t;
  t.arch.dim = dim;
  t.arch.cond_dim = cond_dim;
  t.arch.num_layers = 2;
  t.arch.hidden_dims = {16};
  t.train.epochs = 3;
  t.train.batch_size = 64;
  return t;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace

// ---------------------------------------------------------------------------
// Ledger

TEST_CASE("ledger counts per phase and survives concurrent increments") {
  QueryLedger ledger;
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&] {
      for (int i = 0; i < 10000; ++i) ledger.add(QueryPhase::nes);
    });
  }
  for (auto& t : threads) t.join();
  ledger.add(QueryPhase::exploration, 3);
  CHECK(ledger.count(QueryPhase::nes) == 40000);
  CHECK(ledger.count() == 40003);
  const auto snap = ledger.snapshot();
  CHECK(snap == LedgerCounts{3, 40000, 0});
  const QueryLedger copy = ledger;
  CHECK(copy.snapshot() == snap);
}

TEST_CASE("query_risk records exactly one query per call") {
  Counted c{bump};
  QueryLedger ledger;
  const std::vector<double> x{0.4, 0.4};
  CHECK(query_risk(c.fn(), x, {}, ledger, QueryPhase::evaluation) == 1.0);
  CHECK(ledger.count(QueryPhase::evaluation) == 1);
  CHECK(*c.calls == 1);
}

// ---------------------------------------------------------------------------
// NES

TEST_CASE("nes perturbations come in antithetic pairs") {
  RandomSource rng(3);
  const auto eps = nes_perturbations(rng, 5, 8);
  REQUIRE(eps.size() == 8);
  for (std::size_t i = 0; i < 8; i += 2) {
    for (std::size_t j = 0; j < 5; ++j) CHECK(eps[i][j] == -eps[i + 1][j]);
  }
  CHECK_THROWS_AS(nes_perturbations(rng, 2, 3), ContractError);
  CHECK_THROWS_AS(nes_perturbations(rng, 2, 0), ContractError);
}

TEST_CASE("nes gradient of a constant is exactly zero") {
  RandomSource rng(4);
  const std::vector<double> x{0.3, -0.2, 0.1};
  const auto g = nes_gradient(x, [](std::span<const double>) { return 2.75; }, 0.01, 1000, rng);
  for (double v : g) CHECK(v == 0.0);
}

TEST_CASE("nes on a linear function equals the sample second moment times the slope") {
  const std::vector<double> a{1.0, -2.0, 0.5};
  const std::vector<double> x{0.1, 0.2, 0.3};
  const double sigma = 0.05;
  RandomSource r1(5), r2(5);
  const auto g = nes_gradient(
      x, [&](std::span<const double> p) { return a[0] * p[0] + a[1] * p[1] + a[2] * p[2]; }, sigma,
      200, r1);
  // Antithetic pairs cancel the constant term; what remains is (1/M) sum eps eps^T a.
  const auto eps = nes_perturbations(r2, 3, 200);
  for (std::size_t j = 0; j < 3; ++j) {
    double expected = 0.0;
    for (const auto& e : eps) expected += e[j] * (e[0] * a[0] + e[1] * a[1] + e[2] * a[2]);
    expected /= 200.0;
    CHECK(g[j] == doctest::Approx(expected).epsilon(1e-10));
  }
}

TEST_CASE("nes tracks the analytic gradient of -|x|^2") {
  RandomSource pts(6);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> x{pts.uniform(-1, 1), pts.uniform(-1, 1), pts.uniform(-1, 1)};
    RandomSource rng(100 + i);
    const auto g = nes_gradient(
        x,
        [](std::span<const double> p) {
          double s = 0.0;
          for (double v : p) s += v * v;
          return -s;
        },
        0.01, 1000, rng);
    std::vector<double> truth(3);
    for (int j = 0; j < 3; ++j) truth[j] = -2.0 * x[j];
    CHECK(cosine(g, truth) > 0.95);
  }
}

TEST_CASE("adaptive_step moves along the gradient and clamps to the box") {
  const std::vector<double> x{0.5, -0.5};
  const std::vector<double> g{1.0, -20.0};
  const auto out = adaptive_step(x, g, 0.1);
  CHECK(out[0] == doctest::Approx(0.6));
  CHECK(out[1] == -1.0);
  CHECK_THROWS_AS(adaptive_step(x, std::vector<double>{1.0}, 0.1), ContractError);
}

TEST_CASE("exploration value subtracts gamma times the generator density") {
  const FlowModel identity(FlowArchitecture{.dim = 2});
  QueryLedger ledger;
  const std::vector<double> x{0.4, 0.4};
  const double density = std::exp(-0.5 * 0.32) / (2.0 * std::numbers::pi);
  CHECK(exploration_value(x, {}, bump, &identity, 0.5, ledger) ==
        doctest::Approx(1.0 - 0.5 * density).epsilon(1e-12));
  CHECK(exploration_value(x, {}, bump, nullptr, 0.5, ledger) == 1.0);
  CHECK(exploration_value(x, {}, bump, &identity, 0.0, ledger) == 1.0);
  CHECK(ledger.count(QueryPhase::exploration) == 3);
}

// ---------------------------------------------------------------------------
// Adaptive sampler

TEST_CASE("adaptive sampler ledger equals the instrumented call count") {
  Counted c{bump};
  SamplerConfig sc;
  sc.particles = 4;
  sc.nes_population = 6;
  sc.iterations = 12;
  sc.retrain_every = 4;
  sc.gamma = 0.1;
  const auto run = run_adaptive_sampler(c.fn(), {{}}, sc, small_trainer(2, 0));
  CHECK(run.ledger.total() == *c.calls);
  CHECK(run.ledger.total() == 12u * 4u * 6u);
  CHECK(run.ledger.nes == run.ledger.total());
  CHECK(run.samples.size() == run.ledger.total());
  // Intermediate retrains at iterations 4 and 8, then the closing one.
  CHECK(run.retrains == 3);
  CHECK(run.report.size() == 12);
  CHECK(run.report.back().ledger == run.ledger.total());
  for (const auto& s : run.samples) {
    CHECK(s.weight == doctest::Approx(std::max(s.risk, 1e-4)));
    for (double v : s.x) CHECK(std::abs(v) <= 1.0);
  }
}

TEST_CASE("adaptive sampler stops before exceeding the query budget") {
  Counted c{bump};
  SamplerConfig sc;
  sc.particles = 4;
  sc.nes_population = 6;
  sc.iterations = 1000;
  sc.query_budget = 100;
  sc.gamma = 0.0;
  const auto run = run_adaptive_sampler(c.fn(), {{}}, sc, small_trainer(2, 0));
  CHECK(run.ledger.total() == 96);
  CHECK(*c.calls == 96);
  // gamma = 0 ignores the generator while searching; only the closing retrain runs.
  CHECK(run.retrains == 1);
}

TEST_CASE("adaptive sampler results do not depend on the worker count") {
  SamplerConfig sc;
  sc.particles = 5;
  sc.nes_population = 4;
  sc.iterations = 8;
  sc.retrain_every = 3;
  sc.seed = 11;
  const auto t = small_trainer(2, 1);
  const std::vector<std::vector<double>> conds{{-1.0}, {1.0}};
  sc.workers = 1;
  const auto a = run_adaptive_sampler(bump, conds, sc, t);
  sc.workers = 3;
  const auto b = run_adaptive_sampler(bump, conds, sc, t);
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].x == b.samples[i].x);
    CHECK(a.samples[i].y == b.samples[i].y);
    CHECK(a.samples[i].risk == b.samples[i].risk);
  }
  CHECK(a.generator.params().values() == b.generator.params().values());
  CHECK(a.particles.positions == b.particles.positions);
}

TEST_CASE("particles cycle through the conditions") {
  SamplerConfig sc;
  sc.particles = 5;
  sc.nes_population = 2;
  sc.iterations = 1;
  const std::vector<std::vector<double>> conds{{0.0}, {1.0}, {2.0}};
  const auto run = run_adaptive_sampler(bump, conds, sc, small_trainer(2, 1));
  CHECK(run.particles.condition_index == std::vector<std::size_t>{0, 1, 2, 0, 1});
  for (std::size_t i = 0; i < run.samples.size(); ++i) {
    CHECK(run.samples[i].y == conds[(i / 2) % 3]);
  }
}

TEST_CASE("zero iterations leave the identity generator and an empty ledger") {
  SamplerConfig sc;
  sc.iterations = 0;
  const auto t = small_trainer(2, 0);
  const auto run = run_adaptive_sampler(bump, {{}}, sc, t);
  CHECK(run.ledger.total() == 0);
  CHECK(run.samples.empty());
  CHECK(run.retrains == 0);
  const std::vector<double> x{0.3, -0.7};
  CHECK(log_prob(run.generator, x, {}) == standard_normal_log_density(x));
}

TEST_CASE("particles with persistently negative c restart after the patience window") {
  SamplerConfig sc;
  sc.particles = 3;
  sc.nes_population = 2;
  sc.iterations = 12;
  sc.gamma = 1.0;
  sc.retrain_every = 1;
  sc.restart_patience = 5;
  // Zero risk: once the first retrain lands, c = -p(x) < 0 everywhere, so every
  // particle is low from iteration 2 on and restarts after iterations 6 and 11.
  const auto run = run_adaptive_sampler([](auto, auto) { return 0.0; }, {{}}, sc,
                                        small_trainer(2, 0));
  CHECK(run.particles.restarts == 3 * 2);
}

TEST_CASE("constant zero risk never triggers restarts") {
  SamplerConfig sc;
  sc.particles = 4;
  sc.nes_population = 2;
  sc.iterations = 20;
  sc.gamma = 0.0;
  const auto run = run_adaptive_sampler([](auto, auto) { return 0.0; }, {{}}, sc,
                                        small_trainer(2, 0));
  CHECK(run.particles.restarts == 0);
}

TEST_CASE("sampler rejects invalid configurations") {
  SamplerConfig sc;
  sc.nes_population = 5;
  CHECK_THROWS_AS(run_adaptive_sampler(bump, {{}}, sc, small_trainer(2, 0)), ContractError);
  sc = SamplerConfig{};
  sc.alpha = 0.0;
  CHECK_THROWS_AS(sc.validate(), ContractError);
  sc = SamplerConfig{};
  sc.restart_quantile = 1.0;
  CHECK_THROWS_AS(sc.validate(), ContractError);
  sc = SamplerConfig{};
  CHECK_THROWS_AS(run_adaptive_sampler(bump, {{1.0}}, sc, small_trainer(2, 0)), ContractError);
  CHECK_THROWS_AS(run_adaptive_sampler(bump, {}, sc, small_trainer(2, 0)), ContractError);
}

TEST_CASE("adaptive sampler climbs to a single bump") {
  SamplerConfig sc;
  sc.particles = 4;
  sc.nes_population = 6;
  sc.nes_sigma = 0.08;
  sc.iterations = 60;
  sc.gamma = 0.0;
  const auto run = run_adaptive_sampler(bump, {{}}, sc, small_trainer(2, 0));
  CHECK(run.report.back().best_risk > 0.9);
  // Report best risk is a running maximum.
  for (std::size_t i = 1; i < run.report.size(); ++i) {
    CHECK(run.report[i].best_risk >= run.report[i - 1].best_risk);
  }
}

// ---------------------------------------------------------------------------
// Baselines

TEST_CASE("uniform sampler: n in-box queries, weight equals risk, seeded") {
  Counted c{bump};
  RandomSource r1(9), r2(9);
  const auto a = uniform_sampler(c.fn(), 300, 3, {}, r1);
  const auto b = uniform_sampler(bump, 300, 3, {}, r2);
  CHECK(a.ledger.total() == 300);
  CHECK(*c.calls == 300);
  REQUIRE(a.samples.size() == 300);
  double mean = 0.0;
  for (std::size_t i = 0; i < 300; ++i) {
    CHECK(a.samples[i].x == b.samples[i].x);
    CHECK(a.samples[i].weight == a.samples[i].risk);
    for (double v : a.samples[i].x) CHECK(std::abs(v) <= 1.0);
    mean += a.samples[i].x[0];
  }
  CHECK(std::abs(mean / 300.0) < 0.1);
}

TEST_CASE("grid search visits the full lattice including the corners") {
  Counted c{bump};
  const auto run = grid_search(c.fn(), 3, 2, {});
  REQUIRE(run.samples.size() == 9);
  CHECK(*c.calls == 9);
  CHECK(run.ledger.total() == 9);
  const std::vector<std::vector<double>> expected{{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 0},
                                                  {0, 1},   {1, -1}, {1, 0},  {1, 1}};
  for (std::size_t i = 0; i < 9; ++i) CHECK(run.samples[i].x == expected[i]);
  const auto g10 = grid_search([](auto, auto) { return 0.0; }, 10, 4, {});
  CHECK(g10.ledger.total() == 10000);
  CHECK(g10.samples.back().x == std::vector<double>{1, 1, 1, 1});
}

TEST_CASE("grid search refuses lattices above the cap") {
  CHECK_THROWS_AS(grid_search(bump, 10, 4, {}, 9999), BudgetError);
  CHECK_THROWS_AS(grid_search(bump, 1000, 10, {}), BudgetError);
  CHECK_THROWS_AS(grid_search(bump, 1, 2, {}), ContractError);
}

TEST_CASE("hmc ledger: startup 1 + 2d, then 2d per leapfrog step plus one per transition") {
  Counted c{[](std::span<const double> x, std::span<const double>) { return -x[0] * x[0]; }};
  HmcConfig h;
  h.step_size = 0.01;
  h.leapfrog_steps = 5;
  h.temperature = 1.0;
  const auto run = hmc_sampler(c.fn(), 40, 2, {}, h);
  CHECK(run.ledger.total() == *c.calls);
  // Tiny steps never leave the box, so every transition spends the full amount.
  CHECK(run.ledger.total() == (1 + 4) + 40 * (5 * 4 + 1));
  CHECK(run.samples.size() == 40);
}

TEST_CASE("hmc samples a Gaussian target exp(r / tau)") {
  // r = -x^2 / (2 * 0.09) at tau = 1 is N(0, 0.3^2); central differences are
  // exact on quadratics, so only Monte Carlo error remains.
  HmcConfig h;
  h.step_size = 0.1;
  h.leapfrog_steps = 8;
  h.temperature = 1.0;
  h.seed = 12;
  h.init = {0.0};
  const auto run =
      hmc_sampler([](std::span<const double> x, auto) { return -x[0] * x[0] / 0.18; }, 4000, 1, {}, h);
  double m = 0.0, v = 0.0;
  for (const auto& s : run.samples) m += s.x[0];
  m /= 4000.0;
  for (const auto& s : run.samples) v += (s.x[0] - m) * (s.x[0] - m);
  v /= 4000.0;
  CHECK(std::abs(m) < 0.03);
  CHECK(v == doctest::Approx(0.09).epsilon(0.12));
  CHECK(run.warnings.empty());
}

TEST_CASE("hmc on a flat target accepts every in-box proposal") {
  HmcConfig h;
  h.step_size = 0.001;
  h.leapfrog_steps = 3;
  h.init = {0.0, 0.0};
  const auto run = hmc_sampler([](auto, auto) { return 0.5; }, 50, 2, {}, h);
  for (std::size_t i = 1; i < run.samples.size(); ++i) CHECK(run.samples[i].x != run.samples[i - 1].x);
}

TEST_CASE("hmc warns when acceptance collapses") {
  HmcConfig h;
  h.step_size = 5.0;
  h.warning_window = 20;
  const auto run = hmc_sampler(bump, 40, 2, {}, h);
  CHECK(run.warnings.size() == 2);
  CHECK(run.warnings[0].find("acceptance rate") != std::string::npos);
  h.init = {2.0, 0.0};
  CHECK_THROWS_AS(hmc_sampler(bump, 1, 2, {}, h), ContractError);
  h.init = {};
  h.temperature = 0.0;
  CHECK_THROWS_AS(hmc_sampler(bump, 1, 2, {}, h), ContractError);
}

TEST_CASE("reinforce converges on a unimodal target and counts its queries") {
  Counted c{bump};
  ReinforceConfig rc;
  rc.seed = 13;
  const auto run = reinforce_search(c.fn(), 200, 2, {}, rc);
  CHECK(run.ledger.total() == *c.calls);
  CHECK(run.ledger.total() == run.samples.size());
  CHECK(run.ledger.total() % rc.population == 0);
  for (double m : run.mean) CHECK(m == doctest::Approx(0.4).epsilon(0.1));
  for (double s : run.stddev) CHECK(s < 0.2);
}

TEST_CASE("reinforce stops early once the policy collapses below min_std") {
  ReinforceConfig rc;
  rc.min_std = 0.3;
  rc.init_std = 0.5;
  const auto run = reinforce_search(bump, 10000, 2, {}, rc);
  CHECK(run.converged);
  CHECK(run.report.size() < 10000);
  CHECK(run.ledger.total() == run.report.size() * rc.population);
  rc.population = 1;
  CHECK_THROWS_AS(reinforce_search(bump, 1, 2, {}, rc), ContractError);
}

// ---------------------------------------------------------------------------
// Reports

TEST_CASE("replay csv round-trips exactly") {
  std::vector<WeightedSample> samples;
  RandomSource rng(14);
  for (int i = 0; i < 20; ++i) {
    WeightedSample s;
    s.x = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
    s.y = {rng.gaussian()};
    s.risk = rng.uniform();
    s.weight = s.risk + 1e-17 * i;
    samples.push_back(s);
  }
  const auto path = (std::filesystem::temp_directory_path() / "critgen_replay.csv").string();
  write_replay_csv(samples, 2, 1, path);
  {
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "x0,x1,y0,risk,weight");
  }
  const auto back = read_replay_csv(path, 2, 1);
  REQUIRE(back.size() == samples.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].x == samples[i].x);
    CHECK(back[i].y == samples[i].y);
    CHECK(back[i].risk == samples[i].risk);
    CHECK(back[i].weight == samples[i].weight);
  }
  CHECK_THROWS_AS(read_replay_csv(path, 3, 1), ContractError);
  CHECK_THROWS_AS(write_replay_csv(samples, 3, 1, path), ContractError);
  std::filesystem::remove(path);
}

TEST_CASE("run report csv lists one row per iteration") {
  const std::vector<IterationRecord> rep{{0, 0.5, 0.1, 24}, {1, 0.75, -0.25, 48}};
  const auto path = (std::filesystem::temp_directory_path() / "critgen_report.csv").string();
  write_run_report_csv(rep, path);
  std::ifstream in(path);
  std::string l0, l1, l2;
  std::getline(in, l0);
  std::getline(in, l1);
  std::getline(in, l2);
  CHECK(l0 == "iteration,best_risk,mean_c,ledger");
  CHECK(l1 == "0,0.5,0.10000000000000001,24");
  CHECK(l2 == "1,0.75,-0.25,48");
  std::filesystem::remove(path);
}
