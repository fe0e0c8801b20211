#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "critgen/errors.hpp"
#include "critgen/evalharness.hpp"
#include "critgen/search.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace critgen;

namespace {

GmmLandscape two_modes() {
  GmmLandscape g;
  g.modes = {{{-0.5, 0.0}, 0.1, 0.5}, {{0.5, 0.0}, 0.1, 0.5}};
  return g;
}

}  // namespace

TEST_CASE("mode coverage counts samples within three stds of each center") {
  const auto g = two_modes();
  std::vector<std::vector<double>> xs;
  // 18 near the left mode, 2 just inside the right one's radius (0.3).
  for (int i = 0; i < 18; ++i) xs.push_back({-0.5 + 0.01 * i, 0.0});
  xs.push_back({0.5, 0.29});
  xs.push_back({0.21, 0.0});
  const auto rep = mode_coverage(xs, g);
  CHECK(rep.total == 2);
  CHECK(rep.hit_fraction[0] == doctest::Approx(18.0 / 20.0));
  CHECK(rep.hit_fraction[1] == doctest::Approx(2.0 / 20.0));
  CHECK(rep.covered == 2);
  // Raising the threshold above 10% drops the right mode.
  CHECK(mode_coverage(xs, g, {}, 0.11).covered == 1);
  xs.push_back({0.5, 0.31});
  CHECK(mode_coverage(xs, g).hit_fraction[1] == doctest::Approx(2.0 / 21.0));
}

TEST_CASE("mode coverage follows condition shifts and validates input") {
  auto g = two_modes();
  g.shifts = {{{0.0}, {0.0, 0.0}}, {{1.0}, {0.0, 0.5}}};
  const std::vector<std::vector<double>> xs(10, std::vector<double>{0.5, 0.5});
  CHECK(mode_coverage(xs, g, std::vector<double>{1.0}).covered == 1);
  CHECK(mode_coverage(xs, g, std::vector<double>{0.0}).covered == 0);
  CHECK_THROWS_AS(mode_coverage(xs, g, std::vector<double>{2.0}), ContractError);
  CHECK_THROWS_AS(mode_coverage(std::vector<std::vector<double>>{}, g), ContractError);
  CHECK_THROWS_AS(mode_coverage(std::vector<std::vector<double>>{{0.0}}, g), ContractError);
}

TEST_CASE("rate summary uses the population standard deviation") {
  const auto s = summarize_rates({0.1, 0.3, 0.2, 0.6});
  CHECK(s.mean == doctest::Approx(0.3));
  CHECK(s.std == doctest::Approx(std::sqrt((0.04 + 0.0 + 0.01 + 0.09) / 4.0)));
  CHECK(summarize_rates({}).mean == 0.0);
}

TEST_CASE("fit_correlation matches a two-pass reference and recovers exact lines") {
  RandomSource rng(1);
  std::vector<double> r, l;
  for (int i = 0; i < 200; ++i) {
    r.push_back(rng.uniform());
    l.push_back(3.0 * r.back() - 1.0 + 0.5 * rng.gaussian());
  }
  const auto c = fit_correlation(r, l);
  CHECK(c.n == 200);
  CHECK(c.pearson == doctest::Approx(oracle::pearson(r, l)).epsilon(1e-12));
  std::vector<double> line;
  for (double v : r) line.push_back(-2.0 * v + 4.0);
  const auto e = fit_correlation(r, line);
  CHECK(e.pearson == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(e.slope == doctest::Approx(-2.0).epsilon(1e-12));
  CHECK(e.intercept == doctest::Approx(4.0).epsilon(1e-12));
  const std::vector<double> flat(200, 1.5);
  CHECK(fit_correlation(r, flat).pearson == 0.0);
}

TEST_CASE("fit_correlation refuses small or degenerate inputs") {
  std::vector<double> r(29, 0.0), l(29, 0.0);
  r[0] = 1.0;
  CHECK_THROWS_AS(fit_correlation(r, l), ContractError);
  std::vector<double> narrow(40, 0.5), l40(40, 0.0);
  narrow[0] = 0.65;
  CHECK_THROWS_AS(fit_correlation(narrow, l40), ContractError);
  CHECK_THROWS_AS(fit_correlation(narrow, l), ContractError);
}

TEST_CASE("risk/log-likelihood correlation under the identity flow") {
  const FlowModel identity(FlowArchitecture{.dim = 2});
  RandomSource rng(2);
  std::vector<WeightedSample> samples;
  std::vector<double> r, l;
  for (int i = 0; i < 100; ++i) {
    WeightedSample s;
    s.x = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
    s.risk = rng.uniform();
    samples.push_back(s);
    r.push_back(s.risk);
    l.push_back(std::log(oracle::gaussian_pdf(s.x, {0.0, 0.0}, 1.0)));
  }
  CHECK(risk_loglik_correlation(identity, samples).pearson ==
        doctest::Approx(oracle::pearson(r, l)).epsilon(1e-10));
  CHECK_THROWS_AS(risk_loglik_correlation(identity, {}), ContractError);
}

TEST_CASE("sample collision rate per route from hand-placed scenarios") {
  const auto sim = IntersectionConfig::standard();
  const auto norm = sim.normalizer();
  const auto y0 = sim.condition_vector(0);
  const auto y1 = sim.condition_vector(1);
  auto at = [&](std::vector<double> phys, const std::vector<double>& y) {
    WeightedSample s;
    s.x = norm.to_model(phys);
    s.y = y;
    return s;
  };
  // On route 0 the ego starts at (1.75, -20): a cyclist standing there collides.
  const std::vector<WeightedSample> samples{
      at({1.75, -20.0, 0.0, 0.0}, y0), at({19.0, 19.0, 0.0, 0.0}, y0),
      at({19.0, 19.0, 0.0, 0.0}, y0),  at({19.0, -19.0, 0.0, 0.0}, y0),
      at({19.0, 19.0, 0.0, 0.0}, y1)};
  const auto rate = sample_collision_rate(samples, {y0, y1}, sim);
  CHECK(rate.per_condition == std::vector<double>{0.25, 0.0});
  CHECK(rate.mean == doctest::Approx(0.125));
  CHECK_THROWS_AS(sample_collision_rate(samples, {sim.condition_vector(2)}, sim), ContractError);
}

TEST_CASE("generator collision rate is seeded and independent of worker count") {
  const auto sim = IntersectionConfig::standard();
  const FlowModel identity(FlowArchitecture{.dim = 4, .cond_dim = 4});
  const std::vector<std::vector<double>> conds{sim.condition_vector(0), sim.condition_vector(3)};
  const auto a = collision_rate(identity, conds, 200, 0.5, sim, 7, 1);
  const auto b = collision_rate(identity, conds, 200, 0.5, sim, 7, 3);
  CHECK(a.per_condition == b.per_condition);
  for (double r : a.per_condition) {
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
  }
  // Same draws, recounted directly through the simulator.
  for (std::size_t c = 0; c < conds.size(); ++c) {
    RandomSource rng = RandomSource(7).split(c);
    auto xs = sample(identity, 200, 0.5, conds[c], rng);
    std::size_t hits = 0;
    for (auto& x : xs) {
      clamp_to_box(x);
      const auto phys = sim.normalizer().to_physical(x);
      hits += simulate_intersection(sim, CyclistState::from_vector(phys),
                                    sim.route_index_for(conds[c]), idm_yielding_policy(sim))
                  .collided;
    }
    CHECK(a.per_condition[c] == static_cast<double>(hits) / 200.0);
  }
  CHECK_THROWS_AS(collision_rate(identity, conds, 0, 0.5, sim, 7), ContractError);
  CHECK_THROWS_AS(collision_rate(FlowModel(FlowArchitecture{.dim = 2, .cond_dim = 4}), conds, 5, 0.5, sim, 7),
                  ContractError);
}

TEST_CASE("comparison report sorts by ledger then name and formats a csv") {
  const auto rows = comparison_report({{"uniform", 400, 0.01, 0.0, {0.01, 0.01}},
                                       {"ours", 300, 0.5, 0.1, {0.4, 0.6}},
                                       {"hmc", 400, 0.02, 0.01, {0.01}}});
  CHECK(rows[0].method == "ours");
  CHECK(rows[1].method == "hmc");
  CHECK(rows[2].method == "uniform");
  const auto csv = comparison_csv(rows, {"a", "b"});
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "method,queries,collision_rate_mean,collision_rate_std,rate_a,rate_b");
  std::getline(in, line);
  CHECK(line == "ours,300,0.500000,0.100000,0.400000,0.600000");
  std::getline(in, line);
  CHECK(line == "hmc,400,0.020000,0.010000,0.010000,");
}

TEST_CASE("series csv writes a header and paired rows") {
  const auto path = (std::filesystem::temp_directory_path() / "critgen_series.csv").string();
  const std::vector<double> xs{1, 2}, ys{0.5, 0.25};
  write_series_csv(path, "queries", "covered", xs, ys);
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == "queries,covered\n1,0.5\n2,0.25\n");
  CHECK_THROWS_AS(write_series_csv(path, "a", "b", xs, std::vector<double>{1.0}), ContractError);
  std::filesystem::remove(path);
}
