#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <vector>

#include "critgen/envs.hpp"
#include "critgen/errors.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace critgen;

namespace {

double gmm_density_oracle(const GmmLandscape& g, const std::vector<double>& x) {
  double p = 0.0;
  for (const auto& m : g.modes) p += m.weight * oracle::gaussian_pdf(x, m.center, m.std);
  return p;
}

// Route 0 of the standard catalog: straight north along x = 1.75 from y = -20.
constexpr double kLaneX = 1.75;
constexpr double kStartY = -20.0;

// Brakes at 3 m/s^2 while the cyclist is within 12 m ahead-or-beside, else
// free-road IDM. Written here, independent of the library policy.
double test_policy_accel(double ego_y, double v, double cx, double cy, const IdmParams& p) {
  const double dx = cx - kLaneX;
  const double dy = cy - ego_y;
  if (dy > -2.0 && std::hypot(dx, dy) < 12.0) return -3.0;
  return p.max_accel * (1.0 - std::pow(v / p.desired_speed, 4));
}

}  // namespace

// ---------------------------------------------------------------------------
// GMM landscape

TEST_CASE("gmm_risk is 1 at the mode centers of the symmetric landscape") {
  const auto g = GmmLandscape::standard_four_mode();
  for (const auto& m : g.modes) CHECK(gmm_risk(g, m.center, {}) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("gmm_risk at the dominant mode is the normalization anchor") {
  GmmLandscape g;
  g.modes = {{{-0.5, 0.0}, 0.1, 0.7}, {{0.5, 0.0}, 0.1, 0.3}};
  CHECK(gmm_risk(g, std::vector<double>{-0.5, 0.0}, {}) == 1.0);
  CHECK(gmm_risk(g, std::vector<double>{0.5, 0.0}, {}) < 1.0);
}

TEST_CASE("gmm_risk far from every mode is negligible") {
  const auto g = GmmLandscape::standard_four_mode();
  // 10 std beyond the farthest reach of any mode.
  CHECK(gmm_risk(g, std::vector<double>{0.0, 0.0}, {}) < 1e-6);
  CHECK(gmm_risk(g, std::vector<double>{-0.65 - 0.8, 0.9}, {}) < 1e-6);
}

TEST_CASE("gmm_risk matches a handwritten mixture evaluation") {
  const auto g = GmmLandscape::standard_four_mode();
  double peak = 0.0;
  for (const auto& m : g.modes) peak = std::max(peak, gmm_density_oracle(g, m.center));
  RandomSource rng(1);
  for (int i = 0; i < 50; ++i) {
    const std::vector<double> x{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    CHECK(gmm_risk(g, x, {}) == doctest::Approx(gmm_density_oracle(g, x) / peak).epsilon(1e-12));
  }
  // Centroid of the four centers; tiny but exactly representable in ratio.
  const std::vector<double> centroid{0.0, 0.0};
  CHECK(gmm_risk(g, centroid, {}) ==
        doctest::Approx(gmm_density_oracle(g, centroid) / peak).epsilon(1e-9));
}

TEST_CASE("gmm condition shifts translate the modes") {
  auto g = GmmLandscape::far_two_mode();
  g.shifts = {{{1.0}, {0.1, -0.2}}, {{2.0}, {0.0, 0.3}}};
  const std::vector<double> y1{1.0};
  const auto c = g.centers_for(y1);
  CHECK(c[0] == std::vector<double>{-0.5, -0.2});
  CHECK(gmm_risk(g, std::vector<double>{0.7, -0.2}, y1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(g.centers_for(std::vector<double>{3.0}), ContractError);
}

TEST_CASE("gmm validation rejects bad mixtures") {
  GmmLandscape g;
  g.modes = {{{0.0, 0.0}, 0.1, 0.4}, {{0.5, 0.0}, 0.1, 0.4}};
  CHECK_THROWS_AS(g.validate(), ContractError);
  g.modes[1].weight = 0.6;
  CHECK_NOTHROW(g.validate());
  g.modes[1].std = 0.0;
  CHECK_THROWS_AS(g.validate(), ContractError);
}

// ---------------------------------------------------------------------------
// IDM

TEST_CASE("idm: free road at desired speed is equilibrium") {
  const IdmParams p;
  CHECK(std::abs(idm_acceleration(INFINITY, p.desired_speed, 0.0, p)) < 1e-6);
}

TEST_CASE("idm: standing start on a free road uses full acceleration") {
  const IdmParams p;
  CHECK(idm_acceleration(1e9, 0.0, 0.0, p) == doctest::Approx(p.max_accel).epsilon(1e-12));
}

TEST_CASE("idm: gap equal to the desired gap matches the formula") {
  const IdmParams p;
  const double v = 10.0;
  const double s_star = p.min_gap + v * p.time_headway;
  const double expected = p.max_accel * (1.0 - std::pow(v / p.desired_speed, 4) - 1.0);
  CHECK(idm_acceleration(s_star, v, 0.0, p) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(-4.8828125));
}

TEST_CASE("idm: closing speed raises the desired gap; output is clamped") {
  const IdmParams p;
  const double v = 6.0, gap = 20.0, dv = 2.0;
  const double s_star = p.min_gap + v * p.time_headway +
                        v * dv / (2.0 * std::sqrt(p.max_accel * p.comfort_decel));
  const double expected =
      p.max_accel * (1.0 - std::pow(v / p.desired_speed, 4) - (s_star / gap) * (s_star / gap));
  CHECK(idm_acceleration(gap, v, dv, p) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(idm_acceleration(0.0, 8.0, 8.0, p) == -p.max_decel);
  CHECK(idm_acceleration(-5.0, 8.0, 0.0, p) == -p.max_decel);
}

// ---------------------------------------------------------------------------
// Intersection simulator

TEST_CASE("standard intersection config is valid and consistent") {
  const auto cfg = IntersectionConfig::standard();
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.routes.size() == 4);
  for (std::size_t i = 0; i < cfg.routes.size(); ++i) {
    CHECK(cfg.route_index_for(cfg.condition_vector(i)) == i);
  }
  CHECK_THROWS_AS(cfg.route_index_for(std::vector<double>{9, 9, 9, 9}), ConfigError);

  auto bad = cfg;
  bad.dt = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.steps = 10;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.speed_half_range = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("normalizer maps the parameter box onto [-1, 1]^4") {
  const auto n = IntersectionConfig::standard().normalizer();
  const std::vector<double> corner{20.0, -20.0, 7.0, -7.0};
  CHECK(n.to_model(corner) == std::vector<double>{1.0, -1.0, 1.0, -1.0});
  const std::vector<double> mid{5.0, -2.0, 1.4, 0.0};
  const auto back = n.to_physical(n.to_model(mid));
  for (int i = 0; i < 4; ++i) CHECK(back[i] == doctest::Approx(mid[i]).epsilon(1e-14));
}

TEST_CASE("cyclist far away and leaving never comes close") {
  const auto cfg = IntersectionConfig::standard();
  const auto policy = idm_yielding_policy(cfg);
  const auto trace = simulate_intersection(cfg, {100.0, 100.0, 5.0, 5.0}, 0, policy);
  CHECK_FALSE(trace.collided);
  CHECK(trace.min_distance > 50.0);
  CHECK(trace.steps.size() == cfg.steps + 1);
}

TEST_CASE("stationary cyclist on the ego start collides at t = 0") {
  const auto cfg = IntersectionConfig::standard();
  const auto policy = idm_yielding_policy(cfg);
  const auto trace = simulate_intersection(cfg, {kLaneX, kStartY, 0.0, 0.0}, 0, policy);
  CHECK(trace.collided);
  CHECK(trace.min_distance == 0.0);
  CHECK(trace.steps.size() == 1);
  CHECK(risk_from_trace(trace) == 1.0);
}

TEST_CASE("simulator kinematics match an independent integration at dt/10") {
  auto cfg = IntersectionConfig::standard();
  // Side crossing at 5 m/s timed to meet the ego at the center at t = 2.5 s.
  const CyclistState cyc{kLaneX - 12.5, 0.0, 5.0, 0.0};
  const EgoPolicy policy = [&](const Route&, const EgoObservation& o) {
    return test_policy_accel(o.position[1], o.speed, o.cyclist_position[0], o.cyclist_position[1],
                             cfg.idm);
  };
  const auto trace = simulate_intersection(cfg, cyc, 0, policy);

  // Oracle: semi-implicit Euler at dt/10 along the straight lane.
  const double h = cfg.dt / 10.0;
  double y = kStartY, v = cfg.idm.desired_speed;
  double cx = cyc.x, cy = cyc.y;
  double min_d = std::hypot(cx - kLaneX, cy - y);
  for (std::size_t k = 0; k < cfg.steps * 10; ++k) {
    double a = test_policy_accel(y, v, cx, cy, cfg.idm);
    a = std::clamp(a, -cfg.idm.max_decel, cfg.idm.max_accel);
    const double vn = std::max(0.0, v + a * h);
    y += 0.5 * (v + vn) * h;
    v = vn;
    cx += cyc.vx * h;
    cy += cyc.vy * h;
    min_d = std::min(min_d, std::hypot(cx - kLaneX, cy - y));
    if (min_d < cfg.collision_radius) break;
  }
  // Both sides sample the distance on their own grid; the coarse grid can miss
  // the closest approach by up to half a step of relative motion.
  const double v_rel = std::hypot(cyc.vx, cfg.idm.desired_speed - cyc.vy);
  CHECK(std::abs(trace.min_distance - min_d) < 0.5 * v_rel * cfg.dt + 0.05);
}

TEST_CASE("yielding policy: halving dt moves min distance within the sampling bound") {
  const auto cfg = IntersectionConfig::standard();
  auto fine = cfg;
  fine.dt = cfg.dt / 2.0;
  fine.steps = cfg.steps * 2;
  const auto p1 = idm_yielding_policy(cfg);
  const auto p2 = idm_yielding_policy(fine);
  const std::vector<CyclistState> battery = {
      {kLaneX - 12.5, 0.0, 5.0, 0.0}, {15.0, -1.75, -4.0, 0.0}, {-10.0, 5.0, 3.0, -1.0},
      {1.75, 10.0, 0.0, -3.0},         {5.0, -15.0, -1.0, 2.0},  {-8.0, -8.0, 2.0, 2.0},
      {12.0, 12.0, -3.0, -3.0},        {0.0, -5.0, 0.0, 0.0}};
  for (std::size_t r = 0; r < cfg.routes.size(); ++r) {
    for (const auto& c : battery) {
      const auto a = simulate_intersection(cfg, c, r, p1);
      const auto b = simulate_intersection(fine, c, r, p2);
      const double v_rel = cfg.idm.desired_speed + std::hypot(c.vx, c.vy);
      CHECK(std::abs(a.min_distance - b.min_distance) < 0.5 * v_rel * cfg.dt + 0.05);
    }
  }
}

TEST_CASE("trace invariants hold over random scenarios") {
  const auto cfg = IntersectionConfig::standard();
  const auto policy = idm_yielding_policy(cfg);
  const auto norm = cfg.normalizer();
  RandomSource rng(7);
  for (int i = 0; i < 200; ++i) {
    const std::vector<double> xm{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1),
                                 rng.uniform(-1, 1)};
    const auto c = CyclistState::from_vector(norm.to_physical(xm));
    const std::size_t route = rng.uniform_index(cfg.routes.size());
    const auto t = simulate_intersection(cfg, c, route, policy);
    double min_d = INFINITY;
    for (std::size_t k = 0; k < t.steps.size(); ++k) {
      const auto& s = t.steps[k];
      min_d = std::min(min_d, std::hypot(s.ego[0] - s.cyclist[0], s.ego[1] - s.cyclist[1]));
      CHECK(s.ego_speed >= 0.0);
      CHECK(s.ego_accel >= -cfg.idm.max_decel);
      CHECK(s.ego_accel <= cfg.idm.max_accel);
      if (k > 0) {
        CHECK(s.cyclist[0] - t.steps[k - 1].cyclist[0] == doctest::Approx(c.vx * cfg.dt).epsilon(1e-9).scale(1e-9));
        CHECK(s.cyclist[1] - t.steps[k - 1].cyclist[1] == doctest::Approx(c.vy * cfg.dt).epsilon(1e-9).scale(1e-9));
      }
    }
    CHECK(t.min_distance == min_d);
    CHECK(t.collided == (t.min_distance < cfg.collision_radius));
    const auto again = simulate_intersection(cfg, c, route, policy);
    CHECK(again.min_distance == t.min_distance);
    CHECK(again.steps.size() == t.steps.size());
  }
}

TEST_CASE("the ego yields to a cyclist standing in its lane") {
  const auto cfg = IntersectionConfig::standard();
  const auto policy = idm_yielding_policy(cfg);
  const auto t = simulate_intersection(cfg, {kLaneX, 5.0, 0.0, 0.0}, 0, policy);
  CHECK_FALSE(t.collided);
  CHECK(t.steps.back().ego_speed < 0.5);
}

TEST_CASE("risk_from_trace is exp(-min distance) and strictly decreasing") {
  RolloutTrace t;
  t.min_distance = 0.0;
  CHECK(risk_from_trace(t) == 1.0);
  t.min_distance = 1.0;
  CHECK(risk_from_trace(t) == doctest::Approx(0.3679).epsilon(1e-4));
  t.min_distance = 5.0;
  CHECK(risk_from_trace(t) == doctest::Approx(0.00674).epsilon(1e-3));
  double prev = 2.0;
  for (double d = 0.0; d < 30.0; d += 0.25) {
    t.min_distance = d;
    const double r = risk_from_trace(t);
    CHECK(r < prev);
    CHECK(r > 0.0);
    prev = r;
  }
}

TEST_CASE("intersection_risk agrees with the prebuilt risk function") {
  const auto cfg = IntersectionConfig::standard();
  const auto fn = make_intersection_risk(cfg);
  RandomSource rng(8);
  for (int i = 0; i < 20; ++i) {
    const std::vector<double> x{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1),
                                rng.uniform(-1, 1)};
    const auto y = cfg.condition_vector(rng.uniform_index(4));
    CHECK(fn(x, y) == intersection_risk(cfg, x, y));
  }
}

TEST_CASE("trace csv has a header and one row per step") {
  const auto cfg = IntersectionConfig::standard();
  const auto t = simulate_intersection(cfg, {100.0, 100.0, 0.0, 0.0}, 1, idm_yielding_policy(cfg));
  const auto path = (std::filesystem::temp_directory_path() / "critgen_trace.csv").string();
  write_trace_csv(t, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "t,ego_x,ego_y,cyclist_x,cyclist_y,ego_speed,ego_accel");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == t.steps.size());
  std::filesystem::remove(path);
}

// ---------------------------------------------------------------------------
// Synthetic prior data

TEST_CASE("synthetic prior data stays in the crosswalk bands with bounded speeds") {
  const auto mix = SyntheticPriorMixture::standard();
  RandomSource rng(9);
  const auto data = synth_prior_data(rng, 10000, mix);
  REQUIRE(data.size() == 10000);
  std::size_t in_band = 0;
  for (const auto& x : data) {
    // Band membership written out from the generating definition.
    if (std::abs(x[1] - mix.band_offset) <= mix.band_half_width ||
        std::abs(x[0] - mix.band_offset) <= mix.band_half_width) {
      ++in_band;
    }
    CHECK(mix.in_band(x) == (std::abs(x[1] + 8.0) <= 3.0 || std::abs(x[0] + 8.0) <= 3.0));
    const double speed = std::hypot(x[2], x[3]);
    CHECK(speed >= 0.5);
    CHECK(speed <= 7.0);
  }
  CHECK(static_cast<double>(in_band) >= 0.95 * 10000);
}

TEST_CASE("synthetic prior data is reproducible from the seed") {
  RandomSource a(10), b(10), c(11);
  const auto da = synth_prior_data(a, 500);
  CHECK(da == synth_prior_data(b, 500));
  CHECK(da != synth_prior_data(c, 500));
}

TEST_CASE("mixture log density matches a direct diagonal-Gaussian sum") {
  const auto mix = SyntheticPriorMixture::standard();
  const auto norm = IntersectionConfig::standard().normalizer();
  RandomSource rng(12);
  for (int i = 0; i < 30; ++i) {
    const std::vector<double> x{rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-7, 7),
                                rng.uniform(-7, 7)};
    double p = 0.0;
    for (const auto& c : mix.components) {
      double q = c.weight;
      for (int j = 0; j < 4; ++j) {
        q *= std::exp(-0.5 * std::pow((x[j] - c.mean[j]) / c.std[j], 2)) /
             (c.std[j] * std::sqrt(2.0 * std::numbers::pi));
      }
      p += q;
    }
    if (p > 1e-300) CHECK(mix.log_density(x) == doctest::Approx(std::log(p)).epsilon(1e-10));
    // Model space: Jacobian of the affine map is prod (hi - lo) / 2 = 20 * 20 * 7 * 7.
    CHECK(mix.log_density_model(norm.to_model(x), norm) ==
          doctest::Approx(mix.log_density(x) + std::log(20.0 * 20.0 * 7.0 * 7.0)).epsilon(1e-10));
  }
}
