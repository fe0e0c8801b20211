#include "critgen/envs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <numbers>

#include "critgen/errors.hpp"

namespace critgen {

// ---------------------------------------------------------------------------
// Gaussian-mixture landscape

void GmmLandscape::validate() const {
  if (modes.empty()) throw ContractError("gmm: no modes");
  double total = 0.0;
  for (const auto& m : modes) {
    if (m.center.size() != dim()) throw ContractError("gmm: inconsistent mode dimensions");
    if (!(m.std > 0.0) || !(m.weight > 0.0)) throw ContractError("gmm: std and weight must be > 0");
    total += m.weight;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ContractError("gmm: weights must sum to 1");
  for (const auto& s : shifts) {
    if (s.translation.size() != dim()) throw ContractError("gmm: shift dimension mismatch");
  }
}

std::vector<std::vector<double>> GmmLandscape::centers_for(std::span<const double> y) const {
  const std::vector<double>* shift = nullptr;
  if (!shifts.empty()) {
    for (const auto& s : shifts) {
      if (std::equal(s.condition.begin(), s.condition.end(), y.begin(), y.end())) {
        shift = &s.translation;
      }
    }
    if (shift == nullptr) throw ContractError("gmm: condition not in the landscape's catalog");
  }
  std::vector<std::vector<double>> centers;
  for (const auto& m : modes) {
    auto c = m.center;
    if (shift != nullptr) {
      for (std::size_t i = 0; i < c.size(); ++i) c[i] += (*shift)[i];
    }
    centers.push_back(std::move(c));
  }
  return centers;
}

namespace {

double mixture_density(const std::vector<GmmMode>& modes,
                       const std::vector<std::vector<double>>& centers,
                       std::span<const double> x) {
  const double d = static_cast<double>(x.size());
  double p = 0.0;
  for (std::size_t m = 0; m < modes.size(); ++m) {
    double sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double diff = x[i] - centers[m][i];
      sq += diff * diff;
    }
    const double var = modes[m].std * modes[m].std;
    p += modes[m].weight * std::exp(-0.5 * sq / var) /
         std::pow(2.0 * std::numbers::pi * var, 0.5 * d);
  }
  return p;
}

}  // namespace

double GmmLandscape::density(std::span<const double> x, std::span<const double> y) const {
  if (x.size() != dim()) throw ContractError("gmm: x dimension mismatch");
  return mixture_density(modes, centers_for(y), x);
}

double gmm_risk(const GmmLandscape& landscape, std::span<const double> x,
                std::span<const double> y) {
  const auto centers = landscape.centers_for(y);
  if (x.size() != landscape.dim()) throw ContractError("gmm: x dimension mismatch");
  double peak = 0.0;
  for (const auto& c : centers) peak = std::max(peak, mixture_density(landscape.modes, centers, c));
  return std::min(1.0, mixture_density(landscape.modes, centers, x) / peak);
}

GmmLandscape GmmLandscape::standard_four_mode() {
  // A square rotated off the axes: coupling flows fit the axis-aligned
  // product layout poorly.
  GmmLandscape g;
  for (int k = 0; k < 4; ++k) {
    const double t = (20.0 + 90.0 * k) * std::numbers::pi / 180.0;
    g.modes.push_back({{0.65 * std::cos(t), 0.65 * std::sin(t)}, 0.08, 0.25});
  }
  return g;
}

GmmLandscape GmmLandscape::far_two_mode() {
  GmmLandscape g;
  g.modes.push_back({{-0.6, 0.0}, 0.08, 0.5});
  g.modes.push_back({{0.6, 0.0}, 0.08, 0.5});
  return g;
}

GmmLandscape GmmLandscape::single_mode(std::vector<double> center, double std) {
  GmmLandscape g;
  g.modes.push_back({std::move(center), std, 1.0});
  return g;
}

// ---------------------------------------------------------------------------
// IDM

double idm_acceleration(double gap, double own_speed, double closing_speed, const IdmParams& p) {
  const double v = std::max(own_speed, 0.0);
  const double free_term = std::pow(v / p.desired_speed, 4.0);
  double interaction = 0.0;
  if (std::isfinite(gap)) {
    const double s = std::max(gap, 0.1);
    const double desired_gap =
        p.min_gap + v * p.time_headway +
        v * closing_speed / (2.0 * std::sqrt(p.max_accel * p.comfort_decel));
    const double ratio = std::max(desired_gap, 0.0) / s;
    interaction = ratio * ratio;
  }
  const double acc = p.max_accel * (1.0 - free_term - interaction);
  return std::clamp(acc, -p.max_decel, p.max_accel);
}

// ---------------------------------------------------------------------------
// Route geometry

namespace {

double norm2(Point2 a) { return std::hypot(a[0], a[1]); }
Point2 sub(Point2 a, Point2 b) { return {a[0] - b[0], a[1] - b[1]}; }

struct Polyline {
  const std::vector<Point2>& pts;
  std::vector<double> cum;

  explicit Polyline(const std::vector<Point2>& p) : pts(p), cum(p.size(), 0.0) {
    for (std::size_t i = 1; i < p.size(); ++i) cum[i] = cum[i - 1] + norm2(sub(p[i], p[i - 1]));
  }

  double length() const { return cum.back(); }

  std::size_t segment_at(double s) const {
    std::size_t i = 0;
    while (i + 2 < pts.size() && cum[i + 1] <= s) ++i;
    return i;
  }

  // Extrapolates linearly past either end.
  Point2 position(double s) const {
    const std::size_t i = segment_at(s);
    const Point2 dir = tangent_of(i);
    const double u = s - cum[i];
    return {pts[i][0] + u * dir[0], pts[i][1] + u * dir[1]};
  }

  Point2 tangent(double s) const { return tangent_of(segment_at(s)); }

  Point2 tangent_of(std::size_t i) const {
    const Point2 d = sub(pts[i + 1], pts[i]);
    const double n = norm2(d);
    return {d[0] / n, d[1] / n};
  }

  // Closest point on the polyline: (arc length, distance).
  std::pair<double, double> project(Point2 q) const {
    double best_s = 0.0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
      const Point2 seg = sub(pts[i + 1], pts[i]);
      const double len2 = seg[0] * seg[0] + seg[1] * seg[1];
      const Point2 rel = sub(q, pts[i]);
      const double u = std::clamp((rel[0] * seg[0] + rel[1] * seg[1]) / len2, 0.0, 1.0);
      const Point2 c{pts[i][0] + u * seg[0], pts[i][1] + u * seg[1]};
      const double d = norm2(sub(q, c));
      if (d < best_d) {
        best_d = d;
        best_s = cum[i] + u * std::sqrt(len2);
      }
    }
    return {best_s, best_d};
  }

  // First crossing of segment [a, b] with the route at arc length > s_min.
  // Returns (arc length on route, fraction along [a, b]) or s < 0 if none.
  std::pair<double, double> first_crossing(Point2 a, Point2 b, double s_min) const {
    double best_s = -1.0;
    double best_u = 0.0;
    const Point2 r = sub(b, a);
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
      const Point2 q = pts[i];
      const Point2 seg = sub(pts[i + 1], q);
      const double denom = r[0] * seg[1] - r[1] * seg[0];
      if (std::abs(denom) < 1e-12) continue;
      const Point2 qa = sub(q, a);
      const double u = (qa[0] * seg[1] - qa[1] * seg[0]) / denom;  // along [a, b]
      const double w = (qa[0] * r[1] - qa[1] * r[0]) / denom;      // along segment
      if (u < 0.0 || u > 1.0 || w < 0.0 || w > 1.0) continue;
      const double s = cum[i] + w * norm2(seg);
      if (s > s_min && (best_s < 0.0 || s < best_s)) {
        best_s = s;
        best_u = u;
      }
    }
    return {best_s, best_u};
  }
};

std::vector<Point2> arc(Point2 center, double radius, double from_deg, double to_deg, int n) {
  std::vector<Point2> pts;
  for (int k = 1; k < n; ++k) {
    const double a = (from_deg + (to_deg - from_deg) * k / n) * std::numbers::pi / 180.0;
    pts.push_back({center[0] + radius * std::cos(a), center[1] + radius * std::sin(a)});
  }
  return pts;
}

}  // namespace

IntersectionConfig IntersectionConfig::standard() {
  IntersectionConfig c;
  const double h = c.lane_width / 2.0;  // lane centerline offset
  const double w = c.lane_width;
  const double start = -c.position_half_range;
  const double far = 30.0;

  c.routes.push_back({"straight_north", {{h, start}, {h, 0.0}, {h, far}}});

  Route left{"left_west", {{h, start}, {h, -w}}};
  for (auto p : arc({-w, -w}, w + h, 0.0, 90.0, 8)) left.waypoints.push_back(p);
  left.waypoints.push_back({-w, h});
  left.waypoints.push_back({-far, h});
  c.routes.push_back(std::move(left));

  Route right{"right_east", {{h, start}, {h, -w}}};
  for (auto p : arc({w, -w}, w - h, 180.0, 90.0, 6)) right.waypoints.push_back(p);
  right.waypoints.push_back({w, -h});
  right.waypoints.push_back({far, -h});
  c.routes.push_back(std::move(right));

  c.routes.push_back({"straight_east", {{start, -h}, {0.0, -h}, {far, -h}}});
  return c;
}

void IntersectionConfig::validate() const {
  if (!(dt > 0.0)) throw ConfigError("intersection: dt must be > 0");
  if (steps == 0) throw ConfigError("intersection: steps must be positive");
  if (!(position_half_range > 0.0) || !(speed_half_range > 0.0)) {
    throw ConfigError("intersection: parameter ranges must be non-degenerate");
  }
  if (routes.empty()) throw ConfigError("intersection: empty route catalog");
  for (const auto& r : routes) {
    if (r.waypoints.size() < 2) throw ConfigError("intersection: route '" + r.id + "' too short");
  }
  const double traverse = (position_half_range + 2.0 * lane_width) / idm.desired_speed;
  if (static_cast<double>(steps) * dt < traverse) {
    throw ConfigError("intersection: horizon shorter than the time to cross the intersection");
  }
  if (!(collision_radius > 0.0)) throw ConfigError("intersection: collision_radius must be > 0");
}

Normalizer IntersectionConfig::normalizer() const {
  const double p = position_half_range;
  const double v = speed_half_range;
  return Normalizer{{-p, -p, -v, -v}, {p, p, v, v}};
}

std::vector<double> IntersectionConfig::condition_vector(std::size_t route_index) const {
  const auto& wp = routes.at(route_index).waypoints;
  return {wp.front()[0] / condition_scale, wp.front()[1] / condition_scale,
          wp.back()[0] / condition_scale, wp.back()[1] / condition_scale};
}

std::size_t IntersectionConfig::route_index_for(std::span<const double> y) const {
  for (std::size_t i = 0; i < routes.size(); ++i) {
    const auto c = condition_vector(i);
    if (std::equal(c.begin(), c.end(), y.begin(), y.end())) return i;
  }
  throw ConfigError("intersection: condition vector matches no route in the catalog");
}

CyclistState CyclistState::from_vector(std::span<const double> v) {
  if (v.size() != 4) throw ContractError("cyclist state needs 4 components");
  return {v[0], v[1], v[2], v[3]};
}

EgoPolicy idm_yielding_policy(const IntersectionConfig& config) {
  return [config](const Route& route, const EgoObservation& obs) {
    const Polyline line(route.waypoints);
    const auto& idm = config.idm;
    const double v = obs.speed;
    const Point2 pc = obs.cyclist_position;
    const Point2 vc = obs.cyclist_velocity;
    if (norm2(sub(pc, obs.position)) > config.sensor_range) {
      return idm_acceleration(std::numeric_limits<double>::infinity(), v, 0.0, idm);
    }
    double gap = std::numeric_limits<double>::infinity();
    double closing = 0.0;

    // Cyclist already in the lane ahead: follow it.
    const auto [s_proj, lateral] = line.project(pc);
    if (lateral < 0.5 * config.lane_width && s_proj > obs.arc_position) {
      const Point2 t = line.tangent(s_proj);
      gap = s_proj - obs.arc_position - config.collision_radius;
      closing = v - (vc[0] * t[0] + vc[1] * t[1]);
    }

    // Cyclist predicted to cross the route ahead: stop short of the crossing.
    const double speed_c = norm2(vc);
    if (speed_c > 0.1) {
      const Point2 end{pc[0] + vc[0] * config.lookahead_time, pc[1] + vc[1] * config.lookahead_time};
      const auto [s_cross, u] = line.first_crossing(pc, end, obs.arc_position);
      if (s_cross > 0.0 && s_cross - obs.arc_position < config.sensor_range) {
        const double t_cyclist = u * config.lookahead_time;
        const double t_ego = (s_cross - obs.arc_position) / std::max(v, 0.5);
        const double g = s_cross - obs.arc_position - 0.5 * config.lane_width -
                         config.collision_radius;
        if (t_cyclist < t_ego + config.conflict_window && g < gap) {
          gap = g;
          closing = v;
        }
      }
    }
    return idm_acceleration(gap, v, closing, idm);
  };
}

RolloutTrace simulate_intersection(const IntersectionConfig& config, const CyclistState& cyclist,
                                   std::size_t route_index, const EgoPolicy& policy) {
  if (route_index >= config.routes.size()) {
    throw ConfigError("intersection: route index " + std::to_string(route_index) +
                      " outside catalog of " + std::to_string(config.routes.size()));
  }
  const Route& route = config.routes[route_index];
  const Polyline line(route.waypoints);
  const IdmParams& idm = config.idm;

  RolloutTrace trace;
  trace.steps.reserve(config.steps + 1);
  double s = 0.0;
  double v = idm.desired_speed;
  Point2 pc{cyclist.x, cyclist.y};
  const Point2 vc{cyclist.vx, cyclist.vy};
  trace.min_distance = std::numeric_limits<double>::infinity();

  auto record = [&](std::size_t k, double accel) {
    const Point2 pe = line.position(s);
    trace.steps.push_back({static_cast<double>(k) * config.dt, pe, pc, v, accel});
    const double d = norm2(sub(pe, pc));
    trace.min_distance = std::min(trace.min_distance, d);
    if (d < config.collision_radius) trace.collided = true;
  };

  record(0, 0.0);
  for (std::size_t k = 1; k <= config.steps && !trace.collided; ++k) {
    EgoObservation obs{static_cast<double>(k - 1) * config.dt, s, v, line.position(s),
                       line.tangent(s), pc, vc};
    const double a = std::clamp(policy(route, obs), -idm.max_decel, idm.max_accel);
    const double v_next = std::max(0.0, v + a * config.dt);
    s += 0.5 * (v + v_next) * config.dt;
    v = v_next;
    pc = {pc[0] + vc[0] * config.dt, pc[1] + vc[1] * config.dt};
    record(k, a);
  }
  return trace;
}

RolloutTrace simulate_intersection(const IntersectionConfig& config, const CyclistState& cyclist,
                                   std::span<const double> y, const EgoPolicy& policy) {
  return simulate_intersection(config, cyclist, config.route_index_for(y), policy);
}

double risk_from_trace(const RolloutTrace& trace) { return std::exp(-trace.min_distance); }

void write_trace_csv(const RolloutTrace& trace, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "t,ego_x,ego_y,cyclist_x,cyclist_y,ego_speed,ego_accel\n" << std::setprecision(10);
  for (const auto& st : trace.steps) {
    out << st.t << ',' << st.ego[0] << ',' << st.ego[1] << ',' << st.cyclist[0] << ','
        << st.cyclist[1] << ',' << st.ego_speed << ',' << st.ego_accel << '\n';
  }
}

double intersection_risk(const IntersectionConfig& config, std::span<const double> x_model,
                         std::span<const double> y) {
  return make_intersection_risk(config)(x_model, y);
}

std::function<double(std::span<const double>, std::span<const double>)> make_intersection_risk(
    const IntersectionConfig& config) {
  auto cfg = std::make_shared<const IntersectionConfig>(config);
  auto policy = std::make_shared<const EgoPolicy>(idm_yielding_policy(config));
  auto norm = std::make_shared<const Normalizer>(config.normalizer());
  return [cfg, policy, norm](std::span<const double> x_model, std::span<const double> y) {
    const auto phys = norm->to_physical(x_model);
    return risk_from_trace(
        simulate_intersection(*cfg, CyclistState::from_vector(phys), y, *policy));
  };
}

// ---------------------------------------------------------------------------
// Synthetic prior data

SyntheticPriorMixture SyntheticPriorMixture::standard() {
  SyntheticPriorMixture m;
  const double b = m.band_offset;
  m.components = {
      {{0.0, b, 3.5, 0.0}, {4.0, 1.2, 0.8, 0.3}, 0.25},
      {{0.0, b, -3.5, 0.0}, {4.0, 1.2, 0.8, 0.3}, 0.25},
      {{b, 0.0, 0.0, 3.5}, {1.2, 4.0, 0.3, 0.8}, 0.25},
      {{b, 0.0, 0.0, -3.5}, {1.2, 4.0, 0.3, 0.8}, 0.25},
  };
  return m;
}

double SyntheticPriorMixture::log_density(std::span<const double> x) const {
  if (x.size() != 4) throw ContractError("prior mixture: expected 4 components");
  // log-sum-exp over components
  std::vector<double> terms;
  for (const auto& c : components) {
    double t = std::log(c.weight);
    for (std::size_t i = 0; i < 4; ++i) {
      const double z = (x[i] - c.mean[i]) / c.std[i];
      t += -0.5 * z * z - std::log(c.std[i]) - 0.5 * std::log(2.0 * std::numbers::pi);
    }
    terms.push_back(t);
  }
  const double mx = *std::max_element(terms.begin(), terms.end());
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - mx);
  return mx + std::log(acc);
}

double SyntheticPriorMixture::log_density_model(std::span<const double> model,
                                                const Normalizer& norm) const {
  double log_jac = 0.0;
  for (std::size_t i = 0; i < norm.dim(); ++i) log_jac += std::log(0.5 * (norm.hi[i] - norm.lo[i]));
  return log_density(norm.to_physical(model)) + log_jac;
}

bool SyntheticPriorMixture::in_band(std::span<const double> x) const {
  return std::abs(x[1] - band_offset) <= band_half_width ||
         std::abs(x[0] - band_offset) <= band_half_width;
}

std::vector<std::vector<double>> synth_prior_data(RandomSource& rng, std::size_t n,
                                                  const SyntheticPriorMixture& mixture) {
  if (n == 0) throw ContractError("synth_prior_data: n must be >= 1");
  std::vector<double> cdf;
  double acc = 0.0;
  for (const auto& c : mixture.components) cdf.push_back(acc += c.weight);
  std::vector<std::vector<double>> out;
  out.reserve(n);
  while (out.size() < n) {
    const double u = rng.uniform() * acc;
    std::size_t k = 0;
    while (k + 1 < cdf.size() && u >= cdf[k]) ++k;
    const auto& c = mixture.components[k];
    std::vector<double> x(4);
    for (std::size_t i = 0; i < 4; ++i) x[i] = c.mean[i] + c.std[i] * rng.gaussian();
    const double speed = std::hypot(x[2], x[3]);
    if (speed < mixture.min_speed || speed > mixture.max_speed) continue;
    out.push_back(std::move(x));
  }
  return out;
}

}  // namespace critgen
