#pragma once

// Black-box risk landscapes: an analytic Gaussian-mixture toy and a 2D
// kinematic intersection with an IDM-driven ego vehicle and a constant-velocity
// cyclist. Also the synthetic stand-in for real-world cyclist data.

#include <array>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "critgen/flow.hpp"
#include "critgen/numerics.hpp"

namespace critgen {

// ---------------------------------------------------------------------------
// Gaussian-mixture landscape

struct GmmMode {
  std::vector<double> center;
  double std = 0.1;
  double weight = 1.0;
};

struct ConditionShift {
  std::vector<double> condition;
  std::vector<double> translation;
};

// Risk is the isotropic mixture density normalized by its largest value over
// the (condition-shifted) mode centers, so the peak risk is 1.
struct GmmLandscape {
  std::vector<GmmMode> modes;
  // Empty means every condition sees the unshifted modes.
  std::vector<ConditionShift> shifts;

  std::size_t dim() const { return modes.empty() ? 0 : modes.front().center.size(); }
  std::vector<std::vector<double>> centers_for(std::span<const double> y) const;
  double density(std::span<const double> x, std::span<const double> y) const;
  void validate() const;

  // Four equal-weight modes, std 0.08, on a circle of radius 0.65 at
  // 20, 110, 200 and 290 degrees.
  static GmmLandscape standard_four_mode();
  // Two equal-weight modes at (+-0.6, 0), std 0.08.
  static GmmLandscape far_two_mode();
  static GmmLandscape single_mode(std::vector<double> center, double std);
};

double gmm_risk(const GmmLandscape& landscape, std::span<const double> x,
                std::span<const double> y);

// ---------------------------------------------------------------------------
// Intelligent driver model

struct IdmParams {
  double desired_speed = 8.0;  // v0, m/s
  double time_headway = 1.5;   // T, s
  double max_accel = 2.0;      // a, m/s^2
  double comfort_decel = 3.0;  // b, m/s^2
  double min_gap = 2.0;        // s0, m
  double max_decel = 6.0;      // b_max, m/s^2
};

// gap in m (clamped below at 0.1; +inf for a free road), closing_speed > 0
// when approaching the leader. Output clamped to [-max_decel, max_accel].
double idm_acceleration(double gap, double own_speed, double closing_speed, const IdmParams& p);

// ---------------------------------------------------------------------------
// Intersection

using Point2 = std::array<double, 2>;

struct Route {
  std::string id;
  std::vector<Point2> waypoints;
};

struct IntersectionConfig {
  double lane_width = 3.5;
  std::vector<Route> routes;
  IdmParams idm;
  double dt = 0.1;
  std::size_t steps = 150;
  double collision_radius = 1.5;
  // Cyclist parameter box: |x|,|y| <= position_half_range, |vx|,|vy| <= speed_half_range.
  double position_half_range = 20.0;
  double speed_half_range = 7.0;
  // Ego perception and yielding.
  double sensor_range = 30.0;
  double lookahead_time = 4.0;
  double conflict_window = 2.0;
  // Condition vectors are route endpoints divided by this.
  double condition_scale = 30.0;

  static IntersectionConfig standard();
  void validate() const;

  Normalizer normalizer() const;
  std::size_t condition_dim() const { return 4; }
  std::vector<double> condition_vector(std::size_t route_index) const;
  // Throws ConfigError if y matches no route.
  std::size_t route_index_for(std::span<const double> y) const;
};

struct CyclistState {
  double x = 0.0;
  double y = 0.0;
  double vx = 0.0;
  double vy = 0.0;

  static CyclistState from_vector(std::span<const double> v);
};

struct EgoObservation {
  double time = 0.0;
  double arc_position = 0.0;
  double speed = 0.0;
  Point2 position{};
  Point2 heading{};
  Point2 cyclist_position{};
  Point2 cyclist_velocity{};
};

// Black-box ego controller: returns a longitudinal acceleration.
using EgoPolicy = std::function<double(const Route&, const EgoObservation&)>;

// IDM that treats a conflicting cyclist as a virtual leader: either the point
// where the cyclist's predicted path crosses the route ahead, or the cyclist
// itself when it is already in the lane ahead.
EgoPolicy idm_yielding_policy(const IntersectionConfig& config);

struct TraceStep {
  double t = 0.0;
  Point2 ego{};
  Point2 cyclist{};
  double ego_speed = 0.0;
  double ego_accel = 0.0;
};

struct RolloutTrace {
  std::vector<TraceStep> steps;
  double min_distance = 0.0;
  bool collided = false;
};

RolloutTrace simulate_intersection(const IntersectionConfig& config, const CyclistState& cyclist,
                                   std::size_t route_index, const EgoPolicy& policy);
// Looks the route up by condition vector.
RolloutTrace simulate_intersection(const IntersectionConfig& config, const CyclistState& cyclist,
                                   std::span<const double> y, const EgoPolicy& policy);

// exp(-min_distance)
double risk_from_trace(const RolloutTrace& trace);

void write_trace_csv(const RolloutTrace& trace, const std::string& path);

// Risk of a model-space scenario on the given route under the IDM policy.
double intersection_risk(const IntersectionConfig& config, std::span<const double> x_model,
                         std::span<const double> y);
// Same, with the policy built once; the returned function is safe to call
// concurrently.
std::function<double(std::span<const double>, std::span<const double>)> make_intersection_risk(
    const IntersectionConfig& config);

// ---------------------------------------------------------------------------
// Synthetic real-world cyclist data

// Four diagonal-Gaussian clusters: two crosswalk bands (y = -8 crossing the
// north-south road, x = -8 crossing the east-west road), each ridden in both
// directions along the band.
struct SyntheticPriorMixture {
  struct Component {
    std::array<double, 4> mean;
    std::array<double, 4> std;
    double weight;
  };
  std::vector<Component> components;
  double band_offset = -8.0;
  double band_half_width = 3.0;
  double min_speed = 0.5;
  double max_speed = 7.0;
  int version = 1;

  static SyntheticPriorMixture standard();

  // Log density in physical units. Truncation to [min_speed, max_speed]
  // removes < 1e-4 of the mass and is ignored here.
  double log_density(std::span<const double> physical) const;
  // Log density of the normalized (model-space) variable.
  double log_density_model(std::span<const double> model, const Normalizer& norm) const;
  bool in_band(std::span<const double> physical) const;
};

std::vector<std::vector<double>> synth_prior_data(RandomSource& rng, std::size_t n,
                                                  const SyntheticPriorMixture& mixture =
                                                      SyntheticPriorMixture::standard());

}  // namespace critgen
