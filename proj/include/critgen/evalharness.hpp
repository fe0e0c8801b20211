#pragma once

// Evaluation metrics: mode coverage on the toy landscape, generator collision
// rates on the intersection, risk vs log-likelihood correlation, and the
// method comparison table.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "critgen/envs.hpp"
#include "critgen/flow.hpp"
#include "critgen/training.hpp"

namespace critgen {

struct CoverageReport {
  std::vector<double> hit_fraction;  // per mode
  std::size_t covered = 0;
  std::size_t total = 0;
  double threshold = 0.05;
};

// Mode m is covered when at least `threshold` of the samples lie within
// radius_stds * std_m of its (condition-shifted) center.
CoverageReport mode_coverage(std::span<const std::vector<double>> samples,
                             const GmmLandscape& landscape, std::span<const double> y = {},
                             double threshold = 0.05, double radius_stds = 3.0);

struct RateSummary {
  std::vector<double> per_condition;
  double mean = 0.0;
  double std = 0.0;  // population std across conditions
};

RateSummary summarize_rates(std::vector<double> per_condition);

// Samples n scenarios per condition at the given temperature, clamps them to
// the model box, simulates under the IDM policy and counts collisions.
RateSummary collision_rate(const FlowModel& generator,
                           const std::vector<std::vector<double>>& conditions, std::size_t n,
                           double temperature, const IntersectionConfig& sim, std::uint64_t seed,
                           std::size_t workers = 1);

// Fraction of the given model-space scenarios that collide, per condition.
RateSummary sample_collision_rate(std::span<const WeightedSample> samples,
                                  const std::vector<std::vector<double>>& conditions,
                                  const IntersectionConfig& sim, std::size_t workers = 1);

struct Correlation {
  double pearson = 0.0;
  double slope = 0.0;  // least-squares log_prob = slope * risk + intercept
  double intercept = 0.0;
  std::size_t n = 0;
};

// Requires >= 30 points and a risk spread (max - min) of at least 0.2.
Correlation fit_correlation(std::span<const double> risk, std::span<const double> loglik);
Correlation risk_loglik_correlation(const FlowModel& generator,
                                    std::span<const WeightedSample> samples);

struct ComparisonRow {
  std::string method;
  std::uint64_t ledger = 0;
  double rate_mean = 0.0;
  double rate_std = 0.0;
  std::vector<double> per_condition;
};

// Rows ordered by ledger count (ties by method name).
std::vector<ComparisonRow> comparison_report(std::vector<ComparisonRow> rows);

// Header "method,queries,collision_rate_mean,collision_rate_std,<condition ids>".
std::string comparison_csv(const std::vector<ComparisonRow>& rows,
                           const std::vector<std::string>& condition_ids);

// Two-column series "<x_name>,<y_name>".
void write_series_csv(const std::string& path, const std::string& x_name,
                      const std::string& y_name, std::span<const double> xs,
                      std::span<const double> ys);

}  // namespace critgen
