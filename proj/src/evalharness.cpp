#include "critgen/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "critgen/errors.hpp"
#include "critgen/parallel.hpp"
#include "critgen/search.hpp"

namespace critgen {

CoverageReport mode_coverage(std::span<const std::vector<double>> samples,
                             const GmmLandscape& landscape, std::span<const double> y,
                             double threshold, double radius_stds) {
  if (samples.empty()) throw ContractError("mode_coverage: no samples");
  const auto centers = landscape.centers_for(y);
  CoverageReport report;
  report.total = centers.size();
  report.threshold = threshold;
  for (std::size_t m = 0; m < centers.size(); ++m) {
    const double radius = radius_stds * landscape.modes[m].std;
    std::size_t hits = 0;
    for (const auto& x : samples) {
      if (x.size() != centers[m].size()) throw ContractError("mode_coverage: dimension mismatch");
      double sq = 0.0;
      for (std::size_t j = 0; j < x.size(); ++j) sq += (x[j] - centers[m][j]) * (x[j] - centers[m][j]);
      if (std::sqrt(sq) <= radius) ++hits;
    }
    const double frac = static_cast<double>(hits) / static_cast<double>(samples.size());
    report.hit_fraction.push_back(frac);
    if (frac >= threshold) ++report.covered;
  }
  return report;
}

RateSummary summarize_rates(std::vector<double> per_condition) {
  RateSummary s;
  s.per_condition = std::move(per_condition);
  if (s.per_condition.empty()) return s;
  const double n = static_cast<double>(s.per_condition.size());
  for (double r : s.per_condition) s.mean += r;
  s.mean /= n;
  for (double r : s.per_condition) s.std += (r - s.mean) * (r - s.mean);
  s.std = std::sqrt(s.std / n);
  return s;
}

namespace {

double collided_fraction(const std::vector<std::vector<double>>& xs, std::size_t route,
                         const IntersectionConfig& sim, std::size_t workers) {
  const auto norm = sim.normalizer();
  const auto policy = idm_yielding_policy(sim);
  std::vector<char> hit(xs.size(), 0);
  parallel_for(xs.size(), workers, [&](std::size_t i) {
    auto x = xs[i];
    clamp_to_box(x);
    const auto phys = norm.to_physical(x);
    hit[i] = simulate_intersection(sim, CyclistState::from_vector(phys), route, policy).collided;
  });
  std::size_t count = 0;
  for (char h : hit) count += h != 0;
  return static_cast<double>(count) / static_cast<double>(xs.size());
}

}  // namespace

RateSummary collision_rate(const FlowModel& generator,
                           const std::vector<std::vector<double>>& conditions, std::size_t n,
                           double temperature, const IntersectionConfig& sim, std::uint64_t seed,
                           std::size_t workers) {
  if (n == 0) throw ContractError("collision_rate: refusing an empty evaluation (n = 0)");
  if (conditions.empty()) throw ContractError("collision_rate: no conditions");
  if (generator.dim() != 4) {
    throw ContractError("collision_rate: generator dim " + std::to_string(generator.dim()) +
                        " != scenario dim 4");
  }
  std::vector<double> rates;
  for (std::size_t c = 0; c < conditions.size(); ++c) {
    const std::size_t route = sim.route_index_for(conditions[c]);
    RandomSource rng = RandomSource(seed).split(c);
    const auto xs = sample(generator, n, temperature, conditions[c], rng);
    rates.push_back(collided_fraction(xs, route, sim, workers));
  }
  return summarize_rates(std::move(rates));
}

RateSummary sample_collision_rate(std::span<const WeightedSample> samples,
                                  const std::vector<std::vector<double>>& conditions,
                                  const IntersectionConfig& sim, std::size_t workers) {
  std::vector<double> rates;
  for (const auto& y : conditions) {
    std::vector<std::vector<double>> xs;
    for (const auto& s : samples) {
      if (s.y == y) xs.push_back(s.x);
    }
    if (xs.empty()) throw ContractError("sample_collision_rate: condition without samples");
    rates.push_back(collided_fraction(xs, sim.route_index_for(y), sim, workers));
  }
  return summarize_rates(std::move(rates));
}

Correlation fit_correlation(std::span<const double> risk, std::span<const double> loglik) {
  if (risk.size() != loglik.size()) throw ContractError("correlation: length mismatch");
  if (risk.size() < 30) throw ContractError("correlation: need at least 30 samples");
  const auto [lo, hi] = std::minmax_element(risk.begin(), risk.end());
  if (*hi - *lo < 0.2) {
    throw ContractError("correlation: degenerate risk spread " + std::to_string(*hi - *lo) +
                        " (need >= 0.2)");
  }
  const double n = static_cast<double>(risk.size());
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < risk.size(); ++i) {
    mx += risk[i];
    my += loglik[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0;
  double syy = 0.0;
  double sxy = 0.0;
  for (std::size_t i = 0; i < risk.size(); ++i) {
    const double dx = risk[i] - mx;
    const double dy = loglik[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  Correlation c;
  c.n = risk.size();
  c.slope = sxy / sxx;
  c.intercept = my - c.slope * mx;
  c.pearson = syy > 0.0 ? sxy / std::sqrt(sxx * syy) : 0.0;
  return c;
}

Correlation risk_loglik_correlation(const FlowModel& generator,
                                    std::span<const WeightedSample> samples) {
  if (samples.empty()) throw ContractError("correlation: need at least 30 samples");
  Matrix x(samples.size(), generator.dim());
  Matrix y(samples.size(), generator.cond_dim());
  std::vector<double> risk;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    generator.check_dims(samples[i].x.size(), samples[i].y.size());
    for (std::size_t j = 0; j < generator.dim(); ++j) x(i, j) = samples[i].x[j];
    for (std::size_t j = 0; j < generator.cond_dim(); ++j) y(i, j) = samples[i].y[j];
    risk.push_back(samples[i].risk);
  }
  const auto lp = log_prob_batch(generator, x, y);
  return fit_correlation(risk, lp);
}

std::vector<ComparisonRow> comparison_report(std::vector<ComparisonRow> rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const ComparisonRow& a, const ComparisonRow& b) {
    return a.ledger != b.ledger ? a.ledger < b.ledger : a.method < b.method;
  });
  return rows;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string comparison_csv(const std::vector<ComparisonRow>& rows,
                           const std::vector<std::string>& condition_ids) {
  std::ostringstream out;
  out << "method,queries,collision_rate_mean,collision_rate_std";
  for (const auto& id : condition_ids) out << ",rate_" << id;
  out << '\n';
  for (const auto& r : rows) {
    out << r.method << ',' << r.ledger << ',' << fmt(r.rate_mean) << ',' << fmt(r.rate_std);
    for (std::size_t i = 0; i < condition_ids.size(); ++i) {
      out << ',' << (i < r.per_condition.size() ? fmt(r.per_condition[i]) : "");
    }
    out << '\n';
  }
  return out.str();
}

void write_series_csv(const std::string& path, const std::string& x_name,
                      const std::string& y_name, std::span<const double> xs,
                      std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ContractError("series: length mismatch");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << x_name << ',' << y_name << '\n';
  char buf[64];
  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g\n", xs[i], ys[i]);
    out << buf;
  }
}

}  // namespace critgen
