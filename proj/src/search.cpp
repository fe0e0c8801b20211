#include "critgen/search.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>

#include "critgen/parallel.hpp"

namespace critgen {

// ---------------------------------------------------------------------------
// Ledger

QueryLedger& QueryLedger::operator=(const QueryLedger& other) {
  for (std::size_t i = 0; i < counts_.size(); ++i) {
    counts_[i].store(other.counts_[i].load(std::memory_order_relaxed), std::memory_order_relaxed);
  }
  return *this;
}

void QueryLedger::add(QueryPhase phase, std::uint64_t n) {
  counts_[static_cast<std::size_t>(phase)].fetch_add(n, std::memory_order_relaxed);
}

std::uint64_t QueryLedger::count(QueryPhase phase) const {
  return counts_[static_cast<std::size_t>(phase)].load(std::memory_order_relaxed);
}

std::uint64_t QueryLedger::count() const {
  return count(QueryPhase::exploration) + count(QueryPhase::nes) + count(QueryPhase::evaluation);
}

LedgerCounts QueryLedger::snapshot() const {
  return {count(QueryPhase::exploration), count(QueryPhase::nes), count(QueryPhase::evaluation)};
}

double query_risk(const RiskFn& risk_fn, std::span<const double> x, std::span<const double> y,
                  QueryLedger& ledger, QueryPhase phase) {
  ledger.add(phase);
  return risk_fn(x, y);
}

void clamp_to_box(std::span<double> x) {
  for (double& v : x) v = std::clamp(v, -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// NES pieces

void SamplerConfig::validate() const {
  if (!(alpha > 0.0)) throw ContractError("sampler: alpha must be > 0");
  if (!(nes_sigma > 0.0)) throw ContractError("sampler: nes_sigma must be > 0");
  if (nes_population < 2 || nes_population % 2 != 0) {
    throw ContractError("sampler: nes_population must be even and >= 2");
  }
  if (!(gamma >= 0.0)) throw ContractError("sampler: gamma must be >= 0");
  if (particles == 0) throw ContractError("sampler: particles must be positive");
  if (retrain_every == 0) throw ContractError("sampler: retrain_every must be positive");
  if (restart_patience == 0) throw ContractError("sampler: restart_patience must be positive");
  if (!(restart_quantile >= 0.0 && restart_quantile < 1.0)) {
    throw ContractError("sampler: restart_quantile must lie in [0, 1)");
  }
}

double exploration_value(std::span<const double> x, std::span<const double> y,
                         const RiskFn& risk_fn, const FlowModel* generator, double gamma,
                         QueryLedger& ledger) {
  const double r = query_risk(risk_fn, x, y, ledger, QueryPhase::exploration);
  if (generator == nullptr || gamma == 0.0) return r;
  return r - gamma * std::exp(log_prob(*generator, x, y));
}

std::vector<std::vector<double>> nes_perturbations(RandomSource& rng, std::size_t dim,
                                                   std::size_t population) {
  if (population < 2 || population % 2 != 0) {
    throw ContractError("nes: population must be even and >= 2");
  }
  std::vector<std::vector<double>> eps;
  eps.reserve(population);
  for (std::size_t i = 0; i < population / 2; ++i) {
    auto e = draw_standard_gaussian(rng, dim);
    auto neg = e;
    for (double& v : neg) v = -v;
    eps.push_back(std::move(e));
    eps.push_back(std::move(neg));
  }
  return eps;
}

std::vector<double> nes_combine(std::span<const std::vector<double>> eps,
                                std::span<const double> c_values, double sigma) {
  if (eps.empty() || eps.size() != c_values.size()) throw ContractError("nes: size mismatch");
  const std::size_t dim = eps.front().size();
  std::vector<double> g(dim, 0.0);
  // Pairwise accumulation makes the antithetic cancellation exact for constant c.
  for (std::size_t i = 0; i + 1 < eps.size(); i += 2) {
    for (std::size_t j = 0; j < dim; ++j) {
      g[j] += eps[i][j] * c_values[i] + eps[i + 1][j] * c_values[i + 1];
    }
  }
  const double scale = 1.0 / (static_cast<double>(eps.size()) * sigma);
  for (double& v : g) v *= scale;
  return g;
}

std::vector<double> nes_gradient(std::span<const double> x,
                                 const std::function<double(std::span<const double>)>& c_fn,
                                 double sigma, std::size_t population, RandomSource& rng) {
  if (!(sigma > 0.0)) throw ContractError("nes: sigma must be > 0");
  const auto eps = nes_perturbations(rng, x.size(), population);
  std::vector<double> c(eps.size());
  std::vector<double> point(x.size());
  for (std::size_t i = 0; i < eps.size(); ++i) {
    for (std::size_t j = 0; j < x.size(); ++j) point[j] = x[j] + sigma * eps[i][j];
    c[i] = c_fn(point);
  }
  return nes_combine(eps, c, sigma);
}

std::vector<double> adaptive_step(std::span<const double> x, std::span<const double> gradient,
                                  double alpha) {
  if (x.size() != gradient.size()) throw ContractError("adaptive_step: size mismatch");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + alpha * gradient[i];
  clamp_to_box(out);
  return out;
}

// ---------------------------------------------------------------------------
// Adaptive sampler

namespace {

std::vector<double> uniform_point(RandomSource& rng, std::size_t dim) {
  std::vector<double> x(dim);
  for (double& v : x) v = rng.uniform(-1.0, 1.0);
  return x;
}

double quantile_of(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const auto idx = static_cast<std::size_t>(q * static_cast<double>(v.size() - 1));
  return v[idx];
}

}  // namespace

AdaptiveRun run_adaptive_sampler(const RiskFn& risk_fn,
                                 const std::vector<std::vector<double>>& conditions,
                                 const SamplerConfig& config, const GeneratorTrainer& trainer) {
  config.validate();
  trainer.arch.validate();
  trainer.train.validate();
  const std::size_t d = trainer.arch.dim;
  const std::size_t k = trainer.arch.cond_dim;
  if (conditions.empty()) throw ContractError("sampler: no conditions");
  for (const auto& y : conditions) {
    if (y.size() != k) throw ContractError("sampler: condition length != generator cond_dim");
  }
  if (trainer.prior != nullptr && trainer.prior->dim() != d) {
    throw ContractError("sampler: prior dimension != generator dimension");
  }

  const RandomSource root(config.seed);
  RandomSource init_rng = root.split(1);
  RandomSource nes_rng = root.split(2);
  RandomSource restart_rng = root.split(3);

  const std::size_t P = config.particles;
  const std::size_t M = config.nes_population;
  std::size_t iterations = config.iterations;
  if (config.query_budget > 0) {
    iterations = std::min<std::size_t>(iterations,
                                       config.query_budget / config.queries_per_iteration());
  }

  AdaptiveRun run{FlowModel(trainer.arch)};
  ParticleSet& ps = run.particles;
  for (std::size_t p = 0; p < P; ++p) {
    ps.positions.push_back(uniform_point(init_rng, d));
    ps.condition_index.push_back(p % conditions.size());
  }
  ps.c_estimate.assign(P, 0.0);
  ps.low_streak.assign(P, 0);

  QueryLedger ledger;
  std::optional<FlowModel> generator;
  double best_risk = -std::numeric_limits<double>::infinity();

  auto retrain = [&](bool final) {
    TrainConfig tc = trainer.train;
    if (final && trainer.final_epochs > 0) tc.epochs = trainer.final_epochs;
    tc.seed = mix64(trainer.train.seed + 0x5eed + run.retrains);
    tc.batch_size = std::min(tc.batch_size, run.samples.size());
    try {
      auto result = train_generator(run.samples, trainer.arch, tc,
                                    generator ? &*generator : nullptr);
      generator.emplace(std::move(result.model));
    } catch (const TrainingError& e) {
      throw SamplerError(e, ps, ledger.snapshot());
    }
    ++run.retrains;
  };

  const std::size_t batch = P * M;
  Matrix points(batch, d);
  Matrix conds(batch, k);
  std::vector<double> risk(batch);
  std::vector<double> c(batch);
  std::vector<std::vector<std::vector<double>>> eps(P);

  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t p = 0; p < P; ++p) {
      eps[p] = nes_perturbations(nes_rng, d, M);
      const auto& y = conditions[ps.condition_index[p]];
      for (std::size_t i = 0; i < M; ++i) {
        const std::size_t row = p * M + i;
        for (std::size_t j = 0; j < d; ++j) {
          points(row, j) = std::clamp(ps.positions[p][j] + config.nes_sigma * eps[p][i][j], -1.0, 1.0);
        }
        for (std::size_t j = 0; j < k; ++j) conds(row, j) = y[j];
      }
    }

    parallel_for(batch, config.workers, [&](std::size_t row) {
      const std::span<const double> x(points.row(row).data(), d);
      const std::span<const double> y(conditions[ps.condition_index[row / M]]);
      risk[row] = query_risk(risk_fn, x, y, ledger, QueryPhase::nes);
    });

    c = risk;
    if (generator && config.gamma > 0.0) {
      const auto lp = log_prob_batch(*generator, points, conds);
      for (std::size_t row = 0; row < batch; ++row) c[row] -= config.gamma * std::exp(lp[row]);
    }

    const std::size_t first_new = run.samples.size();
    for (std::size_t row = 0; row < batch; ++row) {
      WeightedSample s;
      s.x.assign(points.row(row).data(), points.row(row).data() + d);
      s.y = conditions[ps.condition_index[row / M]];
      s.risk = risk[row];
      run.samples.push_back(std::move(s));
      best_risk = std::max(best_risk, risk[row]);
    }
    assign_weights(std::span(run.samples).subspan(first_new), trainer.prior, trainer.train.beta,
                   trainer.train.weight_floor);

    double mean_c = 0.0;
    for (std::size_t p = 0; p < P; ++p) {
      const std::span<const double> cp(c.data() + p * M, M);
      const auto grad = nes_combine(eps[p], cp, config.nes_sigma);
      double sum = 0.0;
      for (double v : cp) sum += v;
      ps.c_estimate[p] = sum / static_cast<double>(M);
      mean_c += ps.c_estimate[p];
      ps.positions[p] = adaptive_step(ps.positions[p], grad, config.alpha);
    }
    mean_c /= static_cast<double>(P);

    // Negative c means the generator already explains the region better than
    // its risk warrants; such particles count as low as well.
    const double threshold = quantile_of(ps.c_estimate, config.restart_quantile);
    for (std::size_t p = 0; p < P; ++p) {
      const bool low = ps.c_estimate[p] < threshold || ps.c_estimate[p] < 0.0;
      ps.low_streak[p] = low ? ps.low_streak[p] + 1 : 0;
      if (ps.low_streak[p] >= config.restart_patience) {
        ps.positions[p] = uniform_point(restart_rng, d);
        ps.low_streak[p] = 0;
        ++ps.restarts;
      }
    }
    ps.iteration = it + 1;

    run.report.push_back({it, best_risk, mean_c, ledger.count()});

    if (config.gamma > 0.0 && (it + 1) % config.retrain_every == 0 && it + 1 < iterations) {
      retrain(false);
    }
  }

  if (!run.samples.empty()) {
    retrain(true);
    run.generator = std::move(*generator);
  }
  run.ledger = ledger.snapshot();
  return run;
}

// ---------------------------------------------------------------------------
// Baselines

SearchRun uniform_sampler(const RiskFn& risk_fn, std::size_t n, std::size_t dim,
                          std::span<const double> y, RandomSource& rng) {
  SearchRun run;
  QueryLedger ledger;
  double best = -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    WeightedSample s;
    s.x = uniform_point(rng, dim);
    s.y.assign(y.begin(), y.end());
    s.risk = query_risk(risk_fn, s.x, y, ledger, QueryPhase::exploration);
    s.weight = s.risk;
    best = std::max(best, s.risk);
    sum += s.risk;
    run.samples.push_back(std::move(s));
  }
  if (n > 0) run.report.push_back({0, best, sum / static_cast<double>(n), ledger.count()});
  run.ledger = ledger.snapshot();
  return run;
}

SearchRun grid_search(const RiskFn& risk_fn, std::size_t steps_per_dim, std::size_t dim,
                      std::span<const double> y, std::uint64_t cap) {
  if (steps_per_dim < 2) throw ContractError("grid: steps_per_dim must be >= 2");
  if (dim == 0) throw ContractError("grid: dim must be positive");
  std::uint64_t total = 1;
  for (std::size_t i = 0; i < dim; ++i) {
    if (total > cap / steps_per_dim + 1) {
      total = cap + 1;
      break;
    }
    total *= steps_per_dim;
  }
  if (total > cap) {
    throw BudgetError("grid: " + std::to_string(steps_per_dim) + "^" + std::to_string(dim) +
                      " points exceed the query cap of " + std::to_string(cap));
  }
  SearchRun run;
  QueryLedger ledger;
  std::vector<std::size_t> idx(dim, 0);
  const double step = 2.0 / static_cast<double>(steps_per_dim - 1);
  double best = -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  for (std::uint64_t n = 0; n < total; ++n) {
    WeightedSample s;
    s.x.resize(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      s.x[j] = idx[j] + 1 == steps_per_dim ? 1.0 : -1.0 + step * static_cast<double>(idx[j]);
    }
    s.y.assign(y.begin(), y.end());
    s.risk = query_risk(risk_fn, s.x, y, ledger, QueryPhase::exploration);
    s.weight = s.risk;
    best = std::max(best, s.risk);
    sum += s.risk;
    run.samples.push_back(std::move(s));
    for (std::size_t j = dim; j-- > 0;) {  // last axis fastest
      if (++idx[j] < steps_per_dim) break;
      idx[j] = 0;
    }
  }
  run.report.push_back({0, best, sum / static_cast<double>(total), ledger.count()});
  run.ledger = ledger.snapshot();
  return run;
}

void HmcConfig::validate() const {
  if (!(step_size > 0.0)) throw ContractError("hmc: step_size must be > 0");
  if (leapfrog_steps == 0) throw ContractError("hmc: leapfrog_steps must be >= 1");
  if (!(temperature > 0.0)) throw ContractError("hmc: temperature must be > 0");
  if (!(fd_step > 0.0)) throw ContractError("hmc: fd_step must be > 0");
  if (warning_window == 0) throw ContractError("hmc: warning_window must be positive");
}

namespace {

bool in_box(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [](double v) { return v >= -1.0 && v <= 1.0; });
}

}  // namespace

SearchRun hmc_sampler(const RiskFn& risk_fn, std::size_t n, std::size_t dim,
                      std::span<const double> y, const HmcConfig& config) {
  config.validate();
  if (!config.init.empty() && (config.init.size() != dim || !in_box(config.init))) {
    throw ContractError("hmc: init must be a point of the box with the search dimension");
  }
  RandomSource rng(config.seed);
  RandomSource init_rng = rng.split(1);
  QueryLedger ledger;
  SearchRun run;
  const double tau = config.temperature;
  const double eps = config.step_size;

  auto risk_at = [&](std::span<const double> x) {
    return query_risk(risk_fn, x, y, ledger, QueryPhase::exploration);
  };
  // Central differences, one-sided where the box edge cuts the stencil.
  auto risk_grad = [&](std::span<const double> x) {
    std::vector<double> g(dim);
    std::vector<double> xp(x.begin(), x.end());
    for (std::size_t i = 0; i < dim; ++i) {
      const double hi = std::min(1.0, x[i] + config.fd_step);
      const double lo = std::max(-1.0, x[i] - config.fd_step);
      xp[i] = hi;
      const double rp = risk_at(xp);
      xp[i] = lo;
      const double rm = risk_at(xp);
      xp[i] = x[i];
      g[i] = (rp - rm) / (hi - lo);
    }
    return g;
  };

  std::vector<double> x = config.init.empty() ? uniform_point(init_rng, dim) : config.init;
  double r = risk_at(x);
  std::vector<double> g = risk_grad(x);
  double best = r;
  std::size_t window_accepts = 0;
  std::size_t window_start = 0;

  for (std::size_t it = 0; it < n; ++it) {
    std::vector<double> p = draw_standard_gaussian(rng, dim);
    std::vector<double> xn = x;
    std::vector<double> pn = p;
    std::vector<double> gn = g;
    bool left_box = false;
    for (std::size_t j = 0; j < dim; ++j) pn[j] += 0.5 * eps * gn[j] / tau;
    for (std::size_t l = 1; l <= config.leapfrog_steps; ++l) {
      for (std::size_t j = 0; j < dim; ++j) xn[j] += eps * pn[j];
      if (!in_box(xn)) {
        left_box = true;
        break;
      }
      gn = risk_grad(xn);
      const double w = l == config.leapfrog_steps ? 0.5 * eps : eps;
      for (std::size_t j = 0; j < dim; ++j) pn[j] += w * gn[j] / tau;
    }
    const double u = rng.uniform();
    bool accepted = false;
    if (!left_box) {
      const double rn = risk_at(xn);
      double k0 = 0.0;
      double k1 = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        k0 += 0.5 * p[j] * p[j];
        k1 += 0.5 * pn[j] * pn[j];
      }
      const double log_accept = (-r / tau + k0) - (-rn / tau + k1);
      if (std::log(u) < log_accept) {
        x = std::move(xn);
        r = rn;
        g = std::move(gn);
        accepted = true;
      }
    }
    if (accepted) ++window_accepts;
    best = std::max(best, r);

    WeightedSample s;
    s.x = x;
    s.y.assign(y.begin(), y.end());
    s.risk = r;
    s.weight = std::max(r, 0.0);
    run.samples.push_back(std::move(s));
    run.report.push_back({it, best, r, ledger.count()});

    if (it + 1 - window_start == config.warning_window) {
      const double rate = static_cast<double>(window_accepts) / static_cast<double>(config.warning_window);
      if (rate < 0.01) {
        std::ostringstream msg;
        msg << "hmc: acceptance rate " << rate * 100.0 << "% over iterations " << window_start
            << "-" << it << " (step_size " << eps << ")";
        run.warnings.push_back(msg.str());
      }
      window_start = it + 1;
      window_accepts = 0;
    }
  }
  run.ledger = ledger.snapshot();
  return run;
}

void ReinforceConfig::validate() const {
  if (population < 2) throw ContractError("reinforce: population must be >= 2");
  if (!(learning_rate > 0.0)) throw ContractError("reinforce: learning_rate must be > 0");
  if (!(init_std > 0.0)) throw ContractError("reinforce: init_std must be > 0");
  if (!(min_std > 0.0)) throw ContractError("reinforce: min_std must be > 0");
}

ReinforceRun reinforce_search(const RiskFn& risk_fn, std::size_t iterations, std::size_t dim,
                              std::span<const double> y, const ReinforceConfig& config) {
  config.validate();
  if (!config.init_mean.empty() && config.init_mean.size() != dim) {
    throw ContractError("reinforce: init_mean dimension mismatch");
  }
  RandomSource rng(config.seed);
  QueryLedger ledger;
  ReinforceRun run;

  // params = [mean, log std]
  std::vector<double> params(2 * dim, std::log(config.init_std));
  for (std::size_t j = 0; j < dim; ++j) params[j] = config.init_mean.empty() ? 0.0 : config.init_mean[j];
  AdamState adam(params.size(), AdamConfig{config.learning_rate});

  const std::size_t N = config.population;
  std::vector<std::vector<double>> eps(N);
  std::vector<double> r(N);
  std::vector<double> grad(2 * dim);
  double best = -std::numeric_limits<double>::infinity();

  for (std::size_t it = 0; it < iterations; ++it) {
    double mean_r = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      eps[i] = draw_standard_gaussian(rng, dim);
      WeightedSample s;
      s.x.resize(dim);
      for (std::size_t j = 0; j < dim; ++j) s.x[j] = params[j] + std::exp(params[dim + j]) * eps[i][j];
      clamp_to_box(s.x);
      s.y.assign(y.begin(), y.end());
      s.risk = query_risk(risk_fn, s.x, y, ledger, QueryPhase::exploration);
      s.weight = std::max(s.risk, 0.0);
      r[i] = s.risk;
      mean_r += s.risk;
      best = std::max(best, s.risk);
      run.samples.push_back(std::move(s));
    }
    mean_r /= static_cast<double>(N);

    // Negated: Adam minimizes, the policy ascends expected risk.
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < N; ++i) {
      const double adv = r[i] - mean_r;
      for (std::size_t j = 0; j < dim; ++j) {
        const double sd = std::exp(params[dim + j]);
        grad[j] -= adv * eps[i][j] / sd;
        grad[dim + j] -= adv * (eps[i][j] * eps[i][j] - 1.0);
      }
    }
    for (double& v : grad) v /= static_cast<double>(N);
    adam.step(params, grad);
    for (std::size_t j = 0; j < dim; ++j) params[j] = std::clamp(params[j], -1.0, 1.0);

    run.report.push_back({it, best, mean_r, ledger.count()});

    double max_std = 0.0;
    for (std::size_t j = 0; j < dim; ++j) max_std = std::max(max_std, std::exp(params[dim + j]));
    if (max_std < config.min_std) {
      run.converged = true;
      break;
    }
  }
  run.mean.assign(params.begin(), params.begin() + static_cast<std::ptrdiff_t>(dim));
  for (std::size_t j = 0; j < dim; ++j) run.stddev.push_back(std::exp(params[dim + j]));
  run.ledger = ledger.snapshot();
  return run;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

std::string exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_run_report_csv(const std::vector<IterationRecord>& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "iteration,best_risk,mean_c,ledger\n";
  for (const auto& r : report) {
    out << r.iteration << ',' << exact(r.best_risk) << ',' << exact(r.mean_c) << ',' << r.ledger
        << '\n';
  }
}

void write_replay_csv(const std::vector<WeightedSample>& samples, std::size_t dim,
                      std::size_t cond_dim, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (std::size_t j = 0; j < dim; ++j) out << 'x' << j << ',';
  for (std::size_t j = 0; j < cond_dim; ++j) out << 'y' << j << ',';
  out << "risk,weight\n";
  for (const auto& s : samples) {
    if (s.x.size() != dim || s.y.size() != cond_dim) {
      throw ContractError("replay: sample dimensions differ from the header");
    }
    for (double v : s.x) out << exact(v) << ',';
    for (double v : s.y) out << exact(v) << ',';
    out << exact(s.risk) << ',' << exact(s.weight) << '\n';
  }
}

std::vector<WeightedSample> read_replay_csv(const std::string& path, std::size_t dim,
                                            std::size_t cond_dim) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  std::getline(in, line);
  std::vector<WeightedSample> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> v;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    if (v.size() != dim + cond_dim + 2) {
      throw ContractError("replay: row has " + std::to_string(v.size()) + " columns, expected " +
                          std::to_string(dim + cond_dim + 2));
    }
    WeightedSample s;
    s.x.assign(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(dim));
    s.y.assign(v.begin() + static_cast<std::ptrdiff_t>(dim),
               v.begin() + static_cast<std::ptrdiff_t>(dim + cond_dim));
    s.risk = v[dim + cond_dim];
    s.weight = v[dim + cond_dim + 1];
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace critgen
