#pragma once

// Black-box searchers that collect training samples: the NES-driven adaptive
// sampler with generator feedback, and the uniform / grid / HMC /
// single-Gaussian REINFORCE baselines. Every searcher counts its risk queries.

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "critgen/errors.hpp"
#include "critgen/flow.hpp"
#include "critgen/numerics.hpp"
#include "critgen/training.hpp"

namespace critgen {

// Pure risk function r(x | y) over model-space x; may be called concurrently.
using RiskFn = std::function<double(std::span<const double> x, std::span<const double> y)>;

enum class QueryPhase { exploration = 0, nes = 1, evaluation = 2 };

struct LedgerCounts {
  std::uint64_t exploration = 0;
  std::uint64_t nes = 0;
  std::uint64_t evaluation = 0;

  std::uint64_t total() const { return exploration + nes + evaluation; }
  bool operator==(const LedgerCounts&) const = default;
};

// Exact count of risk-function invocations; safe for concurrent increments.
class QueryLedger {
 public:
  QueryLedger() = default;
  QueryLedger(const QueryLedger& other) { *this = other; }
  QueryLedger& operator=(const QueryLedger& other);

  void add(QueryPhase phase, std::uint64_t n = 1);
  std::uint64_t count() const;
  std::uint64_t count(QueryPhase phase) const;
  LedgerCounts snapshot() const;

 private:
  std::array<std::atomic<std::uint64_t>, 3> counts_{};
};

// Calls risk_fn once and records the query.
double query_risk(const RiskFn& risk_fn, std::span<const double> x, std::span<const double> y,
                  QueryLedger& ledger, QueryPhase phase);

void clamp_to_box(std::span<double> x);

struct IterationRecord {
  std::size_t iteration = 0;
  double best_risk = 0.0;
  double mean_c = 0.0;
  std::uint64_t ledger = 0;
};

struct SearchRun {
  std::vector<WeightedSample> samples;  // in query order
  LedgerCounts ledger;
  std::vector<IterationRecord> report;
  std::vector<std::string> warnings;
};

// ---------------------------------------------------------------------------
// Adaptive sampler

struct SamplerConfig {
  double alpha = 0.05;
  double nes_sigma = 0.05;
  std::size_t nes_population = 6;  // M, even (antithetic pairs)
  double gamma = 0.05;
  std::size_t particles = 32;
  std::size_t iterations = 30;
  std::size_t retrain_every = 5;
  std::uint64_t seed = 0;
  // 0 means unlimited; otherwise iterations stop before the budget would be exceeded.
  std::uint64_t query_budget = 0;
  std::size_t restart_patience = 5;
  double restart_quantile = 0.1;
  std::size_t workers = 1;  // does not affect results

  void validate() const;
  std::uint64_t queries_per_iteration() const { return particles * nes_population; }
};

struct ParticleSet {
  std::vector<std::vector<double>> positions;
  std::vector<std::size_t> condition_index;
  std::vector<double> c_estimate;
  std::vector<std::size_t> low_streak;
  std::size_t iteration = 0;
  std::size_t restarts = 0;
};

// How the sampler retrains its generator. Weights use train.beta against the
// optional prior (model-space density).
struct GeneratorTrainer {
  FlowArchitecture arch;
  TrainConfig train;
  const FlowModel* prior = nullptr;
  // Epochs of the closing retrain on the complete replay; 0 means train.epochs.
  std::size_t final_epochs = 0;
};

struct AdaptiveRun : SearchRun {
  explicit AdaptiveRun(FlowModel g) : generator(std::move(g)) {}
  FlowModel generator;
  ParticleSet particles;
  std::size_t retrains = 0;
};

// Raised when generator retraining diverges mid-run; carries the sampler state.
class SamplerError : public TrainingError {
 public:
  SamplerError(const TrainingError& cause, ParticleSet state, LedgerCounts ledger)
      : TrainingError(std::string("adaptive sampler: ") + cause.what(), cause.epoch()),
        state_(std::move(state)),
        ledger_(ledger) {}
  const ParticleSet& state() const noexcept { return state_; }
  const LedgerCounts& ledger() const noexcept { return ledger_; }

 private:
  ParticleSet state_;
  LedgerCounts ledger_;
};

// c(x|y) = r(x|y) - gamma * p(x|y); no generator means no density term.
double exploration_value(std::span<const double> x, std::span<const double> y,
                         const RiskFn& risk_fn, const FlowModel* generator, double gamma,
                         QueryLedger& ledger);

// M/2 antithetic pairs (eps, -eps), eps ~ N(0, I).
std::vector<std::vector<double>> nes_perturbations(RandomSource& rng, std::size_t dim,
                                                   std::size_t population);
// (1 / (M sigma)) sum_i eps_i c_i
std::vector<double> nes_combine(std::span<const std::vector<double>> eps,
                                std::span<const double> c_values, double sigma);

std::vector<double> nes_gradient(std::span<const double> x,
                                 const std::function<double(std::span<const double>)>& c_fn,
                                 double sigma, std::size_t population, RandomSource& rng);

// x + alpha * gradient, clamped to [-1, 1]^d.
std::vector<double> adaptive_step(std::span<const double> x, std::span<const double> gradient,
                                  double alpha);

// Particles ascend c by NES; the generator is retrained on the full replay
// every retrain_every iterations (skipped when gamma == 0, since c ignores it)
// and once more at the end. Particle i works on condition i mod |conditions|.
AdaptiveRun run_adaptive_sampler(const RiskFn& risk_fn,
                                 const std::vector<std::vector<double>>& conditions,
                                 const SamplerConfig& config, const GeneratorTrainer& trainer);

// ---------------------------------------------------------------------------
// Baselines (each searches one condition y)

SearchRun uniform_sampler(const RiskFn& risk_fn, std::size_t n, std::size_t dim,
                          std::span<const double> y, RandomSource& rng);

// Full lattice with steps_per_dim points per axis on [-1, 1]^dim.
// Throws BudgetError when steps_per_dim^dim exceeds cap.
SearchRun grid_search(const RiskFn& risk_fn, std::size_t steps_per_dim, std::size_t dim,
                      std::span<const double> y, std::uint64_t cap = 1'000'000);

struct HmcConfig {
  double step_size = 0.03;
  std::size_t leapfrog_steps = 10;
  double temperature = 0.1;  // target density proportional to exp(r / temperature)
  double fd_step = 1e-3;
  std::uint64_t seed = 0;
  std::vector<double> init;  // empty: uniform over the box
  std::size_t warning_window = 100;

  void validate() const;
};

// One chain; sample i is the chain state after transition i. Proposals that
// leave the box are rejected.
SearchRun hmc_sampler(const RiskFn& risk_fn, std::size_t n, std::size_t dim,
                      std::span<const double> y, const HmcConfig& config);

struct ReinforceConfig {
  std::size_t population = 20;
  double learning_rate = 0.05;
  double init_std = 0.5;
  std::vector<double> init_mean;  // empty: origin
  double min_std = 1e-4;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ReinforceRun : SearchRun {
  std::vector<double> mean;
  std::vector<double> stddev;
  bool converged = false;
};

// Diagonal Gaussian policy; score-function gradient of expected risk with a
// mean-reward baseline, Adam on (mean, log std).
ReinforceRun reinforce_search(const RiskFn& risk_fn, std::size_t iterations, std::size_t dim,
                              std::span<const double> y, const ReinforceConfig& config);

// ---------------------------------------------------------------------------
// Reports

// Header "iteration,best_risk,mean_c,ledger".
void write_run_report_csv(const std::vector<IterationRecord>& report, const std::string& path);
// Header "x0..,y0..,risk,weight"; values round-trip exactly.
void write_replay_csv(const std::vector<WeightedSample>& samples, std::size_t dim,
                      std::size_t cond_dim, const std::string& path);
std::vector<WeightedSample> read_replay_csv(const std::string& path, std::size_t dim,
                                            std::size_t cond_dim);

}  // namespace critgen
