#include "critgen/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "critgen/errors.hpp"

namespace critgen {

void TrainConfig::validate() const {
  if (!(beta >= 0.0)) throw ContractError("train: beta must be >= 0");
  if (batch_size == 0) throw ContractError("train: batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ContractError("train: learning_rate must be positive");
  if (!(weight_floor >= 0.0)) throw ContractError("train: weight_floor must be >= 0");
}

double compute_weight(std::span<const double> x, double risk, const FlowModel* prior, double beta,
                      double weight_floor) {
  if (!(risk >= 0.0 && risk <= 1.0)) throw ContractError("compute_weight: risk outside [0, 1]");
  double w = risk;
  if (prior != nullptr && beta != 0.0) w += beta * std::exp(log_prob(*prior, x, {}));
  return std::max(w, weight_floor);
}

void assign_weights(std::span<WeightedSample> samples, const FlowModel* prior, double beta,
                    double weight_floor) {
  std::vector<double> lp;
  if (prior != nullptr && !samples.empty()) {
    Matrix x(samples.size(), prior->dim());
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].x.size() != prior->dim()) throw ContractError("assign_weights: x dimension mismatch");
      for (std::size_t j = 0; j < prior->dim(); ++j) x(i, j) = samples[i].x[j];
    }
    lp = log_prob_batch(*prior, x, Matrix(samples.size(), 0));
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& s = samples[i];
    if (!(s.risk >= 0.0 && s.risk <= 1.0)) throw ContractError("assign_weights: risk outside [0, 1]");
    s.prior_density = prior != nullptr ? std::exp(lp[i]) : 0.0;
    s.weight = std::max(s.risk + beta * s.prior_density, weight_floor);
  }
}

namespace {

// Shared epoch loop; `batch_loss` evaluates one minibatch given its indices.
template <typename BatchFn>
std::vector<EpochRecord> run_epochs(FlowModel& model, std::size_t n, const TrainConfig& config,
                                    BatchFn&& batch_loss) {
  AdamState adam(model.params().size(), AdamConfig{config.learning_rate});
  RandomSource rng = RandomSource(config.seed).split(0x7a11);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::size_t> batch;
  std::vector<EpochRecord> history;
  const auto t0 = std::chrono::steady_clock::now();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    double loss_sum = 0.0;
    double mass_sum = 0.0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      batch.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                   order.begin() + static_cast<std::ptrdiff_t>(stop));
      auto [loss, mass, grad] = batch_loss(model, batch);
      if (!std::isfinite(loss)) {
        throw TrainingError("training diverged: non-finite loss in epoch " + std::to_string(epoch),
                            static_cast<long>(epoch));
      }
      try {
        adam.step(model.params().values(), grad);
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + " in epoch " + std::to_string(epoch),
                            static_cast<long>(epoch));
      }
      loss_sum += loss * mass;
      mass_sum += mass;
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.push_back({epoch, mass_sum > 0.0 ? loss_sum / mass_sum : 0.0, secs});
  }
  return history;
}

struct BatchEval {
  double loss;
  double mass;
  std::vector<double> grad;
};

}  // namespace

namespace {

// Weighted batch objective over rows picked by idx:
//   loss = -(sum_i w_i log p_i) / sum_i w_i.
// Rows with zero weight are dropped before the flow is evaluated.
struct BatchAssembler {
  Matrix x;
  Matrix y;
  std::vector<double> coeff;
  std::vector<double> log_probs;
  FlowBatchWorkspace ws;

  template <typename XAt, typename YAt, typename WAt>
  BatchEval eval(const FlowModel& model, const std::vector<std::size_t>& idx, XAt&& x_at,
                 YAt&& y_at, WAt&& w_at) {
    BatchEval ev{0.0, 0.0, std::vector<double>(model.params().size(), 0.0)};
    std::size_t rows = 0;
    for (auto i : idx) {
      const double w = w_at(i);
      if (!(w >= 0.0)) throw ContractError("wmle: negative or NaN weight");
      ev.mass += w;
      if (w > 0.0) ++rows;
    }
    if (!(ev.mass > 0.0)) return ev;
    const auto d = static_cast<Eigen::Index>(model.dim());
    const auto k = static_cast<Eigen::Index>(model.cond_dim());
    x.resize(static_cast<Eigen::Index>(rows), d);
    y.resize(static_cast<Eigen::Index>(rows), k);
    coeff.clear();
    Eigen::Index r = 0;
    for (auto i : idx) {
      const double w = w_at(i);
      if (w == 0.0) continue;
      const auto& xi = x_at(i);
      const auto& yi = y_at(i);
      for (Eigen::Index c = 0; c < d; ++c) x(r, c) = xi[static_cast<std::size_t>(c)];
      for (Eigen::Index c = 0; c < k; ++c) y(r, c) = yi[static_cast<std::size_t>(c)];
      coeff.push_back(-w / ev.mass);
      ++r;
    }
    log_prob_batch_with_grad(model, x, y, coeff, ev.grad, log_probs, ws);
    double acc = 0.0;
    r = 0;
    for (auto i : idx) {
      const double w = w_at(i);
      if (w == 0.0) continue;
      acc += w * log_probs[static_cast<std::size_t>(r++)];
    }
    ev.loss = -acc / ev.mass;
    return ev;
  }
};

}  // namespace

LossAndGrad wmle_loss(const FlowModel& model, std::span<const WeightedSample> batch) {
  if (batch.empty()) throw ContractError("wmle_loss: empty batch");
  for (const auto& s : batch) model.check_dims(s.x.size(), s.y.size());
  std::vector<std::size_t> idx(batch.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  BatchAssembler asm_;
  auto ev = asm_.eval(
      model, idx, [&](std::size_t i) -> const std::vector<double>& { return batch[i].x; },
      [&](std::size_t i) -> const std::vector<double>& { return batch[i].y; },
      [&](std::size_t i) { return batch[i].weight; });
  if (!(ev.mass > 0.0)) throw ContractError("wmle_loss: all weights are zero");
  if (!std::isfinite(ev.loss)) throw TrainingError("wmle_loss: non-finite loss");
  return {ev.loss, std::move(ev.grad)};
}

TrainResult train_prior(std::span<const std::vector<double>> data, const FlowArchitecture& arch,
                        const TrainConfig& config) {
  config.validate();
  if (arch.cond_dim != 0) throw ContractError("train_prior: prior must be unconditional");
  if (config.epochs > 0 && data.size() < config.batch_size) {
    throw ContractError("train_prior: dataset smaller than batch_size");
  }
  for (const auto& x : data) {
    if (x.size() != arch.dim) throw ContractError("train_prior: sample dimension mismatch");
    for (double v : x) {
      if (!std::isfinite(v)) throw ContractError("train_prior: non-finite data");
    }
  }
  RandomSource init_rng = RandomSource(config.seed).split(0x1417);
  TrainResult result{FlowModel::initialized(arch, init_rng), {}};
  BatchAssembler asm_;
  const std::vector<double> no_condition;
  result.history = run_epochs(
      result.model, data.size(), config,
      [&](const FlowModel& model, const std::vector<std::size_t>& idx) {
        return asm_.eval(
            model, idx, [&](std::size_t i) -> const std::vector<double>& { return data[i]; },
            [&](std::size_t) -> const std::vector<double>& { return no_condition; },
            [](std::size_t) { return 1.0; });
      });
  return result;
}

TrainResult train_generator(std::span<const WeightedSample> samples, const FlowArchitecture& arch,
                            const TrainConfig& config, const FlowModel* warm_start) {
  config.validate();
  if (config.epochs > 0 && samples.size() < config.batch_size) {
    throw ContractError("train_generator: fewer samples than batch_size");
  }
  for (const auto& s : samples) {
    if (s.x.size() != arch.dim || s.y.size() != arch.cond_dim) {
      throw ContractError("train_generator: sample dimension mismatch");
    }
  }
  std::optional<FlowModel> start;
  if (warm_start != nullptr) {
    if (!(warm_start->architecture() == arch)) {
      throw ContractError("train_generator: warm start architecture differs");
    }
    start = *warm_start;
  } else {
    RandomSource init_rng = RandomSource(config.seed).split(0x9e4);
    start = FlowModel::initialized(arch, init_rng);
  }
  TrainResult result{std::move(*start), {}};
  BatchAssembler asm_;
  result.history = run_epochs(
      result.model, samples.size(), config,
      [&](const FlowModel& model, const std::vector<std::size_t>& idx) {
        return asm_.eval(
            model, idx, [&](std::size_t i) -> const std::vector<double>& { return samples[i].x; },
            [&](std::size_t i) -> const std::vector<double>& { return samples[i].y; },
            [&](std::size_t i) { return samples[i].weight; });
      });
  return result;
}

void write_metrics_csv(const std::vector<EpochRecord>& history, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch,loss,wall_seconds\n";
  out << std::setprecision(17);
  for (const auto& r : history) out << r.epoch << ',' << r.loss << ',' << r.wall_seconds << '\n';
}

}  // namespace critgen
