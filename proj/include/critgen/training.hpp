#pragma once

// Maximum-likelihood training of the real-world prior and weighted
// maximum-likelihood (WMLE) training of the conditional generator.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "critgen/flow.hpp"

namespace critgen {

// One queried scenario with its training weight:
//   weight = max(risk + beta * prior_density, weight_floor).
struct WeightedSample {
  std::vector<double> x;
  std::vector<double> y;
  double risk = 0.0;
  double prior_density = 0.0;
  double weight = 0.0;
};

struct TrainConfig {
  double beta = 0.0;
  std::size_t epochs = 40;
  std::size_t batch_size = 128;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  double weight_floor = 1e-4;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  // Weighted mean negative log-likelihood over the epoch's batches.
  double loss = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  FlowModel model;
  std::vector<EpochRecord> history;
};

// risk + beta * exp(log q(x)), clamped below at weight_floor. A null prior
// contributes zero density.
double compute_weight(std::span<const double> x, double risk, const FlowModel* prior, double beta,
                      double weight_floor = 1e-4);

// Fills prior_density and weight of each sample in place.
void assign_weights(std::span<WeightedSample> samples, const FlowModel* prior, double beta,
                    double weight_floor);

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

// loss = -(1 / sum w) * sum_i w_i log p(x_i | y_i), with its exact gradient.
LossAndGrad wmle_loss(const FlowModel& model, std::span<const WeightedSample> batch);

// Unconditional MLE on model-space data. With epochs == 0 the identity-
// initialized model comes back unchanged.
TrainResult train_prior(std::span<const std::vector<double>> data, const FlowArchitecture& arch,
                        const TrainConfig& config);

// WMLE on the given samples (their weight fields are used as-is). A warm start
// continues from its parameters and must share the architecture.
TrainResult train_generator(std::span<const WeightedSample> samples, const FlowArchitecture& arch,
                            const TrainConfig& config, const FlowModel* warm_start = nullptr);

// CSV with header "epoch,loss,wall_seconds".
void write_metrics_csv(const std::vector<EpochRecord>& history, const std::string& path);

}  // namespace critgen
