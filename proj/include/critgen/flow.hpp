#pragma once

// Conditional affine-coupling normalizing flow. The same class serves as the
// unconditional real-world prior (cond_dim == 0) and as the conditional
// scenario generator.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "critgen/numerics.hpp"

namespace critgen {

// Per-dimension affine map between physical units and the model box [-1, 1].
struct Normalizer {
  std::vector<double> lo;
  std::vector<double> hi;

  static Normalizer unit(std::size_t dim);

  std::vector<double> to_model(std::span<const double> physical) const;
  std::vector<double> to_physical(std::span<const double> model) const;
  std::size_t dim() const { return lo.size(); }
  void validate() const;

  bool operator==(const Normalizer&) const = default;
};

struct FlowArchitecture {
  std::size_t dim = 4;
  std::size_t cond_dim = 0;
  std::size_t num_layers = 6;
  std::vector<std::size_t> hidden_dims{64, 64};
  Activation activation = Activation::tanh;
  // log-scale is squashed to scale_bound * tanh(raw)
  double scale_bound = 2.0;

  void validate() const;
  bool operator==(const FlowArchitecture&) const = default;
};

struct CouplingLayer {
  // 1 marks a pass-through coordinate that feeds the conditioner nets.
  std::vector<std::uint8_t> mask;
  // Both nets take (pass-through coordinates, condition) and emit dim values;
  // only entries at transformed coordinates are used.
  MlpSpec scale_net;
  MlpSpec shift_net;
  std::size_t scale_offset = 0;
  std::size_t shift_offset = 0;

  std::size_t pass_count() const;
};

class FlowModel {
 public:
  // All parameters zero: every layer is the identity map.
  explicit FlowModel(FlowArchitecture arch);

  // Random hidden layers with zero output layers. Still exactly the identity
  // map, but trainable (all-zero nets have vanishing hidden gradients).
  static FlowModel initialized(FlowArchitecture arch, RandomSource& rng);

  std::size_t dim() const noexcept { return arch_.dim; }
  std::size_t cond_dim() const noexcept { return arch_.cond_dim; }
  const FlowArchitecture& architecture() const noexcept { return arch_; }
  const std::vector<CouplingLayer>& layers() const noexcept { return layers_; }

  ParamVector& params() noexcept { return params_; }
  const ParamVector& params() const noexcept { return params_; }

  Normalizer& normalizer() noexcept { return normalizer_; }
  const Normalizer& normalizer() const noexcept { return normalizer_; }

  void check_dims(std::size_t x_dim, std::size_t y_dim) const;

 private:
  FlowArchitecture arch_;
  std::vector<CouplingLayer> layers_;
  ParamVector params_;
  Normalizer normalizer_;
};

struct ForwardResult {
  std::vector<double> z;
  double log_det = 0.0;
};

// x and y are in model space. Non-finite intermediates raise NumericError
// carrying the offending layer index.
ForwardResult forward_transform(const FlowModel& model, std::span<const double> x,
                                std::span<const double> y);

std::vector<double> inverse_transform(const FlowModel& model, std::span<const double> z,
                                      std::span<const double> y);

double log_prob(const FlowModel& model, std::span<const double> x, std::span<const double> y);

double standard_normal_log_density(std::span<const double> z);

// Draws inverse_transform(temperature * eps, y) with eps ~ N(0, I).
std::vector<std::vector<double>> sample(const FlowModel& model, std::size_t n,
                                        double temperature, std::span<const double> y,
                                        RandomSource& rng);

// Scratch buffers for the gradient path; reuse one per thread.
struct FlowWorkspace {
  struct Layer {
    std::vector<double> input;
    std::vector<double> net_input;
    std::vector<double> log_scale;
    MlpTape scale_tape;
    MlpTape shift_tape;
  };
  std::vector<Layer> layers;
  std::vector<double> cur;
  std::vector<double> dx;
  std::vector<double> d_raw_scale;
  std::vector<double> d_shift;
  std::vector<double> d_net_input;
  std::vector<double> d_shift_input;
};

// Returns log_prob(x | y) and adds weight * d log_prob / d params into grad.
double log_prob_with_grad(const FlowModel& model, std::span<const double> x,
                          std::span<const double> y, double weight, std::span<double> grad,
                          FlowWorkspace& ws);

struct FlowBatchWorkspace {
  struct Layer {
    Matrix input;
    Matrix net_input;
    Matrix log_scale;
    MlpBatchTape scale_tape;
    MlpBatchTape shift_tape;
  };
  std::vector<Layer> layers;
  Matrix cur;
  Matrix dx;
  Matrix d_raw_scale;
  Matrix d_shift;
  Matrix d_scale_input;
  Matrix d_shift_input;
};

// Minibatch form of log_prob_with_grad: rows of x and y are samples. Writes
// per-row log densities and adds sum_i weights[i] * d log_prob_i / d params
// into grad.
void log_prob_batch_with_grad(const FlowModel& model, const Matrix& x, const Matrix& y,
                              std::span<const double> weights, std::span<double> grad,
                              std::vector<double>& log_probs, FlowBatchWorkspace& ws);

// Forward-only batch evaluation.
std::vector<double> log_prob_batch(const FlowModel& model, const Matrix& x, const Matrix& y);

}  // namespace critgen
