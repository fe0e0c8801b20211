#pragma once

// Dense numerics shared by every other module: a seeded counter-based random
// source, flat parameter storage, small tanh/relu MLPs with hand-written
// reverse-mode gradients, and Adam.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace critgen {

// Row-major so one row is one sample of a minibatch.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Counter-based generator: draw i is splitmix64(seed, i), so a stream is fully
// determined by (seed, counter) and never depends on platform RNG engines.
class RandomSource {
 public:
  explicit RandomSource(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t uniform_index(std::size_t n);
  // Box-Muller; the second variate of each pair is cached.
  double gaussian();

  // Independent child stream; parallel work derives children instead of
  // sharing one source.
  RandomSource split(std::uint64_t stream) const;

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

std::vector<double> draw_standard_gaussian(RandomSource& rng, std::size_t n);

std::uint64_t mix64(std::uint64_t x);

struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
};

// Flat parameter storage with a named block layout. Blocks are appended in
// order, so they are disjoint and cover [0, size()).
class ParamVector {
 public:
  ParamVector() = default;

  std::size_t add_block(std::string name, std::size_t length);

  std::span<double> block(std::size_t i);
  std::span<const double> block(std::size_t i) const;
  const std::vector<ParamBlock>& layout() const noexcept { return layout_; }

  std::vector<double>& values() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }

  // Throws ContractError if the layout does not tile the value array.
  void validate() const;

 private:
  std::vector<double> values_;
  std::vector<ParamBlock> layout_;
};

enum class Activation { tanh, relu };

const char* to_string(Activation a);
Activation activation_from_string(const std::string& s);

// Fully connected net; hidden layers use `activation`, the output layer is
// affine. Per layer the parameters are laid out as weights then biases, with
// weights input-major: w[i * out + o] connects input i to output o.
struct MlpSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims;
  std::size_t output_dim = 0;
  Activation activation = Activation::tanh;

  std::size_t param_count() const;
  std::size_t layer_count() const { return hidden_dims.size() + 1; }
  std::size_t layer_in(std::size_t layer) const;
  std::size_t layer_out(std::size_t layer) const;
  void validate() const;

  bool operator==(const MlpSpec&) const = default;
};

// Cached activations from one forward pass, reused by the backward pass.
// Keeping one tape per caller avoids reallocations in training loops.
struct MlpTape {
  // values[0] is the input, values[l + 1] the output of layer l
  // (post-activation for hidden layers).
  std::vector<std::vector<double>> values;
};

std::vector<double> mlp_forward(const MlpSpec& spec, std::span<const double> params,
                                std::span<const double> input);

// Forward pass that records the tape; returns a view of the output stored
// inside the tape.
std::span<const double> mlp_forward(const MlpSpec& spec, std::span<const double> params,
                                    std::span<const double> input, MlpTape& tape);

// Adds (d output / d params)^T output_grad into param_grad and writes
// (d output / d input)^T output_grad into input_grad (when non-empty).
void mlp_backward_accumulate(const MlpSpec& spec, std::span<const double> params,
                             const MlpTape& tape, std::span<const double> output_grad,
                             std::span<double> param_grad, std::span<double> input_grad);

struct MlpGradient {
  std::vector<double> params;
  std::vector<double> input;
};

MlpGradient mlp_backward(const MlpSpec& spec, std::span<const double> params,
                         std::span<const double> input, std::span<const double> output_grad);

// Minibatch forms of the two calls above; rows are samples. The batch path
// sums in a different order than the per-sample path, so the two agree to
// rounding, not bit-for-bit.
struct MlpBatchTape {
  std::vector<Matrix> values;
};

const Matrix& mlp_forward_batch(const MlpSpec& spec, std::span<const double> params,
                                const Matrix& input, MlpBatchTape& tape);

// `output_grad` is consumed as scratch. `input_grad` may be null.
void mlp_backward_batch(const MlpSpec& spec, std::span<const double> params,
                        const MlpBatchTape& tape, Matrix& output_grad, std::span<double> param_grad,
                        Matrix* input_grad);

// Glorot-uniform weights, zero biases.
void mlp_init(const MlpSpec& spec, std::span<double> params, RandomSource& rng);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class AdamState {
 public:
  AdamState(std::size_t n, AdamConfig config = {});

  // In-place update of params; throws TrainingError on non-finite gradient.
  void step(std::span<double> params, std::span<const double> grad);

  const std::vector<double>& first_moment() const noexcept { return m_; }
  const std::vector<double>& second_moment() const noexcept { return v_; }
  std::uint64_t step_count() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return config_; }

 private:
  AdamConfig config_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::uint64_t t_ = 0;
};

}  // namespace critgen
