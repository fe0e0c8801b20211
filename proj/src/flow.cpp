#include "critgen/flow.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "critgen/errors.hpp"

namespace critgen {

Normalizer Normalizer::unit(std::size_t dim) {
  return Normalizer{std::vector<double>(dim, -1.0), std::vector<double>(dim, 1.0)};
}

void Normalizer::validate() const {
  if (lo.size() != hi.size()) throw ContractError("Normalizer: lo/hi length mismatch");
  for (std::size_t i = 0; i < lo.size(); ++i) {
    if (!(hi[i] > lo[i]) || !std::isfinite(lo[i]) || !std::isfinite(hi[i])) {
      throw ContractError("Normalizer: degenerate range in dimension " + std::to_string(i));
    }
  }
}

std::vector<double> Normalizer::to_model(std::span<const double> physical) const {
  if (physical.size() != lo.size()) throw ContractError("Normalizer: dimension mismatch");
  std::vector<double> out(physical.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 2.0 * (physical[i] - lo[i]) / (hi[i] - lo[i]) - 1.0;
  }
  return out;
}

std::vector<double> Normalizer::to_physical(std::span<const double> model) const {
  if (model.size() != lo.size()) throw ContractError("Normalizer: dimension mismatch");
  std::vector<double> out(model.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = lo[i] + 0.5 * (model[i] + 1.0) * (hi[i] - lo[i]);
  }
  return out;
}

void FlowArchitecture::validate() const {
  if (dim < 2) throw ContractError("flow: coupling layers need dim >= 2");
  if (num_layers == 0) throw ContractError("flow: num_layers must be positive");
  if (!(scale_bound > 0.0)) throw ContractError("flow: scale_bound must be positive");
  for (auto h : hidden_dims) {
    if (h == 0) throw ContractError("flow: hidden dims must be positive");
  }
}

std::size_t CouplingLayer::pass_count() const {
  std::size_t n = 0;
  for (auto m : mask) n += m;
  return n;
}

FlowModel::FlowModel(FlowArchitecture arch)
    : arch_(std::move(arch)), normalizer_(Normalizer::unit(arch_.dim)) {
  arch_.validate();
  layers_.reserve(arch_.num_layers);
  for (std::size_t l = 0; l < arch_.num_layers; ++l) {
    CouplingLayer layer;
    layer.mask.resize(arch_.dim);
    for (std::size_t j = 0; j < arch_.dim; ++j) layer.mask[j] = ((j + l) % 2 == 0) ? 1 : 0;
    const std::size_t net_in = layer.pass_count() + arch_.cond_dim;
    layer.scale_net = MlpSpec{net_in, arch_.hidden_dims, arch_.dim, arch_.activation};
    layer.shift_net = layer.scale_net;
    layer.scale_offset = params_.add_block("layer" + std::to_string(l) + ".scale",
                                           layer.scale_net.param_count());
    layer.shift_offset = params_.add_block("layer" + std::to_string(l) + ".shift",
                                           layer.shift_net.param_count());
    layers_.push_back(std::move(layer));
  }
}

FlowModel FlowModel::initialized(FlowArchitecture arch, RandomSource& rng) {
  FlowModel model(std::move(arch));
  auto& values = model.params_.values();
  for (const auto& layer : model.layers_) {
    for (auto [spec, offset] : {std::pair{&layer.scale_net, layer.scale_offset},
                                std::pair{&layer.shift_net, layer.shift_offset}}) {
      auto block = std::span<double>(values).subspan(offset, spec->param_count());
      mlp_init(*spec, block, rng);
      // Zero the affine output layer so the initial map is the identity.
      const std::size_t l = spec->layer_count() - 1;
      const std::size_t out_size = (spec->layer_in(l) + 1) * spec->layer_out(l);
      std::fill(block.end() - static_cast<std::ptrdiff_t>(out_size), block.end(), 0.0);
    }
  }
  return model;
}

void FlowModel::check_dims(std::size_t x_dim, std::size_t y_dim) const {
  if (x_dim != arch_.dim || y_dim != arch_.cond_dim) {
    throw ContractError("flow: expected (dim " + std::to_string(arch_.dim) + ", cond " +
                        std::to_string(arch_.cond_dim) + "), got (" + std::to_string(x_dim) +
                        ", " + std::to_string(y_dim) + ")");
  }
}

namespace {

void gather_net_input(const CouplingLayer& layer, std::span<const double> x,
                      std::span<const double> y, std::vector<double>& out) {
  out.clear();
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (layer.mask[j]) out.push_back(x[j]);
  }
  out.insert(out.end(), y.begin(), y.end());
}

void check_finite(std::span<const double> v, std::size_t layer, const char* where) {
  for (double e : v) {
    if (!std::isfinite(e)) {
      throw NumericError(std::string("flow: non-finite value in ") + where + " at layer " +
                             std::to_string(layer),
                         layer);
    }
  }
}

std::span<const double> net_params(const FlowModel& model, const MlpSpec& spec,
                                   std::size_t offset) {
  return std::span<const double>(model.params().values()).subspan(offset, spec.param_count());
}

}  // namespace

double standard_normal_log_density(std::span<const double> z) {
  double sq = 0.0;
  for (double v : z) sq += v * v;
  return -0.5 * sq - 0.5 * static_cast<double>(z.size()) * std::log(2.0 * std::numbers::pi);
}

ForwardResult forward_transform(const FlowModel& model, std::span<const double> x,
                                 std::span<const double> y) {
  model.check_dims(x.size(), y.size());
  thread_local MlpTape tape;
  thread_local std::vector<double> net_in;
  thread_local std::vector<double> log_scale;
  const double bound = model.architecture().scale_bound;

  ForwardResult r{{x.begin(), x.end()}, 0.0};
  check_finite(r.z, 0, "input");
  const auto& layers = model.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    gather_net_input(layer, r.z, y, net_in);
    auto raw_s = mlp_forward(layer.scale_net, net_params(model, layer.scale_net, layer.scale_offset),
                             net_in, tape);
    log_scale.assign(raw_s.begin(), raw_s.end());
    auto shift = mlp_forward(layer.shift_net, net_params(model, layer.shift_net, layer.shift_offset),
                             net_in, tape);
    for (std::size_t j = 0; j < r.z.size(); ++j) {
      if (layer.mask[j]) continue;
      const double s = bound * std::tanh(log_scale[j]);
      r.z[j] = r.z[j] * std::exp(s) + shift[j];
      r.log_det += s;
    }
    check_finite(r.z, l, "forward transform");
  }
  if (!std::isfinite(r.log_det)) {
    throw NumericError("flow: non-finite log-determinant", layers.size() - 1);
  }
  return r;
}

std::vector<double> inverse_transform(const FlowModel& model, std::span<const double> z,
                                      std::span<const double> y) {
  model.check_dims(z.size(), y.size());
  thread_local MlpTape tape;
  thread_local std::vector<double> net_in;
  thread_local std::vector<double> log_scale;
  const double bound = model.architecture().scale_bound;

  std::vector<double> x(z.begin(), z.end());
  const auto& layers = model.layers();
  check_finite(x, layers.size() - 1, "inverse input");
  for (std::size_t l = layers.size(); l-- > 0;) {
    const auto& layer = layers[l];
    // Pass-through coordinates are unchanged by the layer, so the conditioner
    // inputs are available from its output.
    gather_net_input(layer, x, y, net_in);
    auto raw_s = mlp_forward(layer.scale_net, net_params(model, layer.scale_net, layer.scale_offset),
                             net_in, tape);
    log_scale.assign(raw_s.begin(), raw_s.end());
    auto shift = mlp_forward(layer.shift_net, net_params(model, layer.shift_net, layer.shift_offset),
                             net_in, tape);
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (layer.mask[j]) continue;
      const double s = bound * std::tanh(log_scale[j]);
      x[j] = (x[j] - shift[j]) * std::exp(-s);
    }
    check_finite(x, l, "inverse transform");
  }
  return x;
}

double log_prob(const FlowModel& model, std::span<const double> x, std::span<const double> y) {
  const auto r = forward_transform(model, x, y);
  return standard_normal_log_density(r.z) + r.log_det;
}

std::vector<std::vector<double>> sample(const FlowModel& model, std::size_t n,
                                        double temperature, std::span<const double> y,
                                        RandomSource& rng) {
  if (n == 0) throw ContractError("sample: n must be >= 1");
  if (!(temperature > 0.0) || temperature > 1.5) {
    throw ContractError("sample: temperature must lie in (0, 1.5]");
  }
  std::vector<std::vector<double>> out;
  out.reserve(n);
  std::vector<double> z(model.dim());
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : z) v = temperature * rng.gaussian();
    out.push_back(inverse_transform(model, z, y));
  }
  return out;
}

double log_prob_with_grad(const FlowModel& model, std::span<const double> x,
                          std::span<const double> y, double weight, std::span<double> grad,
                          FlowWorkspace& ws) {
  model.check_dims(x.size(), y.size());
  if (grad.size() != model.params().size()) throw ContractError("flow: gradient length mismatch");
  const auto& layers = model.layers();
  const std::size_t d = model.dim();
  const double bound = model.architecture().scale_bound;
  ws.layers.resize(layers.size());

  // Forward, keeping every layer's input and conditioner tapes.
  ws.cur.assign(x.begin(), x.end());
  check_finite(ws.cur, 0, "input");
  double log_det = 0.0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    auto& lw = ws.layers[l];
    lw.input = ws.cur;
    gather_net_input(layer, ws.cur, y, lw.net_input);
    auto raw_s = mlp_forward(layer.scale_net, net_params(model, layer.scale_net, layer.scale_offset),
                             lw.net_input, lw.scale_tape);
    auto shift = mlp_forward(layer.shift_net, net_params(model, layer.shift_net, layer.shift_offset),
                             lw.net_input, lw.shift_tape);
    lw.log_scale.assign(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
      if (layer.mask[j]) continue;
      const double s = bound * std::tanh(raw_s[j]);
      lw.log_scale[j] = s;
      ws.cur[j] = ws.cur[j] * std::exp(s) + shift[j];
      log_det += s;
    }
    check_finite(ws.cur, l, "forward transform");
  }
  const double value = standard_normal_log_density(ws.cur) + log_det;

  // Backward: dx holds weight * d log_prob / d (layer output).
  ws.dx.resize(d);
  for (std::size_t j = 0; j < d; ++j) ws.dx[j] = -weight * ws.cur[j];
  ws.d_raw_scale.resize(d);
  ws.d_shift.resize(d);
  std::vector<double>& shift_in = ws.d_shift_input;
  for (std::size_t l = layers.size(); l-- > 0;) {
    const auto& layer = layers[l];
    auto& lw = ws.layers[l];
    for (std::size_t j = 0; j < d; ++j) {
      if (layer.mask[j]) {
        ws.d_raw_scale[j] = 0.0;
        ws.d_shift[j] = 0.0;
        continue;
      }
      const double s = lw.log_scale[j];
      const double e = std::exp(s);
      const double dz = ws.dx[j];
      const double t = s / bound;  // tanh(raw)
      // weight comes from the log-determinant term
      const double ds = dz * lw.input[j] * e + weight;
      ws.d_raw_scale[j] = ds * bound * (1.0 - t * t);
      ws.d_shift[j] = dz;
      ws.dx[j] = dz * e;
    }
    const bool need_input_grad = l > 0;
    const std::size_t n_in = need_input_grad ? lw.net_input.size() : 0;
    ws.d_net_input.assign(n_in, 0.0);
    shift_in.assign(n_in, 0.0);
    auto scale_grad = grad.subspan(layer.scale_offset, layer.scale_net.param_count());
    auto shift_grad = grad.subspan(layer.shift_offset, layer.shift_net.param_count());
    mlp_backward_accumulate(layer.scale_net, net_params(model, layer.scale_net, layer.scale_offset),
                            lw.scale_tape, ws.d_raw_scale, scale_grad, ws.d_net_input);
    mlp_backward_accumulate(layer.shift_net, net_params(model, layer.shift_net, layer.shift_offset),
                            lw.shift_tape, ws.d_shift, shift_grad, shift_in);
    if (need_input_grad) {
      std::size_t k = 0;
      for (std::size_t j = 0; j < d; ++j) {
        if (!layer.mask[j]) continue;
        ws.dx[j] += ws.d_net_input[k] + shift_in[k];
        ++k;
      }
    }
  }
  return value;
}

namespace {

void gather_net_input_batch(const CouplingLayer& layer, const Matrix& x, const Matrix& y,
                            Matrix& out) {
  const Eigen::Index p = static_cast<Eigen::Index>(layer.pass_count());
  out.resize(x.rows(), p + y.cols());
  Eigen::Index k = 0;
  for (std::size_t j = 0; j < layer.mask.size(); ++j) {
    if (layer.mask[j]) out.col(k++) = x.col(static_cast<Eigen::Index>(j));
  }
  if (y.cols() > 0) out.rightCols(y.cols()) = y;
}

void check_finite_batch(const Matrix& m, std::size_t layer) {
  if (!m.allFinite()) {
    throw NumericError("flow: non-finite value in batch forward transform at layer " +
                           std::to_string(layer),
                       layer);
  }
}

// Runs the forward pass, keeping what the backward pass needs. Returns the
// per-row log-determinant.
Eigen::VectorXd batch_forward(const FlowModel& model, const Matrix& x, const Matrix& y,
                              FlowBatchWorkspace& ws) {
  const auto& layers = model.layers();
  const double bound = model.architecture().scale_bound;
  const Eigen::Index d = static_cast<Eigen::Index>(model.dim());
  ws.layers.resize(layers.size());
  ws.cur = x;
  check_finite_batch(ws.cur, 0);
  Eigen::VectorXd log_det = Eigen::VectorXd::Zero(x.rows());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    auto& lw = ws.layers[l];
    lw.input = ws.cur;
    gather_net_input_batch(layer, ws.cur, y, lw.net_input);
    const Matrix& raw_s = mlp_forward_batch(
        layer.scale_net, net_params(model, layer.scale_net, layer.scale_offset), lw.net_input,
        lw.scale_tape);
    const Matrix& shift = mlp_forward_batch(
        layer.shift_net, net_params(model, layer.shift_net, layer.shift_offset), lw.net_input,
        lw.shift_tape);
    lw.log_scale = Matrix::Zero(x.rows(), d);
    for (Eigen::Index j = 0; j < d; ++j) {
      if (layer.mask[static_cast<std::size_t>(j)]) continue;
      lw.log_scale.col(j) = bound * raw_s.col(j).array().tanh();
      ws.cur.col(j) =
          ws.cur.col(j).array() * lw.log_scale.col(j).array().exp() + shift.col(j).array();
      log_det += lw.log_scale.col(j);
    }
    check_finite_batch(ws.cur, l);
  }
  return log_det;
}

void batch_log_density(const Matrix& z, const Eigen::VectorXd& log_det,
                       std::vector<double>& out) {
  const double c = 0.5 * static_cast<double>(z.cols()) * std::log(2.0 * std::numbers::pi);
  out.resize(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    out[static_cast<std::size_t>(i)] = -0.5 * z.row(i).squaredNorm() - c + log_det(i);
  }
}

void check_batch_dims(const FlowModel& model, const Matrix& x, const Matrix& y) {
  model.check_dims(static_cast<std::size_t>(x.cols()), static_cast<std::size_t>(y.cols()));
  if (y.cols() > 0 && y.rows() != x.rows()) throw ContractError("flow: x/y row count mismatch");
}

}  // namespace

std::vector<double> log_prob_batch(const FlowModel& model, const Matrix& x, const Matrix& y) {
  check_batch_dims(model, x, y);
  thread_local FlowBatchWorkspace ws;
  std::vector<double> out;
  const Matrix yy = y.cols() == 0 ? Matrix(x.rows(), 0) : y;
  const auto log_det = batch_forward(model, x, yy, ws);
  batch_log_density(ws.cur, log_det, out);
  return out;
}

void log_prob_batch_with_grad(const FlowModel& model, const Matrix& x, const Matrix& y,
                              std::span<const double> weights, std::span<double> grad,
                              std::vector<double>& log_probs, FlowBatchWorkspace& ws) {
  check_batch_dims(model, x, y);
  if (weights.size() != static_cast<std::size_t>(x.rows())) {
    throw ContractError("flow: weights length mismatch");
  }
  if (grad.size() != model.params().size()) throw ContractError("flow: gradient length mismatch");
  const Matrix yy = y.cols() == 0 ? Matrix(x.rows(), 0) : y;
  const auto log_det = batch_forward(model, x, yy, ws);
  batch_log_density(ws.cur, log_det, log_probs);

  const auto& layers = model.layers();
  const double bound = model.architecture().scale_bound;
  const Eigen::Index d = static_cast<Eigen::Index>(model.dim());
  const Eigen::Map<const Eigen::VectorXd> w(weights.data(), x.rows());

  // dx = weights * d log_prob / d (layer output), row by row.
  ws.dx = -(w.asDiagonal() * ws.cur);
  for (std::size_t l = layers.size(); l-- > 0;) {
    const auto& layer = layers[l];
    auto& lw = ws.layers[l];
    ws.d_raw_scale = Matrix::Zero(x.rows(), d);
    ws.d_shift = Matrix::Zero(x.rows(), d);
    for (Eigen::Index j = 0; j < d; ++j) {
      if (layer.mask[static_cast<std::size_t>(j)]) continue;
      const auto s = lw.log_scale.col(j).array();
      const Eigen::ArrayXd e = s.exp();
      const Eigen::ArrayXd dz = ws.dx.col(j).array();
      const Eigen::ArrayXd t = s / bound;
      const Eigen::ArrayXd ds = dz * lw.input.col(j).array() * e + w.array();
      ws.d_raw_scale.col(j) = ds * bound * (1.0 - t.square());
      ws.d_shift.col(j) = dz;
      ws.dx.col(j) = dz * e;
    }
    const bool need_input_grad = l > 0;
    auto scale_grad = grad.subspan(layer.scale_offset, layer.scale_net.param_count());
    auto shift_grad = grad.subspan(layer.shift_offset, layer.shift_net.param_count());
    mlp_backward_batch(layer.scale_net, net_params(model, layer.scale_net, layer.scale_offset),
                       lw.scale_tape, ws.d_raw_scale, scale_grad,
                       need_input_grad ? &ws.d_scale_input : nullptr);
    mlp_backward_batch(layer.shift_net, net_params(model, layer.shift_net, layer.shift_offset),
                       lw.shift_tape, ws.d_shift, shift_grad,
                       need_input_grad ? &ws.d_shift_input : nullptr);
    if (need_input_grad) {
      Eigen::Index k = 0;
      for (Eigen::Index j = 0; j < d; ++j) {
        if (!layer.mask[static_cast<std::size_t>(j)]) continue;
        ws.dx.col(j) += ws.d_scale_input.col(k) + ws.d_shift_input.col(k);
        ++k;
      }
    }
  }
}

}  // namespace critgen
