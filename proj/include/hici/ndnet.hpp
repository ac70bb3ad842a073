// SPDX-License-Identifier: Apache-2.0
#pragma once

// Minimal dense-network core: layers, forward/backward passes, Adam and the
// inverse-time-decay learning-rate schedule.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hici/error.hpp"
#include "hici/random.hpp"

namespace hici {

using Index = Eigen::Index;
// Row-major so that a row is one sample.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline constexpr double kInitSigma = 0.1;

enum class Activation { identity, relu, tanh };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + s + "'");
}

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

struct DenseLayer {
  Matrix weight;  // in_dim x out_dim
  Vector bias;    // out_dim
  Activation activation = Activation::identity;

  Index in_dim() const { return weight.rows(); }
  Index out_dim() const { return weight.cols(); }
};

struct Mlp {
  std::vector<DenseLayer> layers;

  Index in_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  Index out_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }

  void validate() const {
    if (layers.empty()) throw ShapeError("network has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.bias.size() != l.out_dim()) {
        throw ShapeError("layer " + std::to_string(i) + ": bias length " +
                         std::to_string(l.bias.size()) + " != out_dim " +
                         std::to_string(l.out_dim()));
      }
      if (i + 1 < layers.size() && l.out_dim() != layers[i + 1].in_dim()) {
        throw ShapeError("layer " + std::to_string(i) + " out_dim " + std::to_string(l.out_dim()) +
                         " does not chain into in_dim " + std::to_string(layers[i + 1].in_dim()));
      }
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }
};

// Weights ~ Normal(0, sigma^2), biases 0. Hidden layers use `hidden`, the last
// layer uses `output`.
inline Mlp init_params(std::span<const Index> dims, Rng& rng,
                       Activation hidden = Activation::relu,
                       Activation output = Activation::identity, double sigma = kInitSigma) {
  if (dims.size() < 2) throw ConfigError("layer-dimension list needs at least two entries");
  for (Index d : dims) {
    if (d < 1) throw ConfigError("layer dimensions must be >= 1, got " + std::to_string(d));
  }
  Mlp net;
  net.layers.reserve(dims.size() - 1);
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    DenseLayer layer;
    layer.weight.resize(dims[i], dims[i + 1]);
    for (Index r = 0; r < layer.weight.rows(); ++r) {
      for (Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = sigma * rng.normal();
    }
    layer.bias = Vector::Zero(dims[i + 1]);
    layer.activation = (i + 2 == dims.size()) ? output : hidden;
    net.layers.push_back(std::move(layer));
  }
  return net;
}

inline Mlp init_params(std::span<const Index> dims, std::uint64_t seed,
                       Activation hidden = Activation::relu,
                       Activation output = Activation::identity, double sigma = kInitSigma) {
  Rng rng(seed);
  return init_params(dims, rng, hidden, output, sigma);
}

namespace detail {

inline void activate(Matrix& z, Activation a) {
  switch (a) {
    case Activation::identity: break;
    case Activation::relu: z = z.cwiseMax(0.0); break;
    case Activation::tanh: z = z.array().tanh().matrix(); break;
  }
}

// Multiplies `grad` in place by the activation derivative, given the
// pre-activation `z` and post-activation `out`.
inline void activation_backward(Matrix& grad, const Matrix& z, const Matrix& out, Activation a) {
  switch (a) {
    case Activation::identity: break;
    case Activation::relu: grad = (z.array() > 0.0).select(grad.array(), 0.0).matrix(); break;
    case Activation::tanh: grad = (grad.array() * (1.0 - out.array().square())).matrix(); break;
  }
}

// x * weight + bias, accumulated row by row in a fixed order so each output
// row depends only on its input row, never on the batch it arrives in.
inline Matrix affine(const Matrix& x, const DenseLayer& layer) {
  Matrix z(x.rows(), layer.weight.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    auto zi = z.row(i);
    zi = layer.bias.transpose();
    for (Index r = 0; r < x.cols(); ++r) zi += x(i, r) * layer.weight.row(r);
  }
  return z;
}

}  // namespace detail

// Intermediate values kept for the backward pass. inputs[i] feeds layer i;
// outputs[i] is its post-activation result.
struct ForwardTrace {
  std::vector<Matrix> inputs;
  std::vector<Matrix> pre;
  std::vector<Matrix> outputs;

  const Matrix& output() const { return outputs.back(); }
};

inline ForwardTrace forward_trace(const Mlp& net, const Matrix& input) {
  net.validate();
  if (input.cols() != net.in_dim()) {
    throw ShapeError("forward: input is " + shape_str(input) + " but network expects " +
                     std::to_string(net.in_dim()) + " columns");
  }
  ForwardTrace trace;
  const auto n = net.layers.size();
  trace.inputs.reserve(n);
  trace.pre.reserve(n);
  trace.outputs.reserve(n);
  const Matrix* current = &input;
  for (const auto& layer : net.layers) {
    trace.inputs.push_back(*current);
    Matrix z = detail::affine(*current, layer);
    Matrix out = z;
    detail::activate(out, layer.activation);
    trace.pre.push_back(std::move(z));
    trace.outputs.push_back(std::move(out));
    current = &trace.outputs.back();
  }
  return trace;
}

inline Matrix forward(const Mlp& net, const Matrix& input) {
  net.validate();
  if (input.cols() != net.in_dim()) {
    throw ShapeError("forward: input is " + shape_str(input) + " but network expects " +
                     std::to_string(net.in_dim()) + " columns");
  }
  Matrix current = input;
  for (const auto& layer : net.layers) {
    Matrix z = detail::affine(current, layer);
    detail::activate(z, layer.activation);
    current = std::move(z);
  }
  return current;
}

struct LayerGrad {
  Matrix weight;
  Vector bias;
};

struct MlpGrad {
  std::vector<LayerGrad> layers;
};

struct BackwardResult {
  MlpGrad params;
  Matrix input;
};

inline BackwardResult backward(const Mlp& net, const ForwardTrace& trace, const Matrix& upstream) {
  const Matrix& out = trace.output();
  if (upstream.rows() != out.rows() || upstream.cols() != out.cols()) {
    throw ShapeError("backward: upstream gradient is " + shape_str(upstream) +
                     " but network output is " + shape_str(out));
  }
  BackwardResult result;
  result.params.layers.resize(net.layers.size());
  Matrix grad = upstream;
  for (std::size_t i = net.layers.size(); i-- > 0;) {
    const auto& layer = net.layers[i];
    detail::activation_backward(grad, trace.pre[i], trace.outputs[i], layer.activation);
    auto& g = result.params.layers[i];
    g.weight = trace.inputs[i].transpose() * grad;
    g.bias = grad.colwise().sum().transpose();
    grad = grad * layer.weight.transpose();
  }
  result.input = std::move(grad);
  return result;
}

inline BackwardResult backward(const Mlp& net, const Matrix& input, const Matrix& upstream) {
  return backward(net, forward_trace(net, input), upstream);
}

// Sum of squared weights (biases excluded).
inline double weight_sq_norm(const Mlp& net) {
  double s = 0.0;
  for (const auto& l : net.layers) s += l.weight.squaredNorm();
  return s;
}

// ---------------------------------------------------------------------------
// Optimizer

// One named, contiguous parameter array together with its gradient.
struct ParamBlock {
  std::string name;
  std::span<double> value;
  std::span<const double> grad;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Standard Adam with bias correction. Moments are sized on the first call and
// must match on every later call. Gradients are checked for finiteness before
// any parameter is touched.
inline void adam_step(std::span<const ParamBlock> blocks, AdamState& state, double lr) {
  if (!(lr > 0.0)) throw ConfigError("adam_step: learning rate must be > 0");
  for (const auto& b : blocks) {
    if (b.value.size() != b.grad.size()) {
      throw ShapeError("adam_step: block '" + b.name + "' has " + std::to_string(b.value.size()) +
                       " values but " + std::to_string(b.grad.size()) + " gradients");
    }
    for (std::size_t i = 0; i < b.grad.size(); ++i) {
      if (!std::isfinite(b.grad[i])) {
        throw NumericError("non-finite gradient in " + b.name + "[" + std::to_string(i) + "]");
      }
    }
  }
  if (state.step == 0 && state.first_moment.empty()) {
    for (const auto& b : blocks) {
      state.first_moment.emplace_back(b.value.size(), 0.0);
      state.second_moment.emplace_back(b.value.size(), 0.0);
    }
  }
  if (state.first_moment.size() != blocks.size()) {
    throw ShapeError("adam_step: optimizer state tracks " +
                     std::to_string(state.first_moment.size()) + " blocks, got " +
                     std::to_string(blocks.size()));
  }
  for (std::size_t j = 0; j < blocks.size(); ++j) {
    if (state.first_moment[j].size() != blocks[j].value.size()) {
      throw ShapeError("adam_step: block '" + blocks[j].name + "' changed size");
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t j = 0; j < blocks.size(); ++j) {
    auto& m = state.first_moment[j];
    auto& v = state.second_moment[j];
    const auto& b = blocks[j];
    for (std::size_t i = 0; i < b.value.size(); ++i) {
      const double g = b.grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      b.value[i] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

struct LrSchedule {
  double base_rate = 0.01;
  double decay_rate = 0.75;
  std::size_t iterations_per_decay = 1;

  void validate() const {
    if (!(base_rate > 0.0) || !std::isfinite(base_rate)) {
      throw ConfigError("learning rate must be > 0");
    }
    if (!(decay_rate > 0.0 && decay_rate <= 1.0)) {
      throw ConfigError("learning rate decay must lie in (0, 1]");
    }
    if (iterations_per_decay < 1) throw ConfigError("iterations per decay must be >= 1");
  }
};

// Inverse time decay: base / (1 + (1 - decay) * floor(epoch / iterations_per_decay)).
inline double lr_at(const LrSchedule& s, std::size_t epoch) {
  const auto k = static_cast<double>(epoch / s.iterations_per_decay);
  return s.base_rate / (1.0 + (1.0 - s.decay_rate) * k);
}

}  // namespace hici
