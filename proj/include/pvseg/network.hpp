#pragma once

// The fixed feature-clustering network:
//   conv 3x3 (1 -> M) -> ReLU -> norm -> conv 3x3 (M -> M) -> ReLU -> norm
//   -> conv 1x1 (M -> q_max) -> norm -> argmax
// plus its parameter container, backward pass and SGD-with-momentum update.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pvseg/errors.hpp"
#include "pvseg/tensor.hpp"

namespace pvseg {

enum class LossReduction { mean, sum };

struct TrainConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  int max_iterations = 200;
  double alpha = 5.0;
  int feature_channels = 64;
  int q_max = 18;
  int q_min = 4;
  std::uint64_t seed = 0;
  double eps = 1e-5;
  LossReduction loss_reduction = LossReduction::mean;

  bool operator==(const TrainConfig&) const = default;

  void validate() const {
    if (!(1 <= q_min && q_min <= q_max)) {
      throw std::invalid_argument("TrainConfig: need 1 <= q_min <= q_max");
    }
    if (max_iterations < 1) throw std::invalid_argument("TrainConfig: iterations must be >= 1");
    if (!(learning_rate > 0)) throw std::invalid_argument("TrainConfig: learning rate must be > 0");
    if (!(momentum >= 0 && momentum < 1)) {
      throw std::invalid_argument("TrainConfig: momentum must lie in [0, 1)");
    }
    if (!(alpha >= 0)) throw std::invalid_argument("TrainConfig: alpha must be >= 0");
    if (feature_channels < 1) throw std::invalid_argument("TrainConfig: channels must be >= 1");
    if (!(eps > 0)) throw std::invalid_argument("TrainConfig: eps must be > 0");
  }
};

/// Per-pixel cluster ids, H x W.
using LabelMap = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct ConvLayer {
  ConvSpec spec;
  RowMatrix<Scalar> weights;
  Vector<Scalar> bias;
  // Momentum buffers, same shapes as weights / bias.
  RowMatrix<Scalar> weight_velocity;
  Vector<Scalar> bias_velocity;

  bool all_finite() const { return weights.allFinite() && bias.allFinite(); }
};

template <typename Scalar>
struct NetworkParams {
  ConvLayer<Scalar> conv1;
  ConvLayer<Scalar> conv2;
  ConvLayer<Scalar> classifier;  // 1x1 conv == per-pixel linear map to q_max responses

  Index parameter_count() const {
    Index n = 0;
    for (const auto* l : {&conv1, &conv2, &classifier}) n += l->weights.size() + l->bias.size();
    return n;
  }
  bool all_finite() const {
    return conv1.all_finite() && conv2.all_finite() && classifier.all_finite();
  }
};

template <typename Scalar>
struct LayerGradient {
  RowMatrix<Scalar> weights;
  Vector<Scalar> bias;
};

template <typename Scalar>
struct NetworkGradients {
  LayerGradient<Scalar> conv1;
  LayerGradient<Scalar> conv2;
  LayerGradient<Scalar> classifier;

  bool all_finite() const {
    for (const auto* l : {&conv1, &conv2, &classifier}) {
      if (!l->weights.allFinite() || !l->bias.allFinite()) return false;
    }
    return true;
  }
};

namespace detail {

template <typename Scalar, typename Rng>
ConvLayer<Scalar> he_normal_layer(const ConvSpec& spec, Rng& rng) {
  ConvLayer<Scalar> l;
  l.spec = spec;
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(spec.weight_cols())));
  l.weights.resize(spec.out_channels, spec.weight_cols());
  for (Index i = 0; i < l.weights.size(); ++i) l.weights.data()[i] = static_cast<Scalar>(dist(rng));
  l.bias = Vector<Scalar>::Zero(spec.out_channels);
  l.weight_velocity = RowMatrix<Scalar>::Zero(l.weights.rows(), l.weights.cols());
  l.bias_velocity = Vector<Scalar>::Zero(spec.out_channels);
  return l;
}

}  // namespace detail

/// He-normal weights (std sqrt(2 / fan_in)), zero biases, zero momentum.
/// Deterministic in config.seed.
template <typename Scalar = double>
NetworkParams<Scalar> init_params(const TrainConfig& config) {
  config.validate();
  const Index m = config.feature_channels, q = config.q_max;
  std::mt19937_64 rng(config.seed);
  NetworkParams<Scalar> p;
  p.conv1 = detail::he_normal_layer<Scalar>(ConvSpec{1, m, 3}, rng);
  p.conv2 = detail::he_normal_layer<Scalar>(ConvSpec{m, m, 3}, rng);
  p.classifier = detail::he_normal_layer<Scalar>(ConvSpec{m, q, 1}, rng);
  return p;
}

/// Activations kept from a forward pass for the backward pass.
template <typename Scalar>
struct ForwardPass {
  Tensor<Scalar> input;
  Tensor<Scalar> act1;  // ReLU(conv1)
  ChannelNorm<Scalar> norm1;
  Tensor<Scalar> act2;  // ReLU(conv2)
  ChannelNorm<Scalar> norm2;
  ChannelNorm<Scalar> head;  // normalized classifier output

  /// q_max x H x W normalized response map.
  const Tensor<Scalar>& response() const { return head.output; }
};

template <typename Scalar>
ForwardPass<Scalar> forward(const NetworkParams<Scalar>& params, const Tensor<Scalar>& image,
                            Scalar eps) {
  ForwardPass<Scalar> f;
  f.input = image;
  f.act1 = relu_forward(conv2d_forward(image, params.conv1.weights, params.conv1.bias, params.conv1.spec));
  f.norm1 = channelnorm_forward(f.act1, eps);
  f.act2 = relu_forward(conv2d_forward(f.norm1.output, params.conv2.weights, params.conv2.bias,
                                       params.conv2.spec));
  f.norm2 = channelnorm_forward(f.act2, eps);
  f.head = channelnorm_forward(conv2d_forward(f.norm2.output, params.classifier.weights,
                                              params.classifier.bias, params.classifier.spec),
                               eps);
  return f;
}

/// Gradients of a scalar loss w.r.t. all parameters given dLoss/dResponse.
template <typename Scalar>
NetworkGradients<Scalar> backward(const NetworkParams<Scalar>& params, const ForwardPass<Scalar>& f,
                                  const Tensor<Scalar>& grad_response) {
  NetworkGradients<Scalar> g;
  auto g3 = conv2d_backward(channelnorm_backward(grad_response, f.head), f.norm2.output,
                            params.classifier.weights, params.classifier.spec);
  g.classifier = {std::move(g3.weights), std::move(g3.bias)};

  auto g2 = conv2d_backward(relu_backward(channelnorm_backward(g3.input, f.norm2), f.act2),
                            f.norm1.output, params.conv2.weights, params.conv2.spec);
  g.conv2 = {std::move(g2.weights), std::move(g2.bias)};

  auto g1 = conv2d_backward(relu_backward(channelnorm_backward(g2.input, f.norm1), f.act1),
                            f.input, params.conv1.weights, params.conv1.spec);
  g.conv1 = {std::move(g1.weights), std::move(g1.bias)};
  return g;
}

/// Per-pixel argmax over channels; ties go to the lowest channel index.
template <typename Scalar>
LabelMap assign_labels(const Tensor<Scalar>& response) {
  LabelMap labels(response.height(), response.width());
  const auto& m = response.matrix();
  for (Index p = 0; p < response.pixels(); ++p) {
    Index best = 0;
    for (Index c = 1; c < m.rows(); ++c) {
      if (m(c, p) > m(best, p)) best = c;
    }
    labels.data()[p] = static_cast<int>(best);
  }
  return labels;
}

inline int count_unique(const LabelMap& labels) {
  std::vector<int> ids(labels.data(), labels.data() + labels.size());
  std::sort(ids.begin(), ids.end());
  return static_cast<int>(std::unique(ids.begin(), ids.end()) - ids.begin());
}

/// Classic momentum: v <- momentum * v + g; w <- w - lr * v.
/// Leaves params untouched and throws NumericError if any gradient is non-finite.
template <typename Scalar>
void sgd_momentum_step(NetworkParams<Scalar>& params, const NetworkGradients<Scalar>& grads,
                       const TrainConfig& config) {
  if (!grads.all_finite()) throw NumericError("sgd_momentum_step: non-finite gradient");
  const Scalar mu = static_cast<Scalar>(config.momentum);
  const Scalar lr = static_cast<Scalar>(config.learning_rate);
  auto update = [&](ConvLayer<Scalar>& l, const LayerGradient<Scalar>& g) {
    if (g.weights.rows() != l.weights.rows() || g.weights.cols() != l.weights.cols() ||
        g.bias.size() != l.bias.size()) {
      throw ShapeError("sgd_momentum_step: gradient shape does not match parameters");
    }
    l.weight_velocity = mu * l.weight_velocity + g.weights;
    l.bias_velocity = mu * l.bias_velocity + g.bias;
    l.weights -= lr * l.weight_velocity;
    l.bias -= lr * l.bias_velocity;
  };
  update(params.conv1, grads.conv1);
  update(params.conv2, grads.conv2);
  update(params.classifier, grads.classifier);
  if (!params.all_finite()) throw NumericError("sgd_momentum_step: parameters became non-finite");
}

/// Flattens weights then bias of conv1, conv2, classifier.
template <typename Scalar>
Vector<Scalar> pack_parameters(const NetworkParams<Scalar>& p) {
  Vector<Scalar> v(p.parameter_count());
  Index o = 0;
  for (const auto* l : {&p.conv1, &p.conv2, &p.classifier}) {
    v.segment(o, l->weights.size()) = l->weights.template reshaped<Eigen::RowMajor>();
    o += l->weights.size();
    v.segment(o, l->bias.size()) = l->bias;
    o += l->bias.size();
  }
  return v;
}

template <typename Scalar>
void unpack_parameters(const Vector<Scalar>& v, NetworkParams<Scalar>& p) {
  if (v.size() != p.parameter_count()) throw ShapeError("unpack_parameters: size mismatch");
  Index o = 0;
  for (auto* l : {&p.conv1, &p.conv2, &p.classifier}) {
    l->weights.template reshaped<Eigen::RowMajor>() = v.segment(o, l->weights.size());
    o += l->weights.size();
    l->bias = v.segment(o, l->bias.size());
    o += l->bias.size();
  }
}

/// Same layout as pack_parameters.
template <typename Scalar>
Vector<Scalar> pack_gradients(const NetworkGradients<Scalar>& g) {
  Index n = 0;
  for (const auto* l : {&g.conv1, &g.conv2, &g.classifier}) n += l->weights.size() + l->bias.size();
  Vector<Scalar> v(n);
  Index o = 0;
  for (const auto* l : {&g.conv1, &g.conv2, &g.classifier}) {
    v.segment(o, l->weights.size()) = l->weights.template reshaped<Eigen::RowMajor>();
    o += l->weights.size();
    v.segment(o, l->bias.size()) = l->bias;
    o += l->bias.size();
  }
  return v;
}

}  // namespace pvseg
