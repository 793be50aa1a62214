#pragma once

// Dense C x H x W tensors and the differentiable primitives of the
// segmentation network: same-size convolution, ReLU and per-channel
// normalization, each with an exact backward pass.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>

#include <Eigen/Core>

#include "pvseg/errors.hpp"

namespace pvseg {

using Index = Eigen::Index;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Channels x height x width array. Stored as a row-major C x (H*W) matrix so
/// that channel c is one contiguous row and the whole tensor can take part in
/// matrix products directly.
template <typename Scalar>
class Tensor {
 public:
  using Matrix = RowMatrix<Scalar>;
  using ChannelMap = Eigen::Map<Matrix>;
  using ConstChannelMap = Eigen::Map<const Matrix>;

  Tensor() = default;

  Tensor(Index channels, Index height, Index width)
      : height_(height), width_(width), data_(channels, height * width) {
    if (channels < 0 || height < 0 || width < 0) {
      throw ShapeError("Tensor: negative dimension");
    }
  }

  static Tensor Zero(Index channels, Index height, Index width) {
    return Constant(channels, height, width, Scalar(0));
  }

  static Tensor Constant(Index channels, Index height, Index width, Scalar value) {
    Tensor t(channels, height, width);
    t.data_.setConstant(value);
    return t;
  }

  Index channels() const { return data_.rows(); }
  Index height() const { return height_; }
  Index width() const { return width_; }
  Index pixels() const { return height_ * width_; }
  Index size() const { return data_.size(); }

  bool same_shape(const Tensor& other) const {
    return channels() == other.channels() && height_ == other.height_ && width_ == other.width_;
  }

  /// C x (H*W) view.
  Matrix& matrix() { return data_; }
  const Matrix& matrix() const { return data_; }

  /// H x W view of one channel.
  ChannelMap channel(Index c) { return ChannelMap(data_.row(c).data(), height_, width_); }
  ConstChannelMap channel(Index c) const {
    return ConstChannelMap(data_.row(c).data(), height_, width_);
  }

  Scalar& operator()(Index c, Index y, Index x) { return data_(c, y * width_ + x); }
  Scalar operator()(Index c, Index y, Index x) const { return data_(c, y * width_ + x); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  bool all_finite() const { return data_.allFinite(); }

  std::string shape_string() const {
    return "(" + std::to_string(channels()) + ", " + std::to_string(height_) + ", " +
           std::to_string(width_) + ")";
  }

 private:
  Index height_ = 0;
  Index width_ = 0;
  Matrix data_;
};

/// Square, same-size (zero padded) convolution. Weights are stored as an
/// out_channels x (in_channels * kernel * kernel) matrix whose columns run
/// over (input channel, kernel row, kernel column), i.e. the usual
/// out x in x k x k layout flattened row-major.
struct ConvSpec {
  Index in_channels = 1;
  Index out_channels = 1;
  Index kernel = 3;

  Index taps() const { return kernel * kernel; }
  Index weight_cols() const { return in_channels * taps(); }

  void validate() const {
    if (kernel != 1 && kernel != 3) {
      throw ShapeError("ConvSpec: kernel must be 1 or 3, got " + std::to_string(kernel));
    }
    if (in_channels < 1 || out_channels < 1) {
      throw ShapeError("ConvSpec: channel counts must be positive");
    }
  }
};

template <typename Scalar>
struct ConvGradients {
  Tensor<Scalar> input;
  RowMatrix<Scalar> weights;
  Vector<Scalar> bias;
};

namespace detail {

inline std::string dims(Index r, Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <typename Scalar>
void check_conv_shapes(const Tensor<Scalar>& input, const RowMatrix<Scalar>& weights,
                       const ConvSpec& spec) {
  spec.validate();
  if (input.channels() != spec.in_channels) {
    throw ShapeError("conv2d: input " + input.shape_string() + " has " +
                     std::to_string(input.channels()) + " channels, spec expects " +
                     std::to_string(spec.in_channels));
  }
  if (weights.rows() != spec.out_channels || weights.cols() != spec.weight_cols()) {
    throw ShapeError("conv2d: weights are " + dims(weights.rows(), weights.cols()) +
                     ", expected " + dims(spec.out_channels, spec.weight_cols()));
  }
}

// Rows per im2col tile, chosen so one unrolled tile stays around 4M entries.
inline Index tile_rows(Index unrolled_rows, Index width) {
  constexpr Index budget = Index(1) << 22;
  return std::max<Index>(1, budget / std::max<Index>(1, unrolled_rows * width));
}

// Unrolls image rows [y0, y1) for a k x k same-size window:
// cols(i * k * k + ky * k + kx, (y - y0) * W + x) = in(i, y + ky - r, x + kx - r),
// zero where the source falls outside the image.
template <typename Scalar>
void im2col_rows(const Tensor<Scalar>& in, Index kernel, Index y0, Index y1, RowMatrix<Scalar>& cols) {
  const Index h = in.height(), w = in.width(), r = kernel / 2;
  cols.setZero(in.channels() * kernel * kernel, (y1 - y0) * w);
  for (Index i = 0; i < in.channels(); ++i) {
    const Scalar* src = in.matrix().row(i).data();
    for (Index ky = 0; ky < kernel; ++ky) {
      for (Index kx = 0; kx < kernel; ++kx) {
        const Index dy = ky - r, dx = kx - r;
        const Index x0 = std::max<Index>(0, -dx), x1 = std::min(w, w - dx);
        Scalar* dst = cols.row((i * kernel + ky) * kernel + kx).data();
        for (Index y = y0; y < y1; ++y) {
          if (y + dy < 0 || y + dy >= h || x0 >= x1) continue;
          std::copy_n(src + (y + dy) * w + x0 + dx, x1 - x0, dst + (y - y0) * w + x0);
        }
      }
    }
  }
}

// Adjoint of im2col_rows: accumulates the unrolled gradient back into `dst`.
template <typename Scalar>
void col2im_rows_add(const RowMatrix<Scalar>& cols, Index kernel, Index y0, Index y1, Tensor<Scalar>& dst) {
  const Index h = dst.height(), w = dst.width(), r = kernel / 2;
  for (Index i = 0; i < dst.channels(); ++i) {
    Scalar* out = dst.matrix().row(i).data();
    for (Index ky = 0; ky < kernel; ++ky) {
      for (Index kx = 0; kx < kernel; ++kx) {
        const Index dy = ky - r, dx = kx - r;
        const Index x0 = std::max<Index>(0, -dx), x1 = std::min(w, w - dx);
        const Scalar* src = cols.row((i * kernel + ky) * kernel + kx).data();
        for (Index y = y0; y < y1; ++y) {
          if (y + dy < 0 || y + dy >= h) continue;
          const Scalar* s = src + (y - y0) * w;
          Scalar* d = out + (y + dy) * w + dx;
          for (Index x = x0; x < x1; ++x) d[x] += s[x];
        }
      }
    }
  }
}

}  // namespace detail

/// Zero-padded cross-correlation plus bias; output has the input's spatial size.
/// 3x3 kernels are evaluated as GEMMs over row tiles of the unrolled input.
template <typename Scalar>
Tensor<Scalar> conv2d_forward(const Tensor<Scalar>& input,
                              const RowMatrix<std::type_identity_t<Scalar>>& weights,
                              const Vector<std::type_identity_t<Scalar>>& bias, const ConvSpec& spec) {
  detail::check_conv_shapes(input, weights, spec);
  if (bias.size() != spec.out_channels) {
    throw ShapeError("conv2d: bias has " + std::to_string(bias.size()) + " entries, expected " +
                     std::to_string(spec.out_channels));
  }
  Tensor<Scalar> out(spec.out_channels, input.height(), input.width());
  out.matrix().colwise() = bias;
  if (spec.kernel == 1) {
    out.matrix().noalias() += weights * input.matrix();
    return out;
  }
  const Index w = input.width(), h = input.height();
  const Index step = detail::tile_rows(spec.weight_cols(), w);
  RowMatrix<Scalar> cols;
  for (Index y0 = 0; y0 < h; y0 += step) {
    const Index y1 = std::min(h, y0 + step);
    detail::im2col_rows(input, spec.kernel, y0, y1, cols);
    out.matrix().middleCols(y0 * w, (y1 - y0) * w).noalias() += weights * cols;
  }
  return out;
}

template <typename Scalar>
ConvGradients<Scalar> conv2d_backward(const Tensor<Scalar>& grad_out,
                                      const Tensor<Scalar>& cached_input,
                                      const RowMatrix<Scalar>& weights, const ConvSpec& spec) {
  detail::check_conv_shapes(cached_input, weights, spec);
  if (grad_out.channels() != spec.out_channels || grad_out.height() != cached_input.height() ||
      grad_out.width() != cached_input.width()) {
    throw ShapeError("conv2d_backward: grad_out " + grad_out.shape_string() +
                     " does not match forward output (" + std::to_string(spec.out_channels) +
                     ", " + std::to_string(cached_input.height()) + ", " +
                     std::to_string(cached_input.width()) + ")");
  }
  ConvGradients<Scalar> g;
  g.bias = grad_out.matrix().rowwise().sum();
  g.weights.resize(spec.out_channels, spec.weight_cols());
  if (spec.kernel == 1) {
    g.weights.noalias() = grad_out.matrix() * cached_input.matrix().transpose();
    g.input = Tensor<Scalar>(spec.in_channels, cached_input.height(), cached_input.width());
    g.input.matrix().noalias() = weights.transpose() * grad_out.matrix();
    return g;
  }
  g.input = Tensor<Scalar>::Zero(spec.in_channels, cached_input.height(), cached_input.width());
  g.weights.setZero();
  const Index w = cached_input.width(), h = cached_input.height();
  const Index step = detail::tile_rows(spec.weight_cols(), w);
  RowMatrix<Scalar> cols, back;
  for (Index y0 = 0; y0 < h; y0 += step) {
    const Index y1 = std::min(h, y0 + step);
    const auto grad_tile = grad_out.matrix().middleCols(y0 * w, (y1 - y0) * w);
    detail::im2col_rows(cached_input, spec.kernel, y0, y1, cols);
    g.weights.noalias() += grad_tile * cols.transpose();
    back.noalias() = weights.transpose() * grad_tile;
    detail::col2im_rows_add(back, spec.kernel, y0, y1, g.input);
  }
  return g;
}

template <typename Scalar>
Tensor<Scalar> relu_forward(const Tensor<Scalar>& input) {
  Tensor<Scalar> out(input.channels(), input.height(), input.width());
  out.matrix() = input.matrix().cwiseMax(Scalar(0));
  return out;
}

/// Passes gradient where the cached forward value is > 0. Either the ReLU input
/// or its output can be cached, since both are positive at the same entries.
template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& grad_out, const Tensor<Scalar>& cached) {
  if (!grad_out.same_shape(cached)) {
    throw ShapeError("relu_backward: grad_out " + grad_out.shape_string() + " vs cached " +
                     cached.shape_string());
  }
  Tensor<Scalar> g(grad_out.channels(), grad_out.height(), grad_out.width());
  g.matrix() = (cached.matrix().array() > Scalar(0))
                   .select(grad_out.matrix().array(), Scalar(0))
                   .matrix();
  return g;
}

/// Output of the per-channel normalization together with what its backward
/// pass needs (the normalized values double as the cache).
template <typename Scalar>
struct ChannelNorm {
  Tensor<Scalar> output;
  Vector<Scalar> inv_std;
  // Channels whose variance fell below eps and were scaled by 1/sqrt(eps).
  Eigen::Array<bool, Eigen::Dynamic, 1> floored;
};

/// Per channel: (x - mean) / sqrt(max(var, eps)), statistics over the H*W
/// pixels, population variance, no affine parameters. Channels with variance
/// >= eps come out with exactly zero mean and unit variance.
template <typename Scalar>
ChannelNorm<Scalar> channelnorm_forward(const Tensor<Scalar>& input, Scalar eps) {
  if (input.pixels() < 1) throw ShapeError("channelnorm: empty spatial extent");
  if (!(eps > Scalar(0))) throw std::invalid_argument("channelnorm: eps must be positive");
  const Scalar n = static_cast<Scalar>(input.pixels());
  ChannelNorm<Scalar> r;
  r.output = Tensor<Scalar>(input.channels(), input.height(), input.width());
  Vector<Scalar> mean = input.matrix().rowwise().sum() / n;
  r.output.matrix() = input.matrix().colwise() - mean;
  Vector<Scalar> var = r.output.matrix().array().square().rowwise().sum() / n;
  // An overflowed variance would otherwise scale the channel to exact zeros.
  if (!var.allFinite()) throw NumericError("channelnorm: non-finite channel variance");
  r.floored = var.array() < eps;
  r.inv_std = var.array().max(eps).rsqrt();
  r.output.matrix() = r.inv_std.asDiagonal() * r.output.matrix();
  return r;
}

template <typename Scalar>
Tensor<Scalar> channelnorm_backward(const Tensor<Scalar>& grad_out, const ChannelNorm<Scalar>& cache) {
  const Tensor<Scalar>& xhat = cache.output;
  if (!grad_out.same_shape(xhat)) {
    throw ShapeError("channelnorm_backward: grad_out " + grad_out.shape_string() + " vs cache " +
                     xhat.shape_string());
  }
  const Scalar n = static_cast<Scalar>(xhat.pixels());
  Vector<Scalar> mean_g = grad_out.matrix().rowwise().sum() / n;
  // The variance term only exists where the scale depends on the input.
  Vector<Scalar> mean_gx = grad_out.matrix().cwiseProduct(xhat.matrix()).rowwise().sum() / n;
  mean_gx = cache.floored.select(Vector<Scalar>::Zero(mean_gx.size()), mean_gx);
  Tensor<Scalar> g(xhat.channels(), xhat.height(), xhat.width());
  g.matrix() = grad_out.matrix().colwise() - mean_g;
  g.matrix() -= mean_gx.asDiagonal() * xhat.matrix();
  g.matrix() = cache.inv_std.asDiagonal() * g.matrix();
  return g;
}

/// Compares the analytic gradient returned by `loss_and_grad` at `params`
/// against central differences of its value. Returns
/// max_i |analytic_i - numeric_i| / max(1, |analytic_i| + |numeric_i|), or
/// +infinity when any evaluated loss is non-finite.
///
/// `loss_and_grad(params)` must return a pair (loss, gradient vector).
template <typename Scalar, typename LossAndGrad>
Scalar grad_check(LossAndGrad&& loss_and_grad, const Vector<std::type_identity_t<Scalar>>& params,
                  Scalar probe_eps) {
  if (!(probe_eps >= Scalar(1e-7) && probe_eps <= Scalar(1e-3))) {
    throw std::invalid_argument("grad_check: probe_eps must lie in [1e-7, 1e-3]");
  }
  const auto [value, analytic] = loss_and_grad(params);
  if (analytic.size() != params.size()) {
    throw ShapeError("grad_check: gradient has " + std::to_string(analytic.size()) +
                     " entries for " + std::to_string(params.size()) + " parameters");
  }
  constexpr Scalar inf = std::numeric_limits<Scalar>::infinity();
  if (!std::isfinite(value) || !analytic.allFinite()) return inf;

  Vector<Scalar> probe = params;
  Scalar worst = 0;
  for (Index i = 0; i < params.size(); ++i) {
    probe[i] = params[i] + probe_eps;
    const Scalar up = loss_and_grad(probe).first;
    probe[i] = params[i] - probe_eps;
    const Scalar down = loss_and_grad(probe).first;
    probe[i] = params[i];
    if (!std::isfinite(up) || !std::isfinite(down)) return inf;
    const Scalar numeric = (up - down) / (2 * probe_eps);
    const Scalar a = analytic[i];
    const Scalar err =
        std::abs(a - numeric) / std::max(Scalar(1), std::abs(a) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace pvseg
