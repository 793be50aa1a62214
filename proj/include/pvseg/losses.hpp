#pragma once

// Clustering objective on a normalized response map:
//   total = feature_similarity + alpha * spatial_continuity
// Both terms come with their exact (sub)gradient w.r.t. the response.

#include <cmath>
#include <string>
#include <utility>

#include "pvseg/network.hpp"
#include "pvseg/tensor.hpp"

namespace pvseg {

template <typename Scalar = double>
struct LossBreakdown {
  Scalar l_fs = 0;
  Scalar l_sc = 0;
  Scalar alpha = 0;
  Scalar total = 0;
};

template <typename Scalar>
struct LossValue {
  Scalar value = 0;
  Tensor<Scalar> grad;
};

/// Softmax cross-entropy of each pixel's response against its own pseudo-label.
/// The response is zero-mean by construction, so the log is taken of the
/// per-pixel softmax rather than of the raw response.
template <typename Scalar>
LossValue<Scalar> feature_similarity_loss(const Tensor<Scalar>& response, const LabelMap& labels,
                                          LossReduction reduction = LossReduction::mean) {
  if (labels.rows() != response.height() || labels.cols() != response.width()) {
    throw ShapeError("feature_similarity_loss: labels are " + std::to_string(labels.rows()) + "x" +
                     std::to_string(labels.cols()) + ", response is " + response.shape_string());
  }
  const Index q = response.channels();
  const Index n = response.pixels();
  const Scalar scale = reduction == LossReduction::mean ? Scalar(1) / static_cast<Scalar>(n) : Scalar(1);
  LossValue<Scalar> out;
  out.grad = Tensor<Scalar>(q, response.height(), response.width());
  const auto& r = response.matrix();
  auto& g = out.grad.matrix();
  Scalar sum = 0;
  for (Index p = 0; p < n; ++p) {
    const int label = labels.data()[p];
    if (label < 0 || label >= q) {
      throw std::out_of_range("feature_similarity_loss: label " + std::to_string(label) +
                              " outside [0, " + std::to_string(q) + ")");
    }
    const Scalar peak = r.col(p).maxCoeff();
    Scalar z = 0;
    for (Index c = 0; c < q; ++c) {
      g(c, p) = std::exp(r(c, p) - peak);
      z += g(c, p);
    }
    sum += peak + std::log(z) - r(label, p);
    g.col(p) *= scale / z;
    g(label, p) -= scale;
  }
  out.value = sum * scale;
  return out;
}

/// Anisotropic L1 total variation over every horizontally and vertically
/// adjacent pixel pair of every channel. Mean reduction divides by q*H*W.
/// Subgradient of |d| is sign(d), 0 at d == 0.
template <typename Scalar>
LossValue<Scalar> spatial_continuity_loss(const Tensor<Scalar>& response,
                                          LossReduction reduction = LossReduction::mean) {
  const Index h = response.height(), w = response.width();
  if (h < 1 || w < 1) throw ShapeError("spatial_continuity_loss: empty response");
  const Scalar scale =
      reduction == LossReduction::mean ? Scalar(1) / static_cast<Scalar>(response.size()) : Scalar(1);
  LossValue<Scalar> out;
  out.grad = Tensor<Scalar>::Zero(response.channels(), h, w);
  Scalar sum = 0;
  for (Index c = 0; c < response.channels(); ++c) {
    const auto x = response.channel(c);
    auto g = out.grad.channel(c);
    if (w > 1) {
      const RowMatrix<Scalar> d = x.rightCols(w - 1) - x.leftCols(w - 1);
      sum += d.cwiseAbs().sum();
      const RowMatrix<Scalar> s = d.array().sign().matrix() * scale;
      g.rightCols(w - 1) += s;
      g.leftCols(w - 1) -= s;
    }
    if (h > 1) {
      const RowMatrix<Scalar> d = x.bottomRows(h - 1) - x.topRows(h - 1);
      sum += d.cwiseAbs().sum();
      const RowMatrix<Scalar> s = d.array().sign().matrix() * scale;
      g.bottomRows(h - 1) += s;
      g.topRows(h - 1) -= s;
    }
  }
  out.value = sum * scale;
  return out;
}

template <typename Scalar>
std::pair<LossBreakdown<Scalar>, Tensor<Scalar>> total_loss(
    const Tensor<Scalar>& response, const LabelMap& labels, Scalar alpha,
    LossReduction reduction = LossReduction::mean) {
  if (!(alpha >= 0)) throw std::invalid_argument("total_loss: alpha must be >= 0");
  auto fs = feature_similarity_loss(response, labels, reduction);
  auto sc = spatial_continuity_loss(response, reduction);
  LossBreakdown<Scalar> b{fs.value, sc.value, alpha, fs.value + alpha * sc.value};
  Tensor<Scalar> grad = std::move(fs.grad);
  grad.matrix() += alpha * sc.grad.matrix();
  return {b, std::move(grad)};
}

}  // namespace pvseg
