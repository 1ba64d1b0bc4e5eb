#pragma once

#include <Eigen/Dense>

#include <cmath>

// Dense layer primitives over column batches: every matrix holds one item per
// column. Backward functions accumulate parameter gradients (+=) so multiple
// losses can share one gradient vector.
namespace piqt::nn {

inline Eigen::MatrixXd linear(const Eigen::Ref<const Eigen::MatrixXd> &W,
                              const Eigen::Ref<const Eigen::MatrixXd> &b,
                              const Eigen::MatrixXd &X) {
  return (W * X).colwise() + b.col(0);
}

// Returns dX; adds into dW, db.
inline Eigen::MatrixXd linear_backward(const Eigen::Ref<const Eigen::MatrixXd> &W,
                                       const Eigen::MatrixXd &X, const Eigen::MatrixXd &dY,
                                       Eigen::Ref<Eigen::MatrixXd> dW,
                                       Eigen::Ref<Eigen::MatrixXd> db) {
  dW += dY * X.transpose();
  db.col(0) += dY.rowwise().sum();
  return W.transpose() * dY;
}

inline Eigen::MatrixXd relu(const Eigen::MatrixXd &X) { return X.cwiseMax(0.0); }

// `pre` is the pre-activation input that was fed to relu.
inline Eigen::MatrixXd relu_backward(const Eigen::MatrixXd &pre, const Eigen::MatrixXd &dY) {
  return ((pre.array() > 0.0).cast<double>() * dY.array()).matrix();
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Columnwise x / ||x||, with dx = (dy - y (y.dy)) / ||x||.
inline Eigen::MatrixXd normalize_columns(const Eigen::MatrixXd &X, Eigen::VectorXd *norms = nullptr) {
  Eigen::VectorXd n = X.colwise().norm().cwiseMax(1e-12);
  if (norms) *norms = n;
  return X.array().rowwise() / n.transpose().array();
}

inline Eigen::MatrixXd normalize_columns_backward(const Eigen::MatrixXd &Y,
                                                  const Eigen::VectorXd &norms,
                                                  const Eigen::MatrixXd &dY) {
  Eigen::RowVectorXd dots = (Y.array() * dY.array()).colwise().sum();
  Eigen::MatrixXd dX = dY - Y * dots.asDiagonal();
  dX.array().rowwise() /= norms.transpose().array();
  return dX;
}

inline double logsumexp(const Eigen::Ref<const Eigen::VectorXd> &v) {
  const double m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

// 3x3 / stride-2 / pad-1 convolution over channel-major column batches.
// Input columns hold `in_ch` contiguous side*side planes (column-major within
// a plane, matching GridImage).
struct ConvShape {
  int in_side = 0;
  int in_ch = 0;
  int out_ch = 0;
  static constexpr int kKernel = 3;
  static constexpr int kStride = 2;
  static constexpr int kPad = 1;

  int out_side() const { return (in_side + 2 * kPad - kKernel) / kStride + 1; }
  int patch_dim() const { return kKernel * kKernel * in_ch; }
  Eigen::Index in_dim() const { return static_cast<Eigen::Index>(in_side) * in_side * in_ch; }
  Eigen::Index out_dim() const {
    return static_cast<Eigen::Index>(out_side()) * out_side() * out_ch;
  }
};

// Gathers 3x3 patches: result is patch_dim x (out_side^2 * batch), column
// (k*out_hw + c*out_side + r) holding the receptive field of output pixel
// (r, c) of item k. Out-of-image taps are zero.
Eigen::MatrixXd im2col(const ConvShape &shape, const Eigen::MatrixXd &X);

// Scatter-adds patch gradients back to input layout (transpose of im2col).
Eigen::MatrixXd col2im(const ConvShape &shape, const Eigen::MatrixXd &dPatches, Eigen::Index batch);

// W: out_ch x patch_dim, b: out_ch x 1. Output columns hold out_ch planes of
// out_side^2 each, i.e. the same channel-major layout as the input.
Eigen::MatrixXd conv2d(const ConvShape &shape, const Eigen::Ref<const Eigen::MatrixXd> &W,
                       const Eigen::Ref<const Eigen::MatrixXd> &b,
                       const Eigen::MatrixXd &patches, Eigen::Index batch);

// Returns dPatches (feed to col2im); adds into dW, db.
Eigen::MatrixXd conv2d_backward(const ConvShape &shape, const Eigen::Ref<const Eigen::MatrixXd> &W,
                                const Eigen::MatrixXd &patches, const Eigen::MatrixXd &dY,
                                Eigen::Ref<Eigen::MatrixXd> dW, Eigen::Ref<Eigen::MatrixXd> db);

}  // namespace piqt::nn
