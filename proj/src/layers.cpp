#include "piqt/layers.hpp"

namespace piqt::nn {

Eigen::MatrixXd im2col(const ConvShape &shape, const Eigen::MatrixXd &X) {
  const int S = shape.in_side;
  const int out_s = shape.out_side();
  const Eigen::Index out_hw = static_cast<Eigen::Index>(out_s) * out_s;
  const Eigen::Index batch = X.cols();
  Eigen::MatrixXd patches = Eigen::MatrixXd::Zero(shape.patch_dim(), out_hw * batch);

  for (Eigen::Index k = 0; k < batch; ++k) {
    for (int oc = 0; oc < out_s; ++oc) {
      for (int orow = 0; orow < out_s; ++orow) {
        const Eigen::Index col = k * out_hw + static_cast<Eigen::Index>(oc) * out_s + orow;
        const int r0 = orow * ConvShape::kStride - ConvShape::kPad;
        const int c0 = oc * ConvShape::kStride - ConvShape::kPad;
        for (int ch = 0; ch < shape.in_ch; ++ch) {
          const Eigen::Index plane = static_cast<Eigen::Index>(ch) * S * S;
          for (int kc = 0; kc < ConvShape::kKernel; ++kc) {
            const int c = c0 + kc;
            if (c < 0 || c >= S) continue;
            for (int kr = 0; kr < ConvShape::kKernel; ++kr) {
              const int r = r0 + kr;
              if (r < 0 || r >= S) continue;
              patches(ch * 9 + kc * 3 + kr, col) = X(plane + static_cast<Eigen::Index>(c) * S + r, k);
            }
          }
        }
      }
    }
  }
  return patches;
}

Eigen::MatrixXd col2im(const ConvShape &shape, const Eigen::MatrixXd &dPatches, Eigen::Index batch) {
  const int S = shape.in_side;
  const int out_s = shape.out_side();
  const Eigen::Index out_hw = static_cast<Eigen::Index>(out_s) * out_s;
  Eigen::MatrixXd dX = Eigen::MatrixXd::Zero(shape.in_dim(), batch);

  for (Eigen::Index k = 0; k < batch; ++k) {
    for (int oc = 0; oc < out_s; ++oc) {
      for (int orow = 0; orow < out_s; ++orow) {
        const Eigen::Index col = k * out_hw + static_cast<Eigen::Index>(oc) * out_s + orow;
        const int r0 = orow * ConvShape::kStride - ConvShape::kPad;
        const int c0 = oc * ConvShape::kStride - ConvShape::kPad;
        for (int ch = 0; ch < shape.in_ch; ++ch) {
          const Eigen::Index plane = static_cast<Eigen::Index>(ch) * S * S;
          for (int kc = 0; kc < ConvShape::kKernel; ++kc) {
            const int c = c0 + kc;
            if (c < 0 || c >= S) continue;
            for (int kr = 0; kr < ConvShape::kKernel; ++kr) {
              const int r = r0 + kr;
              if (r < 0 || r >= S) continue;
              dX(plane + static_cast<Eigen::Index>(c) * S + r, k) += dPatches(ch * 9 + kc * 3 + kr, col);
            }
          }
        }
      }
    }
  }
  return dX;
}

Eigen::MatrixXd conv2d(const ConvShape &shape, const Eigen::Ref<const Eigen::MatrixXd> &W,
                       const Eigen::Ref<const Eigen::MatrixXd> &b,
                       const Eigen::MatrixXd &patches, Eigen::Index batch) {
  const int out_s = shape.out_side();
  const Eigen::Index out_hw = static_cast<Eigen::Index>(out_s) * out_s;
  Eigen::MatrixXd lin = (W * patches).colwise() + b.col(0);  // out_ch x (out_hw*batch)

  Eigen::MatrixXd out(out_hw * shape.out_ch, batch);
  for (Eigen::Index k = 0; k < batch; ++k) {
    Eigen::Map<Eigen::MatrixXd>(out.col(k).data(), out_hw, shape.out_ch) =
        lin.middleCols(k * out_hw, out_hw).transpose();
  }
  return out;
}

Eigen::MatrixXd conv2d_backward(const ConvShape &shape, const Eigen::Ref<const Eigen::MatrixXd> &W,
                                const Eigen::MatrixXd &patches, const Eigen::MatrixXd &dY,
                                Eigen::Ref<Eigen::MatrixXd> dW, Eigen::Ref<Eigen::MatrixXd> db) {
  const int out_s = shape.out_side();
  const Eigen::Index out_hw = static_cast<Eigen::Index>(out_s) * out_s;
  const Eigen::Index batch = dY.cols();

  Eigen::MatrixXd dLin(shape.out_ch, out_hw * batch);
  for (Eigen::Index k = 0; k < batch; ++k) {
    dLin.middleCols(k * out_hw, out_hw) =
        Eigen::Map<const Eigen::MatrixXd>(dY.col(k).data(), out_hw, shape.out_ch).transpose();
  }
  dW += dLin * patches.transpose();
  db.col(0) += dLin.rowwise().sum();
  return W.transpose() * dLin;
}

}  // namespace piqt::nn
