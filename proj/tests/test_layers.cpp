#include "piqt/layers.hpp"

#include <doctest.h>

#include "test_util.hpp"

using namespace piqt;

namespace {

// Direct nested-loop convolution over the same channel-major column layout:
// pixel (r, c) of channel ch lives at ch*S*S + c*S + r. Written independently
// of the im2col/gemm path so it can act as an oracle for it.
Eigen::MatrixXd naive_conv(const nn::ConvShape &sh, const Eigen::MatrixXd &W,
                           const Eigen::MatrixXd &b, const Eigen::MatrixXd &X) {
  const int S = sh.in_side, OS = sh.out_side();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(sh.out_dim(), X.cols());
  for (Eigen::Index k = 0; k < X.cols(); ++k) {
    for (int o = 0; o < sh.out_ch; ++o) {
      for (int oc = 0; oc < OS; ++oc) {
        for (int orow = 0; orow < OS; ++orow) {
          double acc = b(o, 0);
          for (int ch = 0; ch < sh.in_ch; ++ch) {
            for (int kc = 0; kc < 3; ++kc) {
              for (int kr = 0; kr < 3; ++kr) {
                const int r = orow * nn::ConvShape::kStride - nn::ConvShape::kPad + kr;
                const int c = oc * nn::ConvShape::kStride - nn::ConvShape::kPad + kc;
                if (r < 0 || r >= S || c < 0 || c >= S) continue;
                acc += W(o, ch * 9 + kc * 3 + kr) * X(ch * S * S + c * S + r, k);
              }
            }
          }
          out(o * OS * OS + oc * OS + orow, k) = acc;
        }
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("linear forward and backward agree with finite differences") {
  const Eigen::MatrixXd X = testutil::random_matrix(3, 5, 11);
  Eigen::MatrixXd W = testutil::random_matrix(4, 3, 12);
  Eigen::MatrixXd b = testutil::random_matrix(4, 1, 13);
  const Eigen::MatrixXd C = testutil::random_matrix(4, 5, 14);  // loss = <C, WX+b>

  Eigen::MatrixXd dW = Eigen::MatrixXd::Zero(4, 3), db = Eigen::MatrixXd::Zero(4, 1);
  const Eigen::MatrixXd dX = nn::linear_backward(W, X, C, dW, db);

  // dX = W^T C, dW = C X^T, db = row sums of C -- check each against FD.
  Eigen::VectorXd wflat = Eigen::Map<Eigen::VectorXd>(W.data(), W.size());
  auto loss_w = [&](const Eigen::VectorXd &v) {
    Eigen::MatrixXd Wv = Eigen::Map<const Eigen::MatrixXd>(v.data(), 4, 3);
    return (C.array() * nn::linear(Wv, b, X).array()).sum();
  };
  Eigen::VectorXd dWflat = Eigen::Map<Eigen::VectorXd>(dW.data(), dW.size());
  CHECK(testutil::max_grad_err(loss_w, wflat, dWflat) < 1e-6);

  for (Eigen::Index i = 0; i < X.size(); ++i) {
    Eigen::MatrixXd Xp = X, Xm = X;
    Xp(i) += 1e-5;
    Xm(i) -= 1e-5;
    const double fd = ((C.array() * nn::linear(W, b, Xp).array()).sum() -
                       (C.array() * nn::linear(W, b, Xm).array()).sum()) /
                      2e-5;
    CHECK(testutil::rel_err(fd, dX(i)) < 1e-6);
  }
  CHECK((db.col(0) - C.rowwise().sum()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("relu backward masks by sign of the pre-activation") {
  Eigen::MatrixXd pre(2, 2);
  pre << 1.5, -0.5, 0.0, 2.0;
  Eigen::MatrixXd dY(2, 2);
  dY << 1.0, 1.0, 1.0, 1.0;
  const Eigen::MatrixXd dX = nn::relu_backward(pre, dY);
  CHECK(dX(0, 0) == 1.0);
  CHECK(dX(0, 1) == 0.0);
  CHECK(dX(1, 0) == 0.0);  // exactly-zero pre-activation carries no gradient
  CHECK(dX(1, 1) == 1.0);
}

TEST_CASE("sigmoid is stable and symmetric") {
  CHECK(nn::sigmoid(0.0) == 0.5);
  CHECK(nn::sigmoid(800.0) == doctest::Approx(1.0));
  CHECK(nn::sigmoid(-800.0) == doctest::Approx(0.0));
  CHECK(nn::sigmoid(3.0) + nn::sigmoid(-3.0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("normalize_columns produces unit columns and exact FD gradients") {
  const Eigen::MatrixXd X = testutil::random_matrix(4, 3, 21);
  Eigen::VectorXd norms;
  const Eigen::MatrixXd Y = nn::normalize_columns(X, &norms);
  for (Eigen::Index j = 0; j < Y.cols(); ++j) CHECK(Y.col(j).norm() == doctest::Approx(1.0).epsilon(1e-12));

  const Eigen::MatrixXd C = testutil::random_matrix(4, 3, 22);
  const Eigen::MatrixXd dX = nn::normalize_columns_backward(Y, norms, C);
  for (Eigen::Index i = 0; i < X.size(); ++i) {
    Eigen::MatrixXd Xp = X, Xm = X;
    Xp(i) += 1e-6;
    Xm(i) -= 1e-6;
    const double fd = ((C.array() * nn::normalize_columns(Xp).array()).sum() -
                       (C.array() * nn::normalize_columns(Xm).array()).sum()) /
                      2e-6;
    CHECK(testutil::rel_err(fd, dX(i)) < 1e-5);
  }
}

TEST_CASE("logsumexp matches direct evaluation and survives large inputs") {
  Eigen::VectorXd v(3);
  v << 0.0, 0.0, 0.0;
  CHECK(nn::logsumexp(v) == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  v << 1.0, 2.0, 3.0;
  CHECK(nn::logsumexp(v) ==
        doctest::Approx(std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0))).epsilon(1e-14));
  v << 10000.0, 10000.0, 10000.0;
  CHECK(nn::logsumexp(v) == doctest::Approx(10000.0 + std::log(3.0)).epsilon(1e-14));
}

TEST_CASE("conv2d matches a direct nested-loop convolution") {
  for (int side : {4, 5, 6}) {
    const nn::ConvShape sh{side, 2, 3};
    const Eigen::MatrixXd X = testutil::random_matrix(sh.in_dim(), 3, 31 + side);
    const Eigen::MatrixXd W = testutil::random_matrix(sh.out_ch, sh.patch_dim(), 32 + side);
    const Eigen::MatrixXd b = testutil::random_matrix(sh.out_ch, 1, 33 + side);
    const Eigen::MatrixXd patches = nn::im2col(sh, X);
    const Eigen::MatrixXd got = nn::conv2d(sh, W, b, patches, X.cols());
    const Eigen::MatrixXd want = naive_conv(sh, W, b, X);
    REQUIRE(got.rows() == want.rows());
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("col2im is the adjoint of im2col") {
  const nn::ConvShape sh{5, 2, 3};
  const Eigen::MatrixXd X = testutil::random_matrix(sh.in_dim(), 2, 41);
  const Eigen::MatrixXd P = nn::im2col(sh, X);
  const Eigen::MatrixXd G = testutil::random_matrix(P.rows(), P.cols(), 42);
  const Eigen::MatrixXd back = nn::col2im(sh, G, X.cols());
  // <im2col(X), G> == <X, col2im(G)> for all X, G.
  const double lhs = (P.array() * G.array()).sum();
  const double rhs = (X.array() * back.array()).sum();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("conv2d_backward gradients match finite differences") {
  const nn::ConvShape sh{4, 2, 2};
  const Eigen::MatrixXd X = testutil::random_matrix(sh.in_dim(), 2, 51);
  Eigen::MatrixXd W = testutil::random_matrix(sh.out_ch, sh.patch_dim(), 52);
  const Eigen::MatrixXd b = testutil::random_matrix(sh.out_ch, 1, 53);
  const Eigen::MatrixXd C = testutil::random_matrix(sh.out_dim(), 2, 54);

  const Eigen::MatrixXd patches = nn::im2col(sh, X);
  Eigen::MatrixXd dW = Eigen::MatrixXd::Zero(W.rows(), W.cols());
  Eigen::MatrixXd db = Eigen::MatrixXd::Zero(b.rows(), 1);
  const Eigen::MatrixXd dPatches = nn::conv2d_backward(sh, W, patches, C, dW, db);
  const Eigen::MatrixXd dX = nn::col2im(sh, dPatches, X.cols());

  Eigen::VectorXd wflat = Eigen::Map<Eigen::VectorXd>(W.data(), W.size());
  auto loss_w = [&](const Eigen::VectorXd &v) {
    Eigen::MatrixXd Wv = Eigen::Map<const Eigen::MatrixXd>(v.data(), W.rows(), W.cols());
    return (C.array() * nn::conv2d(sh, Wv, b, patches, X.cols()).array()).sum();
  };
  CHECK(testutil::max_grad_err(loss_w, wflat, Eigen::Map<Eigen::VectorXd>(dW.data(), dW.size())) <
        1e-6);

  for (Eigen::Index i = 0; i < X.size(); ++i) {
    Eigen::MatrixXd Xp = X, Xm = X;
    Xp(i) += 1e-5;
    Xm(i) -= 1e-5;
    const double fp =
        (C.array() * nn::conv2d(sh, W, b, nn::im2col(sh, Xp), X.cols()).array()).sum();
    const double fm =
        (C.array() * nn::conv2d(sh, W, b, nn::im2col(sh, Xm), X.cols()).array()).sum();
    CHECK(testutil::rel_err((fp - fm) / 2e-5, dX(i)) < 1e-6);
  }
}
