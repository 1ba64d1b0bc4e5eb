#pragma once

#include "piqt/netcore.hpp"
#include "piqt/vmf.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

namespace piqt {

struct CebConfig {
  double beta = 0.01;
  double kappa_e = 8192.0;  // forward encoder concentration
  double kappa_b = 7.0;     // backward encoder concentration
  bool deterministic_forward = true;  // z = mu_e exactly (kappa_e ~ delta)
};

// One conditional-entropy-bottleneck batch: the past X = (s, a) and the future
// Y = (s', a', r), one column per item, both sides sharing the episode context.
// a' is the CEM-optimal next action recorded when the item was labeled.
struct CebBatch {
  Eigen::MatrixXd x_vis, x_actions, x_proprio;
  Eigen::MatrixXd y_vis, y_actions, y_proprio;
  Eigen::VectorXd rewards;
  std::vector<int> task_index;                 // embedding contexts only
  std::vector<std::uint64_t> target_versions;  // lagged version that labeled each item

  Eigen::Index size() const { return x_vis.cols(); }
};

struct CebOutput {
  double loss = 0.0;      // residual - infonce
  double residual = 0.0;  // beta-weighted mean of (kappa_e mu_e.z - kappa_b mu_b.z)
  double infonce = 0.0;   // contrastive I(Y;Z) estimate, nats
  Eigen::MatrixXd scores; // (i, k) = kappa_b * mu_b(y_k) . z_i
};

// mean_i [ S(i,i) - logsumexp_k S(i,k) + log K ] over a K x K score matrix.
// Invariant to a common additive shift of all scores.
double infonce_from_scores(const Eigen::MatrixXd &scores);

// Convenience over explicit samples z (d x K) and backward means mu_b (d x K).
double infonce_estimate(const Eigen::MatrixXd &z, const Eigen::MatrixXd &mu_b, double kappa_b,
                        Eigen::MatrixXd *scores = nullptr);

// The full CEB objective. The forward head runs on theta's trunk; the backward
// head runs theta's own MLP on top of the frozen lagged trunk (theta1).
// Gradients (if requested) are accumulated into `grad`, unweighted: callers
// apply their own loss weight. `rng` is consulted only when
// deterministic_forward is off.
CebOutput ceb_loss(const Network &net, const CebBatch &batch, const CebConfig &cfg,
                   const Eigen::VectorXd &theta, const LaggedParams &lagged,
                   std::mt19937_64 *rng = nullptr, Eigen::VectorXd *grad = nullptr);

}  // namespace piqt
