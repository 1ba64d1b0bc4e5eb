#include "piqt/ceb.hpp"

#include <cmath>

namespace piqt {

double infonce_from_scores(const Eigen::MatrixXd &scores) {
  const Eigen::Index k = scores.rows();
  if (k == 0) throw UsageError("InfoNCE needs at least one item");
  if (scores.cols() != k) throw UsageError("InfoNCE score matrix must be square");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < k; ++i)
    acc += scores(i, i) - nn::logsumexp(scores.row(i).transpose());
  return acc / static_cast<double>(k) + std::log(static_cast<double>(k));
}

double infonce_estimate(const Eigen::MatrixXd &z, const Eigen::MatrixXd &mu_b, double kappa_b,
                        Eigen::MatrixXd *scores) {
  if (z.cols() == 0) throw UsageError("InfoNCE needs at least one item");
  if (z.rows() != mu_b.rows() || z.cols() != mu_b.cols())
    throw UsageError("InfoNCE sample/distribution shape mismatch");
  const Eigen::MatrixXd s = kappa_b * (z.transpose() * mu_b);
  if (scores) *scores = s;
  return infonce_from_scores(s);
}

CebOutput ceb_loss(const Network &net, const CebBatch &batch, const CebConfig &cfg,
                   const Eigen::VectorXd &theta, const LaggedParams &lagged,
                   std::mt19937_64 *rng, Eigen::VectorXd *grad) {
  const Eigen::Index k = batch.size();
  if (k == 0) throw UsageError("CEB batch is empty");
  if (batch.y_vis.cols() != k || batch.x_actions.cols() != k || batch.y_actions.cols() != k ||
      batch.rewards.size() != k)
    throw UsageError("CEB batch sides disagree in size");
  for (std::uint64_t v : batch.target_versions)
    if (v != batch.target_versions.front())
      throw UsageError("CEB batch mixes samples labeled under different parameter versions");
  if (!cfg.deterministic_forward && !rng)
    throw UsageError("sampled forward encoder needs an RNG");

  // X side on the live parameters.
  VisCache x_vis_cache;
  CondCache x_cond_cache;
  MlpCache fwd_cache;
  const Eigen::MatrixXd x_feat = net.visual_features(theta, batch.x_vis, &x_vis_cache);
  const Eigen::MatrixXd x_emb = net.encode(theta, x_feat, batch.x_actions, batch.x_proprio,
                                           batch.task_index, &x_cond_cache);
  const Eigen::MatrixXd mu_e = net.forward_mu(theta, x_emb, &fwd_cache);

  std::vector<VmfNoise> noise;
  Eigen::MatrixXd z;
  if (cfg.deterministic_forward) {
    z = mu_e;
  } else {
    z.resize(mu_e.rows(), k);
    noise.reserve(k);
    for (Eigen::Index i = 0; i < k; ++i) {
      noise.push_back(vmf_draw_noise(static_cast<int>(mu_e.rows()), cfg.kappa_e, *rng));
      z.col(i) = vmf_compose(mu_e.col(i), noise.back());
    }
  }

  // Y side: frozen lagged trunk feeding theta's trainable backward MLP.
  MlpCache bwd_cache;
  const Eigen::MatrixXd y_feat = net.visual_features(lagged.theta1, batch.y_vis);
  const Eigen::MatrixXd y_emb =
      net.encode(lagged.theta1, y_feat, batch.y_actions, batch.y_proprio, batch.task_index);
  const Eigen::MatrixXd mu_b = net.backward_mu(theta, y_emb, batch.rewards, &bwd_cache);

  CebOutput out;
  out.scores = cfg.kappa_b * (z.transpose() * mu_b);
  out.infonce = infonce_from_scores(out.scores);
  const double kn = static_cast<double>(k);
  double residual_raw = 0.0;
  for (Eigen::Index i = 0; i < k; ++i)
    residual_raw += cfg.kappa_e * mu_e.col(i).dot(z.col(i)) - out.scores(i, i);
  residual_raw /= kn;
  out.residual = cfg.beta * residual_raw;
  out.loss = out.residual - out.infonce;

  if (!grad) return out;

  // d loss / d scores: the diagonal carries -beta (residual) and +1/K
  // (positive InfoNCE term); every row subtracts its own softmax.
  Eigen::MatrixXd dscores(k, k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const Eigen::VectorXd row = out.scores.row(i).transpose();
    const double lse = nn::logsumexp(row);
    dscores.row(i) = ((row.array() - lse).exp() / kn).matrix().transpose();  // softmax / K
    dscores(i, i) -= (1.0 + cfg.beta) / kn;
  }

  Eigen::MatrixXd dz = cfg.kappa_b * mu_b * dscores.transpose();
  Eigen::MatrixXd dmu_b = cfg.kappa_b * z * dscores;
  Eigen::MatrixXd dmu_e = (cfg.beta * cfg.kappa_e / kn) * z;
  if (cfg.deterministic_forward) {
    dmu_e += (cfg.beta * cfg.kappa_e / kn) * mu_e + dz;
  } else {
    for (Eigen::Index i = 0; i < k; ++i) {
      dz.col(i) += (cfg.beta * cfg.kappa_e / kn) * mu_e.col(i);
      dmu_e.col(i) =
          (cfg.beta * cfg.kappa_e / kn) * z.col(i) + vmf_compose_backward(mu_e.col(i), noise[i], dz.col(i));
    }
  }

  net.backward_mu_backward(theta, bwd_cache, dmu_b, *grad);
  const Eigen::MatrixXd demb = net.forward_mu_backward(theta, fwd_cache, dmu_e, *grad);
  const Eigen::MatrixXd dfeat = net.encode_backward(theta, x_cond_cache, demb, *grad);
  net.visual_features_backward(theta, x_vis_cache, dfeat, *grad);
  return out;
}

}  // namespace piqt
