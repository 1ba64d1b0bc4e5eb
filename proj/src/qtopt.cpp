#include "piqt/qtopt.hpp"

#include <cmath>

namespace piqt {

Eigen::VectorXd q_candidates(const Network &net, const Eigen::VectorXd &params,
                             const Eigen::MatrixXd &vis_feat, const Eigen::Vector4d &proprio,
                             int task_index, const Eigen::MatrixXd &actions) {
  const Eigen::Index n = actions.cols();
  const Eigen::MatrixXd feats = vis_feat.replicate(1, n);
  const Eigen::MatrixXd prop = proprio.replicate(1, n);
  std::vector<int> tasks;
  if (net.config().context == ContextKind::Embedding)
    tasks.assign(static_cast<std::size_t>(n), task_index);
  return net.q_values(params, net.encode(params, feats, actions, prop, tasks));
}

BellmanResult bellman_target(const Network &net, const Transition &t, const LaggedParams &lagged,
                             double gamma, const CemConfig &cem, std::mt19937_64 &rng) {
  Eigen::MatrixXd vis(net.config().vis_dim(), 1);
  net.fill_vis_column(t.s_next, t.context, vis.col(0));
  const Eigen::MatrixXd feat1 = net.visual_features(lagged.theta1, vis);

  BellmanResult out;
  out.a_next = cem_select_action(
      [&](const Eigen::MatrixXd &candidates) {
        return q_candidates(net, lagged.theta1, feat1, t.s_next.proprio, t.context.task_index,
                            candidates);
      },
      cem, rng);

  const double q1 = q_candidates(net, lagged.theta1, feat1, t.s_next.proprio,
                                 t.context.task_index, out.a_next)[0];
  const Eigen::MatrixXd feat2 = net.visual_features(lagged.theta2, vis);
  const double q2 = q_candidates(net, lagged.theta2, feat2, t.s_next.proprio,
                                 t.context.task_index, out.a_next)[0];
  out.v_next = std::min(q1, q2);
  out.q_target = t.done ? t.r : std::min(1.0, std::max(0.0, t.r + gamma * out.v_next));
  out.target_version = lagged.source_version;
  return out;
}

double bellman_loss(const Eigen::VectorXd &q_pred, const Eigen::VectorXd &q_target) {
  if (q_pred.size() == 0 || q_pred.size() != q_target.size())
    throw UsageError("Bellman loss needs matching non-empty prediction/target batches");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < q_pred.size(); ++i)
    acc -= q_target[i] * std::log(q_pred[i]) + (1.0 - q_target[i]) * std::log(1.0 - q_pred[i]);
  return acc / static_cast<double>(q_pred.size());
}

LossOutput combined_loss(const Network &net, const std::vector<LabeledSample> &batch,
                         const QtoptConfig &cfg, const Eigen::VectorXd &theta,
                         const LaggedParams &lagged, std::mt19937_64 *rng,
                         Eigen::VectorXd *grad) {
  const auto k = static_cast<Eigen::Index>(batch.size());
  if (k == 0) throw UsageError("combined loss needs a non-empty batch");
  for (const LabeledSample &s : batch)
    if (s.target_version != batch.front().target_version)
      throw UsageError("batch mixes samples labeled under different parameter versions");

  const bool embedding = net.config().context == ContextKind::Embedding;
  Eigen::MatrixXd x_vis(net.config().vis_dim(), k);
  Eigen::MatrixXd x_act(kActionDim, k), x_prop(kProprioDim, k);
  Eigen::VectorXd q_target(k);
  std::vector<int> tasks;
  for (Eigen::Index i = 0; i < k; ++i) {
    const LabeledSample &s = batch[i];
    net.fill_vis_column(s.t.s, s.t.context, x_vis.col(i));
    x_act.col(i) = s.t.a;
    x_prop.col(i) = s.t.s.proprio;
    q_target[i] = s.q_target;
    if (embedding) tasks.push_back(s.t.context.task_index);
  }

  VisCache vis_cache;
  CondCache cond_cache;
  MlpCache q_cache;
  const Eigen::MatrixXd feat = net.visual_features(theta, x_vis, &vis_cache);
  const Eigen::MatrixXd emb = net.encode(theta, feat, x_act, x_prop, tasks, &cond_cache);
  const Eigen::VectorXd q_pred = net.q_values(theta, emb, &q_cache);

  LossOutput out;
  out.bellman = bellman_loss(q_pred, q_target);
  out.td_error_mean = (q_pred - q_target).cwiseAbs().mean();

  if (grad) {
    Eigen::VectorXd dq(k);
    const double kn = static_cast<double>(k);
    for (Eigen::Index i = 0; i < k; ++i)
      dq[i] = cfg.bellman_weight *
              (-q_target[i] / q_pred[i] + (1.0 - q_target[i]) / (1.0 - q_pred[i])) / kn;
    const Eigen::MatrixXd demb = net.q_values_backward(theta, q_cache, dq, *grad);
    const Eigen::MatrixXd dfeat = net.encode_backward(theta, cond_cache, demb, *grad);
    net.visual_features_backward(theta, vis_cache, dfeat, *grad);
  }

  if (cfg.aux_on) {
    CebBatch cb;
    cb.x_vis = std::move(x_vis);
    cb.x_actions = std::move(x_act);
    cb.x_proprio = std::move(x_prop);
    cb.y_vis.resize(net.config().vis_dim(), k);
    cb.y_actions.resize(kActionDim, k);
    cb.y_proprio.resize(kProprioDim, k);
    cb.rewards.resize(k);
    cb.task_index = tasks;
    for (Eigen::Index i = 0; i < k; ++i) {
      const LabeledSample &s = batch[i];
      net.fill_vis_column(s.t.s_next, s.t.context, cb.y_vis.col(i));
      cb.y_actions.col(i) = s.a_next;
      cb.y_proprio.col(i) = s.t.s_next.proprio;
      cb.rewards[i] = s.t.r;
      cb.target_versions.push_back(s.target_version);
    }

    CebOutput ceb;
    if (grad) {
      Eigen::VectorXd ceb_grad = Eigen::VectorXd::Zero(grad->size());
      ceb = ceb_loss(net, cb, cfg.ceb, theta, lagged, rng, &ceb_grad);
      *grad += cfg.ceb_weight * ceb_grad;
    } else {
      ceb = ceb_loss(net, cb, cfg.ceb, theta, lagged, rng, nullptr);
    }
    out.ceb = ceb.loss;
    out.infonce = ceb.infonce;
    out.residual = ceb.residual;
  }

  out.total = cfg.bellman_weight * out.bellman + (cfg.aux_on ? cfg.ceb_weight * out.ceb : 0.0);
  if (!std::isfinite(out.total))
    throw TrainingError("combined loss went non-finite (NaN guard)");
  return out;
}

}  // namespace piqt
