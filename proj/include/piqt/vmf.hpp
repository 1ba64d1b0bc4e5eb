#pragma once

#include "piqt/types.hpp"

#include <Eigen/Dense>

#include <random>

namespace piqt {

// von Mises-Fisher distribution on the unit sphere in R^d. Scores are the
// unnormalized log density kappa * mu . z; the Bessel normalizer C_n(kappa) is
// dropped everywhere (it cancels in likelihood ratios and is
// parameter-independent otherwise), which keeps kappa = 8192 finite to work with.
struct VmfDistribution {
  Eigen::VectorXd mu;  // unit vector
  double kappa = 1.0;
};

inline double vmf_score(const Eigen::VectorXd &z, const VmfDistribution &d) {
  return d.kappa * d.mu.dot(z);
}

// Sampling is split so the gradient path stays explicit: the noise is drawn in
// the frame whose mean direction is e1 (radial component w = e1 . z by Wood's
// rejection scheme, tangent direction uniform), then composed with an actual
// mean by the Householder reflection mapping e1 -> mu. The noise carries no
// dependence on mu, so d z / d mu flows only through the composition.
struct VmfNoise {
  double w = 1.0;             // radial component, in [-1, 1]
  Eigen::VectorXd tangent;    // unit vector in R^(d-1)
};

// Throws TrainingError if rejection fails to accept within 1000 rounds.
VmfNoise vmf_draw_noise(int dim, double kappa, std::mt19937_64 &rng);

Eigen::VectorXd vmf_compose(const Eigen::VectorXd &mu, const VmfNoise &noise);

// d loss / d mu for a fixed noise draw, given d loss / d z.
Eigen::VectorXd vmf_compose_backward(const Eigen::VectorXd &mu, const VmfNoise &noise,
                                     const Eigen::VectorXd &dz);

// Convenience: one sample. `deterministic` returns z = mu exactly (the
// kappa -> infinity limit used on the training path).
Eigen::VectorXd vmf_sample(const VmfDistribution &d, std::mt19937_64 &rng,
                           bool deterministic = false);

}  // namespace piqt
