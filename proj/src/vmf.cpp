#include "piqt/vmf.hpp"

#include <cmath>

namespace piqt {

// Wood (1994) rejection sampler for the radial component of a vMF sample.
VmfNoise vmf_draw_noise(int dim, double kappa, std::mt19937_64 &rng) {
  if (dim < 2) throw UsageError("vMF sampling needs dimension >= 2");
  if (!(kappa > 0.0)) throw UsageError("vMF concentration must be positive");

  const double dm1 = dim - 1.0;
  const double b = (-2.0 * kappa + std::sqrt(4.0 * kappa * kappa + dm1 * dm1)) / dm1;
  const double x0 = (1.0 - b) / (1.0 + b);
  const double c = kappa * x0 + dm1 * std::log(1.0 - x0 * x0);

  std::gamma_distribution<double> gamma(dm1 / 2.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  VmfNoise noise;
  bool accepted = false;
  for (int round = 0; round < 1000; ++round) {
    const double g1 = gamma(rng);
    const double g2 = gamma(rng);
    const double zbeta = g1 / (g1 + g2);
    const double w = (1.0 - (1.0 + b) * zbeta) / (1.0 - (1.0 - b) * zbeta);
    const double u = unif(rng);
    if (kappa * w + dm1 * std::log(1.0 - x0 * w) - c >= std::log(u)) {
      noise.w = w;
      accepted = true;
      break;
    }
  }
  if (!accepted) throw TrainingError("vMF rejection sampling did not accept within 1000 rounds");

  // Uniform direction on the sphere in the tangent space of e1.
  std::normal_distribution<double> gauss(0.0, 1.0);
  noise.tangent.resize(dim - 1);
  double norm2 = 0.0;
  do {
    for (int i = 0; i < dim - 1; ++i) noise.tangent[i] = gauss(rng);
    norm2 = noise.tangent.squaredNorm();
  } while (norm2 == 0.0);
  noise.tangent /= std::sqrt(norm2);
  return noise;
}

namespace {

// Base sample in the e1 frame: (w, sqrt(1-w^2) * tangent).
Eigen::VectorXd base_sample(Eigen::Index dim, const VmfNoise &noise) {
  Eigen::VectorXd base(dim);
  base[0] = noise.w;
  base.tail(dim - 1) = std::sqrt(std::max(0.0, 1.0 - noise.w * noise.w)) * noise.tangent;
  return base;
}

}  // namespace

Eigen::VectorXd vmf_compose(const Eigen::VectorXd &mu, const VmfNoise &noise) {
  const Eigen::Index dim = mu.size();
  if (noise.tangent.size() != dim - 1) throw UsageError("vMF noise dimension mismatch");
  const Eigen::VectorXd base = base_sample(dim, noise);

  Eigen::VectorXd u = -mu;
  u[0] += 1.0;  // u = e1 - mu
  const double n = u.norm();
  if (n < 1e-12) return base;  // mu == e1: the reflection is the identity
  u /= n;
  return base - 2.0 * u * u.dot(base);
}

Eigen::VectorXd vmf_compose_backward(const Eigen::VectorXd &mu, const VmfNoise &noise,
                                     const Eigen::VectorXd &dz) {
  const Eigen::Index dim = mu.size();
  const Eigen::VectorXd base = base_sample(dim, noise);

  Eigen::VectorXd u = -mu;
  u[0] += 1.0;
  const double n = u.norm();
  if (n < 1e-12) return Eigen::VectorXd::Zero(dim);
  const Eigen::VectorXd uhat = u / n;

  // z = base - 2 uhat (uhat . base); reverse through uhat = u/|u|, u = e1 - mu.
  const double alpha = dz.dot(uhat);
  const double gamma = uhat.dot(base);
  const Eigen::VectorXd duhat = -2.0 * (gamma * dz + alpha * base);
  const Eigen::VectorXd du = (duhat - uhat * uhat.dot(duhat)) / n;
  return -du;
}

Eigen::VectorXd vmf_sample(const VmfDistribution &d, std::mt19937_64 &rng, bool deterministic) {
  if (deterministic) return d.mu;
  return vmf_compose(d.mu, vmf_draw_noise(static_cast<int>(d.mu.size()), d.kappa, rng));
}

}  // namespace piqt
