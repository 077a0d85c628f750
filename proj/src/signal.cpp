#include "dist/signal.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace dist {

void GradientScheme::validate() const {
  if (!(b_value > 0.0)) throw std::invalid_argument("GradientScheme: b_value must be positive");
  for (const Vec3& u : directions) {
    if (std::abs(u.norm() - 1.0) > 1e-6) {
      throw std::invalid_argument("GradientScheme: non-unit gradient direction");
    }
  }
}

void VoxelModel::canonicalize() {
  std::stable_sort(components.begin(), components.end(),
                   [](const TensorComponent& a, const TensorComponent& b) {
                     return a.tau > b.tau;
                   });
}

double noiseless_signal(const VoxelModel& model, double s0, const GradientScheme& scheme,
                        int u_index) {
  if (model.components.empty()) return s0 * model.isotropic_tau;
  const Vec3& u = scheme.directions[u_index];
  double sum = 0.0;
  for (const TensorComponent& c : model.components) {
    const double proj = u.dot(c.axis.vec());
    sum += c.tau * std::exp(-scheme.b_value * c.alpha * proj * proj);
  }
  return s0 * sum;
}

std::vector<double> noiseless_signals(const VoxelModel& model, double s0,
                                      const GradientScheme& scheme) {
  std::vector<double> out(scheme.size());
  for (int i = 0; i < scheme.size(); ++i) out[i] = noiseless_signal(model, s0, scheme, i);
  return out;
}

double generative_signal(std::span<const GenerativeTensor> tensors, double s0,
                         const GradientScheme& scheme, int u_index) {
  double wsum = 0.0;
  for (const GenerativeTensor& t : tensors) wsum += t.weight;
  if (std::abs(wsum - 1.0) > 1e-9) {
    throw std::invalid_argument("generative_signal: weights must sum to 1");
  }
  const Vec3& u = scheme.directions[u_index];
  double sum = 0.0;
  for (const GenerativeTensor& t : tensors) {
    const double proj = u.dot(t.axis.vec());
    const double quad = t.lambda_minor + (t.lambda_major - t.lambda_minor) * proj * proj;
    sum += t.weight * std::exp(-scheme.b_value * quad);
  }
  return s0 * sum;
}

namespace {

constexpr double kBesselSwitch = 30.0;
constexpr int kAsymptoticTerms = 9;

// Asymptotic correction sum for I_nu: sum_k c_k / x^k with
// c_0 = 1, c_k = -c_{k-1} (4 nu^2 - (2k-1)^2) / (8k).
double asymptotic_correction(double x, double nu) {
  double c = 1.0, sum = 1.0, xp = 1.0;
  for (int k = 1; k <= kAsymptoticTerms; ++k) {
    const double odd = 2.0 * k - 1.0;
    c *= -(4.0 * nu * nu - odd * odd) / (8.0 * k);
    xp *= x;
    sum += c / xp;
  }
  return sum;
}

}  // namespace

double log_bessel_i0(double x) {
  if (x < 0.0) throw std::invalid_argument("log_bessel_i0: negative argument");
  if (x == 0.0) return 0.0;
  if (x < kBesselSwitch) {
    const double q = 0.25 * x * x;
    double term = 1.0, sum = 1.0;
    for (int k = 1; k < 200; ++k) {
      term *= q / (static_cast<double>(k) * k);
      sum += term;
      if (term < sum * 1e-18) break;
    }
    return std::log(sum);
  }
  return x - 0.5 * std::log(2.0 * std::numbers::pi * x) +
         std::log(asymptotic_correction(x, 0.0));
}

double bessel_ratio(double x) {
  if (x < 0.0) throw std::invalid_argument("bessel_ratio: negative argument");
  if (x < 1e-8) return 0.5 * x;  // I1/I0 = x/2 + O(x^3)
  if (x < kBesselSwitch) {
    const double q = 0.25 * x * x;
    double t = 1.0, s0 = 1.0, s1 = 1.0;  // s1 accumulates I1/(x/2) terms
    double t1 = 1.0;
    for (int k = 1; k < 200; ++k) {
      t *= q / (static_cast<double>(k) * k);
      t1 *= q / (static_cast<double>(k) * (k + 1));
      s0 += t;
      s1 += t1;
      if (t < s0 * 1e-18 && t1 < s1 * 1e-18) break;
    }
    return 0.5 * x * s1 / s0;
  }
  return asymptotic_correction(x, 1.0) / asymptotic_correction(x, 0.0);
}

double rician_logpdf(double x, double nu, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("rician_logpdf: sigma must be positive");
  if (nu < 0.0) throw std::invalid_argument("rician_logpdf: nu must be nonnegative");
  if (x <= 0.0) return -std::numeric_limits<double>::infinity();
  const double s2 = sigma * sigma;
  return std::log(x / s2) - (x * x + nu * nu) / (2.0 * s2) + log_bessel_i0(x * nu / s2);
}

double rician_sample(double nu, double sigma, Rng& rng) {
  const double re = nu + sigma * rng.normal();
  const double im = sigma * rng.normal();
  return std::sqrt(re * re + im * im);
}

double log_likelihood(const VoxelModel& model, const VoxelSignal& voxel,
                      const GradientScheme& scheme) {
  double ll = 0.0;
  for (int i = 0; i < scheme.size(); ++i) {
    ll += rician_logpdf(voxel.intensities[i], noiseless_signal(model, voxel.s0, scheme, i),
                        voxel.sigma);
  }
  return ll;
}

std::vector<ComponentGrad> log_likelihood_grad(const VoxelModel& model,
                                               const VoxelSignal& voxel,
                                               const GradientScheme& scheme) {
  const int num = model.num_directions();
  if (num < 1) throw std::invalid_argument("log_likelihood_grad: model has no components");
  const double s2 = voxel.sigma * voxel.sigma;
  const double b = scheme.b_value;

  std::vector<ComponentGrad> grads(num);
  std::vector<std::pair<Vec3, Vec3>> bases(num);
  for (int j = 0; j < num; ++j) bases[j] = tangent_basis(model.components[j].axis);

  for (int i = 0; i < scheme.size(); ++i) {
    const Vec3& u = scheme.directions[i];
    const double mean = noiseless_signal(model, voxel.s0, scheme, i);
    // d/d(mean) of the Rician log-density
    const double g = -mean / s2 +
                     (voxel.intensities[i] / s2) * bessel_ratio(voxel.intensities[i] * mean / s2);
    for (int j = 0; j < num; ++j) {
      const TensorComponent& c = model.components[j];
      const double proj = u.dot(c.axis.vec());
      const double e = std::exp(-b * c.alpha * proj * proj);
      grads[j].d_tau += g * voxel.s0 * e;
      grads[j].d_alpha += g * (-voxel.s0 * c.tau * b * proj * proj * e);
      const double common = g * (-voxel.s0 * c.tau * c.alpha * b * 2.0 * proj * e);
      grads[j].d_axis[0] += common * u.dot(bases[j].first);
      grads[j].d_axis[1] += common * u.dot(bases[j].second);
    }
  }
  return grads;
}

double fractional_anisotropy(double l1, double l2, double l3) {
  const double denom = 2.0 * (l1 * l1 + l2 * l2 + l3 * l3);
  if (!(denom > 0.0)) throw std::invalid_argument("fractional_anisotropy: all-zero eigenvalues");
  const double num = (l1 - l2) * (l1 - l2) + (l2 - l3) * (l2 - l3) + (l3 - l1) * (l3 - l1);
  return std::min(1.0, std::sqrt(num / denom));
}

SingleTensorFit single_tensor_regression_fit(const VoxelSignal& voxel,
                                             const GradientScheme& scheme) {
  const int m = scheme.size();
  if (m < 6) throw std::invalid_argument("single_tensor_regression_fit: needs >= 6 gradients");
  if (!(voxel.s0 > 0.0)) throw std::invalid_argument("single_tensor_regression_fit: s0 <= 0");

  Eigen::MatrixXd design(m, 6);
  Eigen::VectorXd y(m);
  const double floor = 1e-6 * voxel.s0;
  for (int i = 0; i < m; ++i) {
    const Vec3& u = scheme.directions[i];
    design(i, 0) = u[0] * u[0];
    design(i, 1) = u[1] * u[1];
    design(i, 2) = u[2] * u[2];
    design(i, 3) = 2.0 * u[0] * u[1];
    design(i, 4) = 2.0 * u[0] * u[2];
    design(i, 5) = 2.0 * u[1] * u[2];
    y(i) = -std::log(std::max(voxel.intensities[i], floor) / voxel.s0) / scheme.b_value;
  }

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(design, Eigen::ComputeThinU | Eigen::ComputeThinV);
  svd.setThreshold(1e-10);
  if (svd.rank() < 6) {
    throw std::invalid_argument("single_tensor_regression_fit: rank-deficient gradient design");
  }
  const Eigen::VectorXd coef = svd.solve(y);

  SingleTensorFit fit;
  fit.tensor << coef(0), coef(3), coef(4),
                coef(3), coef(1), coef(5),
                coef(4), coef(5), coef(2);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(fit.tensor);
  fit.eigenvalues = Vec3(eig.eigenvalues()(2), eig.eigenvalues()(1), eig.eigenvalues()(0));
  fit.principal = Axis(eig.eigenvectors().col(2));
  const double e0 = fit.eigenvalues[0], e1 = fit.eigenvalues[1], e2 = fit.eigenvalues[2];
  fit.fa = (e0 == 0.0 && e1 == 0.0 && e2 == 0.0) ? 0.0 : fractional_anisotropy(e0, e1, e2);
  return fit;
}

}  // namespace dist
