#include "dist/voxel_fit.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dist/errors.hpp"
#include "dist/optim.hpp"

namespace dist {

namespace {

// d/d(mean) of the Rician log-density at observation x.
double mean_score(double x, double mean, double sigma) {
  const double s2 = sigma * sigma;
  return -mean / s2 + (x / s2) * bessel_ratio(x * mean / s2);
}

// derivative of I1/I0: 1 - R/t - R^2
double bessel_ratio_derivative(double t) {
  if (t < 1e-6) return 0.5;
  const double r = bessel_ratio(t);
  return 1.0 - r / t - r * r;
}

// d^2/d(mean)^2 of the Rician log-density.
double mean_curvature(double x, double mean, double sigma) {
  const double s2 = sigma * sigma;
  return -1.0 / s2 + (x * x / (s2 * s2)) * bessel_ratio_derivative(x * mean / s2);
}

}  // namespace

Eigen::MatrixXd grid_design(const GradientScheme& scheme, std::span<const Axis> grid,
                            double s0, double alpha_tilde_b) {
  Eigen::MatrixXd x(scheme.size(), grid.size());
  for (int i = 0; i < scheme.size(); ++i) {
    const Vec3& u = scheme.directions[i];
    for (size_t k = 0; k < grid.size(); ++k) {
      const double proj = u.dot(grid[k].vec());
      x(i, k) = s0 * std::exp(-alpha_tilde_b * proj * proj);
    }
  }
  return x;
}

GridFit approx_grid_fit(const VoxelSignal& voxel, const GradientScheme& scheme,
                        std::span<const Axis> grid, const FitConfig& cfg) {
  if (grid.empty()) throw std::invalid_argument("approx_grid_fit: empty grid");
  if (!(voxel.s0 > 0.0) || !(voxel.sigma > 0.0)) {
    throw std::invalid_argument("approx_grid_fit: voxel needs s0 > 0 and sigma > 0");
  }
  const int m = scheme.size();
  const int num_grid = static_cast<int>(grid.size());
  const Eigen::MatrixXd design = grid_design(scheme, grid, voxel.s0, cfg.alpha_tilde_b);

  // Least-squares start on bias-corrected intensities: E[S^2] = mean^2 + 2 sigma^2.
  Eigen::VectorXd debiased(m);
  for (int i = 0; i < m; ++i) {
    const double s = voxel.intensities[i];
    debiased(i) = std::sqrt(std::max(s * s - 2.0 * voxel.sigma * voxel.sigma, 0.0));
  }
  Eigen::VectorXd beta = nnls(design, debiased);

  // Multiplicative likelihood steps; zero coefficients stay zero, positive
  // ones move toward the Rician stationarity condition.
  const double s2 = voxel.sigma * voxel.sigma;
  for (int step = 0; step < 5; ++step) {
    const Eigen::VectorXd mean = design * beta;
    Eigen::VectorXd numer = Eigen::VectorXd::Zero(num_grid);
    Eigen::VectorXd denom = Eigen::VectorXd::Zero(num_grid);
    for (int i = 0; i < m; ++i) {
      const double s = voxel.intensities[i];
      const double pull = (s / s2) * bessel_ratio(s * mean(i) / s2);
      const double push = mean(i) / s2;
      for (int k = 0; k < num_grid; ++k) {
        numer(k) += design(i, k) * pull;
        denom(k) += design(i, k) * push;
      }
    }
    for (int k = 0; k < num_grid; ++k) {
      if (beta(k) > 0.0 && denom(k) > 0.0) beta(k) *= numer(k) / denom(k);
    }
  }

  // Active-set Rician polish: projected Newton on the current support with
  // KKT-driven additions. The grid columns are strongly collinear, so an
  // explicit Hessian handles the flat directions a quasi-Newton projection
  // loop cannot.
  const double kkt_tol = 1e-4;
  auto loglik_of = [&](const Eigen::VectorXd& b) {
    const Eigen::VectorXd mean = design * b;
    double ll = 0.0;
    for (int i = 0; i < m; ++i) {
      ll += rician_logpdf(voxel.intensities[i], mean(i), voxel.sigma);
    }
    return ll;
  };
  auto full_gradient = [&](const Eigen::VectorXd& b) {
    const Eigen::VectorXd mean = design * b;
    Eigen::VectorXd gm(m);
    for (int i = 0; i < m; ++i) {
      gm(i) = mean_score(voxel.intensities[i], mean(i), voxel.sigma);
    }
    return Eigen::VectorXd(design.transpose() * gm);
  };

  bool converged = false;
  for (int outer = 0; outer < 60 && !converged; ++outer) {
    std::vector<int> support;
    for (int k = 0; k < num_grid; ++k) {
      if (beta(k) > 0.0) support.push_back(k);
    }

    if (!support.empty()) {
      const int s = static_cast<int>(support.size());
      Eigen::MatrixXd xs(m, s);
      for (int c = 0; c < s; ++c) xs.col(c) = design.col(support[c]);
      Eigen::VectorXd bs(s);
      for (int c = 0; c < s; ++c) bs(c) = beta(support[c]);

      // Two-metric projected Newton (Bertsekas): coordinates pinned at zero
      // with an outward gradient are frozen, Newton runs on the free block
      // with a Levenberg ridge against the near-singular collinear Hessian.
      constexpr double pin_eps = 1e-12;
      for (int it = 0; it < 100; ++it) {
        const Eigen::VectorXd mean = xs * bs;
        Eigen::VectorXd gm(m), hm(m);
        double ll = 0.0;
        for (int i = 0; i < m; ++i) {
          ll += rician_logpdf(voxel.intensities[i], mean(i), voxel.sigma);
          gm(i) = mean_score(voxel.intensities[i], mean(i), voxel.sigma);
          hm(i) = mean_curvature(voxel.intensities[i], mean(i), voxel.sigma);
        }
        const Eigen::VectorXd grad = xs.transpose() * gm;
        std::vector<int> free_idx;
        double proj_norm = 0.0;
        for (int c = 0; c < s; ++c) {
          if (bs(c) <= pin_eps && grad(c) < 0.0) continue;  // pinned at zero
          free_idx.push_back(c);
          proj_norm = std::max(proj_norm, std::abs(grad(c)));
        }
        if (proj_norm < kkt_tol || free_idx.empty()) break;

        const int nf = static_cast<int>(free_idx.size());
        Eigen::MatrixXd xf(m, nf);
        Eigen::VectorXd gf(nf);
        for (int c = 0; c < nf; ++c) {
          xf.col(c) = xs.col(free_idx[c]);
          gf(c) = grad(free_idx[c]);
        }
        const Eigen::MatrixXd h = -(xf.transpose() * hm.asDiagonal() * xf);
        const double diag_scale = std::max(h.trace() / nf, 1e-12);

        bool accepted = false;
        double lambda = 1e-9 * diag_scale;
        for (int damp = 0; damp < 14 && !accepted; ++damp, lambda *= 100.0) {
          Eigen::MatrixXd hd = h;
          hd.diagonal().array() += lambda;
          const Eigen::VectorXd step = hd.ldlt().solve(gf);
          if (!step.allFinite() || step.dot(gf) <= 0.0) continue;
          double t = 1.0;
          for (int ls = 0; ls < 30; ++ls) {
            Eigen::VectorXd trial = bs;
            for (int c = 0; c < nf; ++c) {
              trial(free_idx[c]) =
                  std::clamp(bs(free_idx[c]) + t * step(c), 0.0, 1.0);
            }
            Eigen::VectorXd full = Eigen::VectorXd::Zero(num_grid);
            for (int c = 0; c < s; ++c) full(support[c]) = trial(c);
            if (loglik_of(full) > ll + 1e-4 * grad.dot(trial - bs) - 1e-13) {
              if ((trial - bs).lpNorm<Eigen::Infinity>() < 1e-15) {
                accepted = false;  // numerically stationary
                damp = 14;
                break;
              }
              bs = trial;
              accepted = true;
              break;
            }
            t *= 0.5;
          }
        }
        if (!accepted) break;
      }
      beta.setZero();
      for (int c = 0; c < s; ++c) {
        if (bs(c) > pin_eps) beta(support[c]) = bs(c);
      }
    }

    // KKT over the inactive set: add the strongest positive-gradient column.
    const Eigen::VectorXd grad = full_gradient(beta);
    int worst = -1;
    double worst_g = kkt_tol;
    bool interior_ok = true;
    for (int k = 0; k < num_grid; ++k) {
      if (beta(k) > 0.0) {
        if (std::abs(grad(k)) > kkt_tol) interior_ok = false;
      } else if (grad(k) > worst_g) {
        worst_g = grad(k);
        worst = k;
      }
    }
    if (worst >= 0) {
      beta(worst) = 1e-8;  // enter the support with a seed value
    } else if (interior_ok) {
      converged = true;
    } else {
      break;  // interior stalled below Newton's reach
    }
  }
  if (!converged) {
    std::vector<double> last(beta.data(), beta.data() + beta.size());
    throw ConvergenceError("approx_grid_fit: active-set Newton polish did not converge", last,
                           60);
  }

  GridFit fit;
  fit.grid.assign(grid.begin(), grid.end());
  fit.beta = beta;
  const double cutoff = cfg.support_rel_threshold * beta.maxCoeff();
  if (beta.maxCoeff() > 0.0) {
    for (int k = 0; k < num_grid; ++k) {
      if (beta(k) > cutoff) fit.selected.push_back(k);
    }
  }
  return fit;
}

std::vector<Axis> cluster_selected(const GridFit& fit, int count) {
  const int n = static_cast<int>(fit.selected.size());
  if (count < 1 || count > n) {
    throw std::invalid_argument("cluster_selected: count out of range");
  }
  std::vector<Axis> axes;
  axes.reserve(n);
  for (int k : fit.selected) axes.push_back(fit.grid[k]);
  if (count == n) return axes;
  return pam_cluster(axes, count).mean_axes;
}

namespace {

// Derivative of exp_map(base, t1*e1 + t2*e2) with respect to t_a.
Vec3 chart_derivative(const Vec3& base, const Vec3& e1, const Vec3& e2,
                      const Eigen::Vector2d& theta, int a) {
  const Vec3 u = theta[0] * e1 + theta[1] * e2;
  const double r = u.norm();
  const Vec3& ea = (a == 0) ? e1 : e2;
  if (r < 1e-10) return ea;
  const double sr = std::sin(r), cr = std::cos(r);
  const double ta = theta[a];
  return -sr * (ta / r) * base + ((r * cr - sr) / (r * r)) * (ta / r) * u + (sr / r) * ea;
}

struct Chart {
  std::vector<Vec3> bases;
  std::vector<Vec3> e1, e2;
};

Chart make_chart(std::span<const Axis> axes) {
  Chart ch;
  for (const Axis& a : axes) {
    ch.bases.push_back(a.vec());
    auto [t1, t2] = tangent_basis(a);
    ch.e1.push_back(t1);
    ch.e2.push_back(t2);
  }
  return ch;
}

}  // namespace

RefineResult refine_ml(std::span<const Axis> init_axes, const VoxelSignal& voxel,
                       const GradientScheme& scheme, const FitConfig& cfg) {
  const int count = static_cast<int>(init_axes.size());
  if (count < 1) throw std::invalid_argument("refine_ml: needs at least one axis");
  const double b = scheme.b_value;
  const int m = scheme.size();
  const int dim = 4 * count;  // (tau, b*alpha, theta1, theta2) per component

  Chart chart = make_chart(init_axes);

  Eigen::VectorXd x(dim);
  for (int j = 0; j < count; ++j) {
    x[4 * j + 0] = 1.0 / count;
    x[4 * j + 1] = cfg.alpha_tilde_b;
    x[4 * j + 2] = 0.0;
    x[4 * j + 3] = 0.0;
  }
  Eigen::VectorXd lower(dim), upper(dim);
  for (int j = 0; j < count; ++j) {
    lower[4 * j + 0] = cfg.tau_min;
    upper[4 * j + 0] = 1.0 - cfg.tau_min;
    lower[4 * j + 1] = 0.0;
    upper[4 * j + 1] = cfg.alpha_box_b;
    lower[4 * j + 2] = lower[4 * j + 3] = -4.0;
    upper[4 * j + 2] = upper[4 * j + 3] = 4.0;
  }

  auto objective = [&](const Eigen::VectorXd& p, Eigen::VectorXd& g) {
    g.setZero(dim);
    std::vector<Vec3> axes(count);
    std::vector<Eigen::Vector2d> thetas(count);
    for (int j = 0; j < count; ++j) {
      thetas[j] = Eigen::Vector2d(p[4 * j + 2], p[4 * j + 3]);
      axes[j] = exp_map(chart.bases[j], thetas[j][0] * chart.e1[j] + thetas[j][1] * chart.e2[j]);
    }
    double ll = 0.0;
    for (int i = 0; i < m; ++i) {
      const Vec3& u = scheme.directions[i];
      double mean = 0.0;
      for (int j = 0; j < count; ++j) {
        const double proj = u.dot(axes[j]);
        mean += p[4 * j + 0] * std::exp(-p[4 * j + 1] * proj * proj);
      }
      mean *= voxel.s0;
      ll += rician_logpdf(voxel.intensities[i], mean, voxel.sigma);
      const double gs = mean_score(voxel.intensities[i], mean, voxel.sigma);
      for (int j = 0; j < count; ++j) {
        const double proj = u.dot(axes[j]);
        const double e = std::exp(-p[4 * j + 1] * proj * proj);
        const double tau = p[4 * j + 0];
        g[4 * j + 0] += gs * voxel.s0 * e;
        g[4 * j + 1] += gs * (-voxel.s0 * tau * proj * proj * e);
        const double common = gs * (-voxel.s0 * tau * p[4 * j + 1] * 2.0 * proj * e);
        g[4 * j + 2] +=
            common * u.dot(chart_derivative(chart.bases[j], chart.e1[j], chart.e2[j], thetas[j], 0));
        g[4 * j + 3] +=
            common * u.dot(chart_derivative(chart.bases[j], chart.e1[j], chart.e2[j], thetas[j], 1));
      }
    }
    return ll;
  };

  // The public convergence target is on (tau, alpha, tangent) coordinates;
  // alpha = a/b shrinks the internal a-gradient bound by 1/b.
  BoxOptimOptions opts;
  opts.grad_tolerance = cfg.grad_tol / std::max(1.0, b);
  int budget = cfg.max_iterations;
  bool converged = false;

  for (int round = 0; round < 8 && budget > 0; ++round) {
    opts.max_iterations = budget;
    BoxOptimResult opt = maximize_box_lbfgs(objective, x, lower, upper, opts);
    budget -= std::max(1, opt.iterations);
    x = opt.x;
    converged = opt.converged;

    // Re-center the chart if any axis wandered far from its base.
    bool rebased = false;
    for (int j = 0; j < count; ++j) {
      const Eigen::Vector2d theta(x[4 * j + 2], x[4 * j + 3]);
      if (theta.norm() > 0.8) {
        const Vec3 axis =
            exp_map(chart.bases[j], theta[0] * chart.e1[j] + theta[1] * chart.e2[j]);
        const Axis a(axis);
        chart.bases[j] = a.vec();
        auto [t1, t2] = tangent_basis(a);
        chart.e1[j] = t1;
        chart.e2[j] = t2;
        x[4 * j + 2] = 0.0;
        x[4 * j + 3] = 0.0;
        rebased = true;
      }
    }
    if (!rebased && converged) break;
    if (!rebased && !converged) break;  // budget exhausted or stalled
  }

  // Newton polish on the first-order condition. Ascent steps this close to
  // the optimum fall below the resolution of the likelihood itself, so the
  // line search above cannot certify stationarity; iterating on the gradient
  // can, down to its evaluation noise.
  auto public_proj_grad = [&](const Eigen::VectorXd& p, Eigen::VectorXd& g_int) {
    Eigen::VectorXd g;
    objective(p, g);
    g_int = g;
    Eigen::VectorXd pub = g;
    for (int j = 0; j < count; ++j) pub[4 * j + 1] *= b;  // d/d(alpha) = b * d/d(a)
    for (int i = 0; i < dim; ++i) {
      if (p[i] <= lower[i] && pub[i] > 0.0) pub[i] = 0.0;  // maximization gradient
      if (p[i] >= upper[i] && pub[i] < 0.0) pub[i] = 0.0;
    }
    return pub.norm();
  };

  Eigen::VectorXd g_int(dim);
  double pub_norm = public_proj_grad(x, g_int);
  for (int polish = 0; polish < 12 && pub_norm >= cfg.grad_tol; ++polish) {
    std::vector<int> free_idx;
    for (int i = 0; i < dim; ++i) {
      if (x[i] <= lower[i] && g_int[i] < 0.0) continue;
      if (x[i] >= upper[i] && g_int[i] > 0.0) continue;
      free_idx.push_back(i);
    }
    if (free_idx.empty()) break;
    const int nf = static_cast<int>(free_idx.size());

    // central-difference Hessian of the analytic gradient, free block only
    const double h = 1e-6;
    Eigen::MatrixXd hess(nf, nf);
    for (int c = 0; c < nf; ++c) {
      Eigen::VectorXd xp = x, xm = x;
      xp[free_idx[c]] += h;
      xm[free_idx[c]] -= h;
      Eigen::VectorXd gp(dim), gm(dim);
      objective(xp, gp);
      objective(xm, gm);
      for (int r = 0; r < nf; ++r) {
        hess(r, c) = (gp[free_idx[r]] - gm[free_idx[r]]) / (2.0 * h);
      }
    }
    hess = 0.5 * (hess + hess.transpose().eval());

    bool improved = false;
    double lambda = 1e-10 * std::max(1.0, std::abs(hess.trace()) / nf);
    for (int damp = 0; damp < 6 && !improved; ++damp, lambda *= 1e3) {
      Eigen::MatrixXd a = -hess;
      a.diagonal().array() += lambda;
      Eigen::VectorXd gf(nf);
      for (int c = 0; c < nf; ++c) gf(c) = g_int[free_idx[c]];
      Eigen::VectorXd delta = a.ldlt().solve(gf);
      if (!delta.allFinite()) continue;
      double scale = 1.0;
      for (int half = 0; half < 4 && !improved; ++half, scale *= 0.5) {
        Eigen::VectorXd trial = x;
        for (int c = 0; c < nf; ++c) {
          trial[free_idx[c]] = std::clamp(trial[free_idx[c]] + scale * delta(c),
                                          lower[free_idx[c]], upper[free_idx[c]]);
        }
        Eigen::VectorXd g_trial(dim);
        const double trial_norm = public_proj_grad(trial, g_trial);
        if (trial_norm < pub_norm) {
          x = trial;
          g_int = g_trial;
          pub_norm = trial_norm;
          improved = true;
        }
      }
    }
    if (!improved) break;
  }
  converged = pub_norm < cfg.grad_tol;

  RefineResult result;
  result.converged = converged;
  for (int j = 0; j < count; ++j) {
    TensorComponent c;
    c.tau = x[4 * j + 0];
    c.alpha = x[4 * j + 1] / b;
    const Eigen::Vector2d theta(x[4 * j + 2], x[4 * j + 3]);
    c.axis = Axis(exp_map(chart.bases[j], theta[0] * chart.e1[j] + theta[1] * chart.e2[j]));
    result.model.components.push_back(c);
  }
  result.model.canonicalize();
  result.loglik = log_likelihood(result.model, voxel, scheme);
  return result;
}

std::pair<double, double> fit_isotropic(const VoxelSignal& voxel, const GradientScheme& scheme) {
  if (!(voxel.s0 > 0.0)) throw std::invalid_argument("fit_isotropic: s0 <= 0");
  auto ll_of_tau = [&](double tau) {
    double ll = 0.0;
    for (int i = 0; i < scheme.size(); ++i) {
      ll += rician_logpdf(voxel.intensities[i], voxel.s0 * tau, voxel.sigma);
    }
    return ll;
  };
  const double lo = 1e-4, hi = 1.0 - 1e-4;
  const double tau = golden_section_max(ll_of_tau, lo, hi);
  return {tau, ll_of_tau(tau)};
}

namespace {

VoxelModel merge_close_components(const VoxelModel& model, double merge_angle_rad,
                                  bool* merged_out) {
  VoxelModel out = model;
  bool merged_any = false;
  bool merged = true;
  while (merged && out.components.size() > 1) {
    merged = false;
    const int n = static_cast<int>(out.components.size());
    int bi = -1, bj = -1;
    double best = merge_angle_rad;
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) {
        const double d = geodesic_distance(out.components[i].axis, out.components[j].axis);
        if (d < best) {
          best = d;
          bi = i;
          bj = j;
        }
      }
    }
    if (bi >= 0) {
      TensorComponent& a = out.components[bi];
      const TensorComponent& c = out.components[bj];
      const std::vector<Axis> axes = {a.axis, c.axis};
      const std::vector<double> w = {a.tau, c.tau};
      a.axis = weighted_karcher_mean(axes, w);
      a.alpha = (a.tau * a.alpha + c.tau * c.alpha) / (a.tau + c.tau);
      a.tau += c.tau;
      out.components.erase(out.components.begin() + bj);
      merged = true;
      merged_any = true;
    }
  }
  out.canonicalize();
  if (merged_out != nullptr) *merged_out = merged_any;
  return out;
}

}  // namespace

VoxelEstimate estimate_voxel(const VoxelSignal& voxel, const GradientScheme& scheme,
                             const FitConfig& cfg, std::span<const Axis> grid) {
  const int m = scheme.size();
  VoxelEstimate est;
  est.voxel = voxel.voxel;
  est.pos = voxel.pos;

  const SingleTensorFit screen = single_tensor_regression_fit(voxel, scheme);
  est.fa_screen = screen.fa;

  const auto [iso_tau, iso_ll] = fit_isotropic(voxel, scheme);
  est.trace.iso_tau = iso_tau;
  est.trace.iso_loglik = iso_ll;
  est.trace.iso_bic = bic_isotropic(iso_ll, m);

  auto finish_isotropic = [&]() {
    est.trace.chosen = 0;
    est.model.components.clear();
    est.model.isotropic_tau = iso_tau;
    return est;
  };

  if (screen.fa < cfg.fa_threshold) return finish_isotropic();

  const GridFit gridfit = approx_grid_fit(voxel, scheme, grid, cfg);
  if (gridfit.selected.empty()) return finish_isotropic();

  const double merge_rad = cfg.merge_angle_deg * std::numbers::pi / 180.0;
  const int i_hi = std::min(cfg.i_max, static_cast<int>(gridfit.selected.size()));
  for (int i = 1; i <= i_hi; ++i) {
    const std::vector<Axis> init = cluster_selected(gridfit, i);
    RefineResult refined = refine_ml(init, voxel, scheme, cfg);
    bool merged = false;
    VoxelModel model = merge_close_components(refined.model, merge_rad, &merged);
    const double ll = merged ? log_likelihood(model, voxel, scheme) : refined.loglik;
    FitRecord record;
    record.attempted_count = i;
    record.model = std::move(model);
    record.loglik = ll;
    record.bic = bic(ll, record.model.num_directions(), m);
    record.converged = refined.converged;
    est.trace.records.push_back(std::move(record));
  }

  // argmin BIC; ties go to the smaller model, with the isotropic fit first
  double best_bic = est.trace.iso_bic;
  int best_record = -1;
  for (size_t r = 0; r < est.trace.records.size(); ++r) {
    if (est.trace.records[r].bic < best_bic - 1e-12) {
      best_bic = est.trace.records[r].bic;
      best_record = static_cast<int>(r);
    }
  }
  if (best_record < 0) return finish_isotropic();
  est.model = est.trace.records[best_record].model;
  est.model.isotropic_tau = iso_tau;
  est.trace.chosen = est.model.num_directions();
  return est;
}

VoxelEstimate estimate_voxel(const VoxelSignal& voxel, const GradientScheme& scheme,
                             const FitConfig& cfg) {
  const std::vector<Axis> grid = icosphere_axes(cfg.grid_level);
  return estimate_voxel(voxel, scheme, cfg, grid);
}

std::pair<double, double> estimate_s0_sigma(std::span<const double> b0_values) {
  const int n = static_cast<int>(b0_values.size());
  if (n < 2) throw std::invalid_argument("estimate_s0_sigma: needs >= 2 b0 replicates");

  double m1 = 0.0, m2 = 0.0;
  for (double v : b0_values) {
    m1 += v;
    m2 += v * v;
  }
  m1 /= n;
  m2 /= n;
  const double var = std::max(m2 - m1 * m1, 0.0);
  const double scale = std::sqrt(std::max(m2, 1e-300));
  if (var < 1e-24 * m2) {
    return {m1, 1e-9 * std::max(1.0, m1)};  // degenerate: identical replicates
  }

  const double sigma0 = std::sqrt(std::max(var, 1e-12 * m2));
  const double nu0 = std::sqrt(std::max(m2 - 2.0 * sigma0 * sigma0, 1e-12 * m2));

  // maximize over internally rescaled (nu, sigma)
  auto objective = [&](const Eigen::VectorXd& p, Eigen::VectorXd& g) {
    const double nu = p[0] * scale;
    const double sigma = p[1] * scale;
    const double s2 = sigma * sigma;
    double ll = 0.0, gnu = 0.0, gsig = 0.0;
    for (double x : b0_values) {
      ll += rician_logpdf(x, nu, sigma);
      const double ratio = bessel_ratio(x * nu / s2);
      gnu += -nu / s2 + (x / s2) * ratio;
      gsig += -2.0 / sigma + (x * x + nu * nu) / (s2 * sigma) - 2.0 * x * nu / (s2 * sigma) * ratio;
    }
    g.resize(2);
    g[0] = gnu * scale;
    g[1] = gsig * scale;
    return ll;
  };

  Eigen::VectorXd x0(2), lower(2), upper(2);
  x0 << nu0 / scale, sigma0 / scale;
  lower << 0.0, 1e-12;
  upper << 20.0, 20.0;
  BoxOptimOptions opts;
  opts.grad_tolerance = 1e-9 * scale;
  opts.max_iterations = 400;
  const BoxOptimResult opt = maximize_box_lbfgs(objective, x0, lower, upper, opts);

  // Newton on the score equations; ascent alone cannot certify the 1e-8
  // stationarity the contract promises.
  Eigen::VectorXd x = opt.x;
  Eigen::VectorXd g(2);
  objective(x, g);
  for (int it = 0; it < 20 && g.norm() >= 1e-10 * scale; ++it) {
    const double h = 1e-7;
    Eigen::Matrix2d jac;
    for (int c = 0; c < 2; ++c) {
      Eigen::VectorXd xp = x, xm = x, gp(2), gm(2);
      xp[c] += h;
      xm[c] = std::max(xm[c] - h, lower[c] + 1e-12);
      objective(xp, gp);
      objective(xm, gm);
      jac.col(c) = (gp - gm) / (xp[c] - xm[c]);
    }
    const Eigen::Vector2d delta = jac.fullPivLu().solve(-g);
    if (!delta.allFinite()) break;
    Eigen::VectorXd trial = (x + delta).cwiseMax(lower).cwiseMin(upper);
    Eigen::VectorXd gt(2);
    objective(trial, gt);
    if (gt.norm() >= g.norm()) break;
    x = trial;
    g = gt;
  }
  return {x[0] * scale, x[1] * scale};
}

double pool_sigma(std::vector<double> sigmas) {
  if (sigmas.empty()) throw std::invalid_argument("pool_sigma: empty region");
  const size_t mid = sigmas.size() / 2;
  std::nth_element(sigmas.begin(), sigmas.begin() + mid, sigmas.end());
  double median = sigmas[mid];
  if (sigmas.size() % 2 == 0) {
    const double below = *std::max_element(sigmas.begin(), sigmas.begin() + mid);
    median = 0.5 * (median + below);
  }
  return median;
}

}  // namespace dist
