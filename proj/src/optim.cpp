#include "dist/optim.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <vector>

namespace dist {

namespace {

Eigen::VectorXd clamp_box(const Eigen::VectorXd& x, const Eigen::VectorXd& lo,
                          const Eigen::VectorXd& hi) {
  return x.cwiseMax(lo).cwiseMin(hi);
}

// Gradient with components that point outside an active bound zeroed.
Eigen::VectorXd project_gradient(const Eigen::VectorXd& x, const Eigen::VectorXd& g,
                                 const Eigen::VectorXd& lo, const Eigen::VectorXd& hi) {
  Eigen::VectorXd pg = g;
  for (int i = 0; i < x.size(); ++i) {
    if (x[i] <= lo[i] && g[i] > 0.0) pg[i] = 0.0;  // minimization gradient
    if (x[i] >= hi[i] && g[i] < 0.0) pg[i] = 0.0;
  }
  return pg;
}

}  // namespace

BoxOptimResult maximize_box_lbfgs(const ObjectiveFn& f, const Eigen::VectorXd& x0,
                                  const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                                  const BoxOptimOptions& opts) {
  const int n = static_cast<int>(x0.size());
  Eigen::VectorXd x = clamp_box(x0, lower, upper);

  // minimize -f internally
  Eigen::VectorXd fgrad(n);
  double fval = f(x, fgrad);
  Eigen::VectorXd g = -fgrad;

  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;

  BoxOptimResult result;
  result.converged = false;

  int iter = 0;
  for (; iter < opts.max_iterations; ++iter) {
    const Eigen::VectorXd pg = project_gradient(x, g, lower, upper);
    result.grad_norm = pg.norm();
    if (result.grad_norm < opts.grad_tolerance) {
      result.converged = true;
      break;
    }

    // two-loop recursion
    Eigen::VectorXd d = -g;
    if (!s_hist.empty()) {
      std::vector<double> alpha(s_hist.size());
      for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
        alpha[i] = rho_hist[i] * s_hist[i].dot(d);
        d -= alpha[i] * y_hist[i];
      }
      const double gamma =
          s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
      d *= gamma;
      for (size_t i = 0; i < s_hist.size(); ++i) {
        const double beta = rho_hist[i] * y_hist[i].dot(d);
        d += (alpha[i] - beta) * s_hist[i];
      }
    }
    if (d.dot(g) >= 0.0) {  // not a descent direction; reset
      d = -g;
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
    }

    // backtracking along the projected path
    double t = 1.0;
    Eigen::VectorXd x_new, g_new(n);
    double f_new = fval;
    bool accepted = false;
    for (int ls = 0; ls < 50; ++ls) {
      x_new = clamp_box(x + t * d, lower, upper);
      const Eigen::VectorXd step = x_new - x;
      if (step.norm() < 1e-16 * (1.0 + x.norm())) break;
      Eigen::VectorXd fg(n);
      const double fv = f(x_new, fg);
      const double min_new = -fv;
      const double directional = g.dot(step);
      if (min_new <= -fval + 1e-4 * directional && std::isfinite(min_new)) {
        f_new = fv;
        g_new = -fg;
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      if (s_hist.empty()) break;  // even steepest descent failed; flat region
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      continue;  // retry from steepest descent
    }

    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd yv = g_new - g;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      s_hist.push_back(s);
      y_hist.push_back(yv);
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > opts.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    x = x_new;
    fval = f_new;
    g = g_new;
  }

  result.x = x;
  result.value = fval;
  result.iterations = iter;
  if (!result.converged) {
    const Eigen::VectorXd pg = project_gradient(x, g, lower, upper);
    result.grad_norm = pg.norm();
    result.converged = result.grad_norm < opts.grad_tolerance;
  }
  return result;
}

double golden_section_max(const std::function<double(double)>& f, double lo, double hi,
                          double tol) {
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > 1e-8 * (std::abs(a) + std::abs(b) + 1.0)) {
    if (fc > fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(d);
    }
  }
  double x = 0.5 * (a + b);

  // Newton polish on the finite-difference derivative.
  const double h = 1e-6 * (hi - lo);
  for (int i = 0; i < 8; ++i) {
    const double fp = f(x + h), fm = f(x - h), f0 = f(x);
    const double d1 = (fp - fm) / (2.0 * h);
    const double d2 = (fp - 2.0 * f0 + fm) / (h * h);
    if (!(d2 < 0.0)) break;
    double x_next = x - d1 / d2;
    x_next = std::clamp(x_next, lo, hi);
    if (std::abs(x_next - x) < tol * (1.0 + std::abs(x))) {
      x = x_next;
      break;
    }
    if (f(x_next) < f0) break;
    x = x_next;
  }
  return x;
}

Eigen::VectorXd nnls(const Eigen::MatrixXd& a, const Eigen::VectorXd& y, int max_iterations) {
  const int n = static_cast<int>(a.cols());
  if (max_iterations <= 0) max_iterations = 3 * n + 30;

  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  std::vector<bool> passive(n, false);
  Eigen::VectorXd w = a.transpose() * y;
  const double tol = 1e-10 * std::max(1.0, w.cwiseAbs().maxCoeff());

  auto solve_passive = [&](const std::vector<int>& idx) {
    Eigen::MatrixXd ap(a.rows(), idx.size());
    for (size_t c = 0; c < idx.size(); ++c) ap.col(c) = a.col(idx[c]);
    return Eigen::VectorXd(ap.colPivHouseholderQr().solve(y));
  };

  for (int outer = 0; outer < max_iterations; ++outer) {
    w = a.transpose() * (y - a * x);
    int best = -1;
    double best_w = tol;
    for (int i = 0; i < n; ++i) {
      if (!passive[i] && w[i] > best_w) {
        best_w = w[i];
        best = i;
      }
    }
    if (best < 0) break;
    passive[best] = true;

    for (int inner = 0; inner < max_iterations; ++inner) {
      std::vector<int> idx;
      for (int i = 0; i < n; ++i) {
        if (passive[i]) idx.push_back(i);
      }
      const Eigen::VectorXd z = solve_passive(idx);
      double min_z = std::numeric_limits<double>::infinity();
      for (int i = 0; i < z.size(); ++i) min_z = std::min(min_z, z[i]);
      if (min_z > 0.0) {
        x.setZero();
        for (size_t c = 0; c < idx.size(); ++c) x[idx[c]] = z[c];
        break;
      }
      // shrink toward feasibility and drop zeroed variables
      double step = 1.0;
      for (size_t c = 0; c < idx.size(); ++c) {
        if (z[c] <= 0.0) {
          const double xi = x[idx[c]];
          if (xi - z[c] > 0.0) step = std::min(step, xi / (xi - z[c]));
        }
      }
      for (size_t c = 0; c < idx.size(); ++c) {
        x[idx[c]] += step * (z[c] - x[idx[c]]);
        if (x[idx[c]] <= 1e-14) {
          x[idx[c]] = 0.0;
          passive[idx[c]] = false;
        }
      }
    }
  }
  return x;
}

}  // namespace dist
