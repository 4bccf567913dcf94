#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <deque>
#include <functional>
#include <string>

namespace peerfx {

struct LbfgsOptions {
  int max_iter = 500;
  double gtol = 1e-8;       // sup-norm of the gradient
  int history = 8;
  double c1 = 1e-4;         // Armijo
  double c2 = 0.9;          // curvature
  int max_line_iter = 40;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double f = 0.0;
  Eigen::VectorXd grad;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::string message;
};

/// Limited-memory BFGS with a strong-Wolfe line search (bracket + zoom,
/// cubic interpolation). Minimizes fn(x, grad) -> f.
template <typename Fn>
LbfgsResult lbfgs_minimize(Fn&& fn, Eigen::VectorXd x0,
                           const LbfgsOptions& opt = {}) {
  const int d = static_cast<int>(x0.size());
  LbfgsResult res;
  res.x = std::move(x0);
  res.grad.resize(d);
  res.f = fn(res.x, res.grad);
  res.evaluations = 1;
  if (!std::isfinite(res.f)) {
    res.message = "non-finite objective at start";
    return res;
  }

  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;

  Eigen::VectorXd x = res.x, g = res.grad;
  double f = res.f;

  for (int iter = 0; iter < opt.max_iter; ++iter) {
    if (g.lpNorm<Eigen::Infinity>() < opt.gtol) {
      res.converged = true;
      res.message = "gradient tolerance reached";
      break;
    }

    // two-loop recursion
    Eigen::VectorXd q = g;
    const int m = static_cast<int>(s_hist.size());
    Eigen::VectorXd alpha_buf(m);
    for (int k = m - 1; k >= 0; --k) {
      alpha_buf[k] = rho_hist[k] * s_hist[k].dot(q);
      q -= alpha_buf[k] * y_hist[k];
    }
    if (m > 0) {
      const double gam =
          s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
      q *= gam;
    }
    for (int k = 0; k < m; ++k) {
      const double beta = rho_hist[k] * y_hist[k].dot(q);
      q += (alpha_buf[k] - beta) * s_hist[k];
    }
    Eigen::VectorXd dir = -q;
    double dg = dir.dot(g);
    if (!(dg < 0.0)) {  // not a descent direction; restart from steepest
      dir = -g;
      dg = -g.squaredNorm();
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
    }

    // strong Wolfe line search
    const double f0 = f, dg0 = dg;
    double a_prev = 0.0, f_prev = f0;
    double a = (iter == 0 && m == 0) ? std::min(1.0, 1.0 / g.lpNorm<Eigen::Infinity>())
                                     : 1.0;
    double a_max = 1e4;
    Eigen::VectorXd xt(d), gt(d);
    double ft = f0;
    bool ls_ok = false;

    auto eval = [&](double step) {
      xt = x + step * dir;
      ft = fn(xt, gt);
      ++res.evaluations;
      return ft;
    };

    auto zoom = [&](double lo, double f_lo, double hi) {
      for (int zi = 0; zi < opt.max_line_iter; ++zi) {
        double mid = 0.5 * (lo + hi);
        eval(mid);
        const double dgt = gt.dot(dir);
        if (!std::isfinite(ft) || ft > f0 + opt.c1 * mid * dg0 || ft >= f_lo) {
          hi = mid;
        } else {
          if (std::fabs(dgt) <= -opt.c2 * dg0) return true;
          if (dgt * (hi - lo) >= 0.0) hi = lo;
          lo = mid;
          f_lo = ft;
        }
        if (std::fabs(hi - lo) < 1e-16 * std::max(1.0, std::fabs(lo))) break;
      }
      // accept the last point if it at least decreases f
      return std::isfinite(ft) && ft < f0;
    };

    for (int li = 0; li < opt.max_line_iter; ++li) {
      eval(a);
      if (!std::isfinite(ft) || ft > f0 + opt.c1 * a * dg0 ||
          (li > 0 && ft >= f_prev)) {
        ls_ok = zoom(a_prev, f_prev, a);
        break;
      }
      const double dgt = gt.dot(dir);
      if (std::fabs(dgt) <= -opt.c2 * dg0) {
        ls_ok = true;
        break;
      }
      if (dgt >= 0.0) {
        ls_ok = zoom(a, ft, a_prev);
        break;
      }
      a_prev = a;
      f_prev = ft;
      a = std::min(2.0 * a, a_max);
    }

    if (!ls_ok || !std::isfinite(ft) || ft >= f0) {
      res.message = "line search failed";
      break;
    }

    Eigen::VectorXd s = xt - x;
    Eigen::VectorXd yv = gt - g;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(yv));
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > opt.history) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    x = xt;
    f = ft;
    g = gt;
    res.iterations = iter + 1;
  }

  if (!res.converged && res.message.empty()) res.message = "max iterations";
  if (res.converged ||
      (std::isfinite(f) && f <= res.f)) {
    res.x = x;
    res.f = f;
    res.grad = g;
    // re-check tolerance in case the loop exited on max_iter
    if (g.lpNorm<Eigen::Infinity>() < opt.gtol) res.converged = true;
  }
  return res;
}

}  // namespace peerfx
