#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>

#include "peerfx/cutpoints.hpp"
#include "peerfx/math/normal.hpp"
#include "peerfx/network.hpp"
#include "peerfx/parallel.hpp"
#include "peerfx/theta.hpp"

namespace peerfx {

// Beyond these offsets the normal CDF is exactly 0 / 1 in double
// precision for the sums below.
inline constexpr double kTailLo = -39.0;
inline constexpr double kTailHi = 8.5;

/// eta_i = sum_{g'} alpha^{g_i g'} (average u over friends in g') + z_i' beta.
inline Eigen::VectorXd latent_index(const Theta& th, const GroupedNetwork& net,
                                    const DesignMatrix& design,
                                    const Eigen::VectorXd& u) {
  Eigen::VectorXd eta = design.Z * th.beta;
  const int M = net.num_groups();
  for (int i = 0; i < net.n(); ++i) {
    const int g = net.group(i);
    for (int gp = 0; gp < M; ++gp) {
      const double a = th.alpha(g, gp);
      if (a != 0.0) eta[i] += a * net.peer_average(i, gp, u);
    }
  }
  return eta;
}

namespace detail {
inline void check_finite_eta(const Eigen::VectorXd& eta) {
  for (int i = 0; i < eta.size(); ++i)
    if (!std::isfinite(eta[i]))
      throw std::runtime_error("non-finite latent index for agent " +
                               std::to_string(i));
}

/// sum_{t=1}^{R} F(eta - gamma_g(t)); thresholds are increasing, so
/// leading terms saturate at 1 and trailing terms vanish.
inline double cdf_comb(const CutPointSpec& cuts, int g, double eta) {
  const int R = cuts.R();
  double s = 0.0;
  for (int t = 1; t <= R; ++t) {
    const double x = eta - cuts.gamma(g, t);
    if (x > kTailHi) {
      s += 1.0;
    } else if (x < kTailLo) {
      break;
    } else {
      s += norm_cdf(x);
    }
  }
  return s;
}

/// sum_{t=1}^{R} f(eta - gamma_g(t)).
inline double pdf_comb(const CutPointSpec& cuts, int g, double eta) {
  const int R = cuts.R();
  double s = 0.0;
  for (int t = 1; t <= R; ++t) {
    const double x = eta - cuts.gamma(g, t);
    if (x > 39.0) continue;
    if (x < -39.0) break;
    s += norm_pdf(x);
  }
  return s;
}

/// sum_{t=1}^{R} (2t - 1) F(eta - gamma_g(t)).
inline double second_moment_comb(const CutPointSpec& cuts, int g, double eta) {
  const int R = cuts.R();
  double s = 0.0;
  for (int t = 1; t <= R; ++t) {
    const double x = eta - cuts.gamma(g, t);
    if (x > kTailHi) {
      s += 2.0 * t - 1.0;
    } else if (x < kTailLo) {
      break;
    } else {
      s += (2.0 * t - 1.0) * norm_cdf(x);
    }
  }
  return s;
}
}  // namespace detail

/// One application of the expected-outcome mapping L (Bayesian-Nash
/// best-reply in expectations): l_i(u) = sum_t F(eta_i(u) - gamma(t)).
inline Eigen::VectorXd expected_outcome_map(const Theta& th,
                                            const GroupedNetwork& net,
                                            const DesignMatrix& design,
                                            const Eigen::VectorXd& u) {
  const Eigen::VectorXd eta = latent_index(th, net, design, u);
  detail::check_finite_eta(eta);
  Eigen::VectorXd out(net.n());
  parallel_blocks(net.n(), [&](int, int lo, int hi) {
    for (int i = lo; i < hi; ++i)
      out[i] = detail::cdf_comb(th.cuts, net.group(i), eta[i]);
  });
  return out;
}

/// Belief matrix: p_it = F(eta_i - gamma(t)) - F(eta_i - gamma(t+1)),
/// t = 0..R. Rows sum to one by the telescoping boundary conventions.
inline Eigen::MatrixXd choice_probabilities(const Theta& th,
                                            const GroupedNetwork& net,
                                            const DesignMatrix& design,
                                            const Eigen::VectorXd& ye) {
  const Eigen::VectorXd eta = latent_index(th, net, design, ye);
  detail::check_finite_eta(eta);
  const int R = th.cuts.R();
  Eigen::MatrixXd p(net.n(), R + 1);
  parallel_blocks(net.n(), [&](int, int lo, int hi) {
    for (int i = lo; i < hi; ++i) {
      const int g = net.group(i);
      for (int t = 0; t <= R; ++t) {
        const double a = eta[i] - th.cuts.gamma(g, t);
        const double b = eta[i] - th.cuts.gamma(g, t + 1);
        p(i, t) = norm_cdf_diff(a, b);
      }
    }
  });
  return p;
}

/// Unique payoff maximizer given the private shock: the count of
/// thresholds lying at or below eta + eps.
inline int best_response(const Theta& th, int g, double eta_base, double eps) {
  const double v = eta_base + eps;
  const int R = th.cuts.R();
  // thresholds are strictly increasing; binary search for the count of
  // gamma(t) <= v over t = 1..R
  int lo = 0, hi = R;  // answer in [0, R]
  while (lo < hi) {
    const int mid = (lo + hi + 1) / 2;
    if (th.cuts.gamma(g, mid) <= v)
      lo = mid;
    else
      hi = mid - 1;
  }
  return lo;
}

struct EquilibriumState {
  Eigen::VectorXd ye;
  double residual = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Closed-form expected outcome with the peer channel switched off;
/// used as the default starting point.
inline Eigen::VectorXd alpha_off_outcome(const Theta& th,
                                         const GroupedNetwork& net,
                                         const DesignMatrix& design) {
  Theta off = th;
  off.alpha.setZero();
  return expected_outcome_map(off, net, design,
                              Eigen::VectorXd::Zero(net.n()));
}

/// Fixed-point iteration u <- L(u) in the sup norm. Non-convergence is
/// reported, not hidden; NaN anywhere aborts.
inline EquilibriumState solve_equilibrium(
    const Theta& th, const GroupedNetwork& net, const DesignMatrix& design,
    const Eigen::VectorXd* u0 = nullptr, double tol = 1e-9,
    int max_iter = 1000) {
  if (tol <= 0.0) throw std::invalid_argument("tol must be positive");
  EquilibriumState st;
  Eigen::VectorXd u = u0 ? *u0 : alpha_off_outcome(th, net, design);
  for (int it = 1; it <= max_iter; ++it) {
    Eigen::VectorXd un = expected_outcome_map(th, net, design, u);
    if (!un.allFinite())
      throw std::runtime_error("NaN during equilibrium iteration");
    st.residual = (un - u).lpNorm<Eigen::Infinity>();
    st.iterations = it;
    u = std::move(un);
    if (st.residual < tol) {
      st.converged = true;
      break;
    }
  }
  st.ye = std::move(u);
  return st;
}

struct ContractionReport {
  Eigen::VectorXd bound_per_group;   // B_g = max_u sum_t f(u - gamma_g(t))
  Eigen::VectorXd alpha_row_sum;     // sum_{g'} alpha^{gg'}
  double margin = 0.0;               // min_g (1/B_g - row sum)
  bool pass = false;
};

/// Checks the uniqueness condition: sum_{g'} alpha^{gg'} < 1/B_g for
/// every group. B_g is found by a 4096-point scan of the density comb
/// (guards against multiple local peaks) followed by golden-section
/// refinement of the best bracket.
inline ContractionReport contraction_diagnostic(const Theta& th) {
  const int M = th.cuts.M();
  const int R = th.cuts.R();
  ContractionReport rep;
  rep.bound_per_group.resize(M);
  rep.alpha_row_sum = th.alpha.rowwise().sum();
  for (int g = 0; g < M; ++g) {
    const double lo = th.cuts.gamma(g, 1) - 10.0;
    const double hi = th.cuts.gamma(g, R) + 10.0;
    const int ngrid = 4096;
    double best_x = 0.5 * (lo + hi), best_v = -1.0;
    for (int k = 0; k <= ngrid; ++k) {
      const double x = lo + (hi - lo) * k / ngrid;
      const double v = detail::pdf_comb(th.cuts, g, x);
      if (v > best_v) {
        best_v = v;
        best_x = x;
      }
    }
    const double cell = (hi - lo) / ngrid;
    double a = best_x - cell, b = best_x + cell;
    const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
    double c = b - gr * (b - a), d = a + gr * (b - a);
    double fc = detail::pdf_comb(th.cuts, g, c);
    double fd = detail::pdf_comb(th.cuts, g, d);
    while (b - a > 1e-10) {
      if (fc > fd) {
        b = d;
        d = c;
        fd = fc;
        c = b - gr * (b - a);
        fc = detail::pdf_comb(th.cuts, g, c);
      } else {
        a = c;
        c = d;
        fc = fd;
        d = a + gr * (b - a);
        fd = detail::pdf_comb(th.cuts, g, d);
      }
    }
    rep.bound_per_group[g] =
        std::max(best_v, detail::pdf_comb(th.cuts, g, 0.5 * (a + b)));
  }
  rep.margin = std::numeric_limits<double>::infinity();
  rep.pass = true;
  for (int g = 0; g < M; ++g) {
    const double m = 1.0 / rep.bound_per_group[g] - rep.alpha_row_sum[g];
    rep.margin = std::min(rep.margin, m);
    if (m <= 0.0) rep.pass = false;
  }
  return rep;
}

struct ConditionalMoments {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
};

/// Conditional mean and variance of the outcome at a converged
/// equilibrium; the second moment is sum_t (2t-1) F(eta - gamma(t)).
inline ConditionalMoments conditional_moments(const Theta& th,
                                              const GroupedNetwork& net,
                                              const DesignMatrix& design,
                                              const EquilibriumState& eq) {
  if (!eq.converged)
    throw std::invalid_argument("conditional moments require a converged equilibrium");
  const Eigen::VectorXd eta = latent_index(th, net, design, eq.ye);
  ConditionalMoments m;
  m.mean = eq.ye;
  m.variance.resize(net.n());
  for (int i = 0; i < net.n(); ++i) {
    const double second =
        detail::second_moment_comb(th.cuts, net.group(i), eta[i]);
    m.variance[i] = second - eq.ye[i] * eq.ye[i];
  }
  return m;
}

}  // namespace peerfx
