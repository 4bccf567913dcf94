#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "peerfx/estimate.hpp"
#include "peerfx/math/rng.hpp"
#include "peerfx/model.hpp"
#include "peerfx/network.hpp"
#include "peerfx/theta.hpp"

namespace peerfx {

/// f*_i = sum_t f(eta_i - gamma_{g_i}(t)) at the given beliefs.
inline Eigen::VectorXd fstar_vector(const Theta& th, const GroupedNetwork& net,
                                    const DesignMatrix& design,
                                    const Eigen::VectorXd& ye) {
  const Eigen::VectorXd eta = latent_index(th, net, design, ye);
  Eigen::VectorXd f(net.n());
  for (int i = 0; i < net.n(); ++i)
    f[i] = detail::pdf_comb(th.cuts, net.group(i), eta[i]);
  return f;
}

/// Average direct marginal effects with the equilibrium held fixed.
/// Peer effects are reported per group pair: the per-agent effect
/// alpha^{gg'} f*_i applies to agents in group g and is averaged over
/// the whole sample (agents outside g contribute zero).
struct DirectEffects {
  Eigen::MatrixXd peer;        // M x M
  Eigen::VectorXd covariate;   // K (own characteristics)
  Eigen::VectorXd contextual;  // K (friends' averages)
  Eigen::VectorXd fstar;       // per-agent density comb
};

inline DirectEffects direct_marginal_effects(const Theta& th,
                                             const GroupedNetwork& net,
                                             const DesignMatrix& design,
                                             const EquilibriumState& eq) {
  if (!eq.converged)
    throw std::invalid_argument("effects require a converged equilibrium");
  const int n = net.n();
  const int M = net.num_groups();
  const int K = design.K;
  DirectEffects out;
  out.fstar = fstar_vector(th, net, design, eq.ye);
  Eigen::VectorXd group_sum = Eigen::VectorXd::Zero(M);
  for (int i = 0; i < n; ++i) group_sum[net.group(i)] += out.fstar[i];
  out.peer.resize(M, M);
  for (int g = 0; g < M; ++g)
    for (int gp = 0; gp < M; ++gp)
      out.peer(g, gp) = th.alpha(g, gp) * group_sum[g] / n;
  const double mean_f = out.fstar.mean();
  out.covariate.resize(K);
  out.contextual.resize(K);
  for (int k = 0; k < K; ++k) {
    out.covariate[k] = th.beta[design.intercept_cols + k] * mean_f;
    out.contextual[k] = th.beta[design.intercept_cols + K + k] * mean_f;
  }
  return out;
}

/// Total effect of a uniform unit change in covariate k, letting the
/// contextual averages and the equilibrium adjust: per subnetwork,
/// mean of (I - D M)^{-1} D (beta1 1 + beta2 W 1). IME = total - DME.
struct TotalEffect {
  double dme = 0.0;
  double ime = 0.0;
  double total = 0.0;
};

inline TotalEffect indirect_and_total_continuous(const Theta& th,
                                                 const GroupedNetwork& net,
                                                 const DesignMatrix& design,
                                                 const EquilibriumState& eq,
                                                 int k) {
  if (!eq.converged)
    throw std::invalid_argument("effects require a converged equilibrium");
  if (k < 0 || k >= design.K)
    throw std::invalid_argument("covariate index out of range");
  const double b1 = th.beta[design.intercept_cols + k];
  const double b2 = th.beta[design.intercept_cols + design.K + k];
  const Eigen::VectorXd fstar = fstar_vector(th, net, design, eq.ye);

  double acc = 0.0;
  for (int s = 0; s < net.num_subnets(); ++s) {
    const auto& mem = net.members(s);
    const int ns = static_cast<int>(mem.size());
    Eigen::MatrixXd IDM = -net.alpha_weighted_matrix(s, th.alpha);
    Eigen::VectorXd rhs(ns);
    for (int a = 0; a < ns; ++a) {
      const int i = mem[a];
      IDM.row(a) *= fstar[i];
      IDM(a, a) += 1.0;
      const double has_friends = net.friends(i).empty() ? 0.0 : 1.0;
      rhs[a] = fstar[i] * (b1 + b2 * has_friends);
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(IDM);
    if (!lu.isInvertible())
      throw std::runtime_error("singular equilibrium resolvent in subnetwork " +
                               std::to_string(s));
    acc += lu.solve(rhs).sum();
  }
  TotalEffect te;
  te.total = acc / net.n();
  te.dme = b1 * fstar.mean();
  te.ime = te.total - te.dme;
  return te;
}

namespace detail {
inline GroupedNetwork with_groups(const GroupedNetwork& net,
                                  const std::vector<int>& groups, int M) {
  std::vector<std::pair<int, int>> edges;
  for (int i = 0; i < net.n(); ++i)
    for (int j : net.friends(i)) edges.emplace_back(i, j);
  return GroupedNetwork(edges, groups, net.subnets(), M, net.num_subnets());
}
}  // namespace detail

/// Discrete (0/1) variable: per agent, flip the value, rebuild the
/// contextual averages, re-solve the equilibrium, and accumulate the
/// signed change so every term measures the 0 -> 1 direction.
inline TotalEffect indirect_and_total_discrete(const Theta& th,
                                               const GroupedNetwork& net,
                                               const DesignMatrix& design,
                                               const EquilibriumState& eq,
                                               int k, double tol = 1e-10) {
  if (!eq.converged)
    throw std::invalid_argument("effects require a converged equilibrium");
  const int n = net.n();
  for (int i = 0; i < n; ++i)
    if (design.X(i, k) != 0.0 && design.X(i, k) != 1.0)
      throw std::invalid_argument("discrete effects need a 0/1 covariate");
  const double b1 = th.beta[design.intercept_cols + k];
  const Eigen::VectorXd eta = latent_index(th, net, design, eq.ye);

  double dme = 0.0, total = 0.0;
  for (int j = 0; j < n; ++j) {
    const double sign = (design.X(j, k) == 0.0) ? 1.0 : -1.0;
    // direct piece: own index shifts by beta1, equilibrium fixed
    const double flipped =
        detail::cdf_comb(th.cuts, net.group(j), eta[j] + sign * b1);
    const double base = detail::cdf_comb(th.cuts, net.group(j), eta[j]);
    dme += sign * (flipped - base);

    DesignMatrix dflip = design;
    Eigen::MatrixXd Xf = design.X;
    Xf(j, k) = 1.0 - Xf(j, k);
    dflip = build_design(net, Xf, design.fixed_effects);
    const EquilibriumState eqf =
        solve_equilibrium(th, net, dflip, &eq.ye, tol, 1000);
    if (!eqf.converged)
      throw std::runtime_error("equilibrium failed while flipping agent " +
                               std::to_string(j));
    total += sign * (eqf.ye - eq.ye).sum();
  }
  TotalEffect te;
  te.dme = dme / n;
  te.total = total / n;
  te.ime = te.total - te.dme;
  return te;
}

/// Delta-method standard errors: central finite differences of
/// effect_fn over the natural parameters, against the fit's sandwich
/// covariance.
inline Eigen::VectorXd delta_method_se(
    const FitResult& fit,
    const std::function<Eigen::VectorXd(const Theta&)>& effect_fn,
    double step_scale = 1.0) {
  if (fit.vcov.size() == 0)
    throw std::invalid_argument("fit has no covariance; run npl_variance first");
  const ThetaLayout& lay = fit.layout;
  const int d = lay.dim();
  const Eigen::VectorXd base = fit.natural;
  Eigen::MatrixXd J;
  for (int kk = 0; kk < d; ++kk) {
    const double h = step_scale * std::max(1e-6, 1e-6 * std::fabs(base[kk]));
    Eigen::VectorXd up = base, dn = base;
    up[kk] += h;
    dn[kk] -= h;
    const Eigen::VectorXd fu = effect_fn(unpack_natural(up, lay));
    const Eigen::VectorXd fd = effect_fn(unpack_natural(dn, lay));
    if (kk == 0) J.resize(fu.size(), d);
    J.col(kk) = (fu - fd) / (2.0 * h);
  }
  if (!J.allFinite())
    throw std::runtime_error("non-finite Jacobian in delta method");
  const Eigen::MatrixXd JVJ = J * fit.vcov * J.transpose();
  return JVJ.diagonal().cwiseMax(0.0).cwiseSqrt();
}

/// Group-composition counterfactual: redraw group labels to hit each
/// target share of group 2 (exact count per subnetwork), optionally
/// mirror the label into a 0/1 covariate column, re-solve the
/// equilibrium at fixed parameters, and report the average expected
/// outcome. Only parameter uncertainty enters the standard errors;
/// the label draw is held fixed given (share, seed).
struct CounterfactualPoint {
  double share = 0.0;
  double mean = 0.0;
  double se = 0.0;
  bool converged = false;
};

struct CounterfactualOptions {
  int group_covariate = -1;       // X column mirroring the group dummy
  bool with_se = false;
  double tol = 1e-9;
  // custom assignment: (share, rng) -> 0/1 label per agent
  std::function<std::vector<int>(double, Rng&)> assignment;
};

inline std::vector<CounterfactualPoint> counterfactual(
    const FitResult& fit, const GroupedNetwork& net, const Eigen::MatrixXd& X,
    const std::vector<double>& shares, std::uint64_t seed,
    const CounterfactualOptions& opts = {}) {
  const int n = net.n();
  const int M = fit.theta.M();

  auto default_assignment = [&](double share, Rng& rng) {
    std::vector<int> labels(n, 0);
    for (int s = 0; s < net.num_subnets(); ++s) {
      const auto& mem = net.members(s);
      const int ns = static_cast<int>(mem.size());
      const int n2 = static_cast<int>(std::lround(share * ns));
      std::vector<int> order(mem.begin(), mem.end());
      for (int a = ns - 1; a > 0; --a)
        std::swap(order[a], order[rng.uniform_int(0, a)]);
      for (int a = 0; a < std::min(n2, ns); ++a) labels[order[a]] = 1;
    }
    return labels;
  };

  auto evaluate = [&](const Theta& th, const std::vector<int>& labels,
                      const Eigen::VectorXd* warm) {
    std::vector<int> gl(n, 0);
    if (M == 2) gl = labels;
    GroupedNetwork cnet = detail::with_groups(net, gl, M);
    Eigen::MatrixXd Xc = X;
    if (opts.group_covariate >= 0)
      for (int i = 0; i < n; ++i)
        Xc(i, opts.group_covariate) = static_cast<double>(labels[i]);
    DesignMatrix dc = build_design(cnet, Xc, false);
    const EquilibriumState eq =
        solve_equilibrium(th, cnet, dc, warm, opts.tol, 1000);
    if (!eq.converged) throw std::runtime_error("counterfactual equilibrium failed");
    return eq.ye.mean();
  };

  std::vector<CounterfactualPoint> curve;
  for (size_t si = 0; si < shares.size(); ++si) {
    CounterfactualPoint pt;
    pt.share = shares[si];
    Rng rng = Rng::stream(seed, si);
    const std::vector<int> labels = opts.assignment
                                        ? opts.assignment(pt.share, rng)
                                        : default_assignment(pt.share, rng);
    try {
      pt.mean = evaluate(fit.theta, labels, nullptr);
      if (opts.with_se) {
        auto fn = [&](const Theta& th) {
          return Eigen::VectorXd::Constant(1, evaluate(th, labels, nullptr));
        };
        pt.se = delta_method_se(fit, fn)[0];
      }
      pt.converged = true;
    } catch (const std::exception&) {
      pt.converged = false;
    }
    curve.push_back(pt);
  }
  return curve;
}

}  // namespace peerfx
