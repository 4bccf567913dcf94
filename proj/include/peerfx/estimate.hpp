#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "peerfx/likelihood.hpp"
#include "peerfx/math/lbfgs.hpp"
#include "peerfx/math/normal.hpp"
#include "peerfx/math/rng.hpp"
#include "peerfx/model.hpp"
#include "peerfx/network.hpp"
#include "peerfx/theta.hpp"

namespace peerfx {

struct NplSettings {
  double tol_inner = 1e-7;  // sup-norm of the mean log-likelihood gradient
  double tol_outer = 1e-6;  // joint sup-norm change of (theta, u)
  int max_outer = 100;
  int max_inner = 500;
  enum class U0 { kObservedY, kAlphaOff, kCustom };
  U0 u0_policy = U0::kObservedY;
  Eigen::VectorXd u0_custom;

  void validate() const {
    if (tol_inner <= 0.0 || tol_outer <= 0.0)
      throw std::invalid_argument("tolerances must be positive");
  }
};

struct FitResult {
  Theta theta;
  ThetaLayout layout;
  Eigen::VectorXd natural;  // packed [alpha | beta | deltas | tails]
  Eigen::VectorXd u;        // NPL beliefs at the fixed point
  double loglik = 0.0;      // (1/S) sum_i log p_i
  double loglik_sum = 0.0;
  double bic = 0.0;         // -2 sum log p + #params log(n)
  double bic_subnet = 0.0;  // log(S) variant, reported alongside
  int n_params = 0;
  Eigen::MatrixXd vcov;     // natural layout; filled by npl_variance
  bool vcov_pseudo_inverse = false;
  int outer_iterations = 0;
  bool converged = false;
  double fixed_point_residual = 0.0;  // ||u - L(theta, u)||_inf
  double inner_grad_norm = 0.0;
  double contraction_margin = 0.0;
  bool contraction_pass = false;
  double spacing_margin = 0.0;  // min_g,r (spacing - sum_g' alpha^{gg'})
  bool spacing_ok = false;
  std::int64_t floored = 0;
  std::vector<double> loglik_trace;
  std::vector<int> ascent_warnings;
  Verdict ident_verdict = Verdict::kIndeterminate;
  std::string message;
};

namespace detail {

/// Spacing and intercept start values from the empirical outcome
/// distribution: quantile gaps of the per-group marginal, floored so
/// every spacing starts strictly positive.
inline Theta initial_theta(const GroupedNetwork& net,
                           const DesignMatrix& design,
                           const Eigen::VectorXi& y, const ThetaLayout& lay) {
  const int n = net.n();
  const int M = lay.M;
  const int R = lay.R;
  const double floor_sp = 0.05;

  Eigen::MatrixXd deltas =
      Eigen::MatrixXd::Constant(M, lay.switch_r - 1, floor_sp);
  Eigen::VectorXd tail = Eigen::VectorXd::Constant(M, 0.3);

  for (int g = 0; g < M; ++g) {
    std::vector<int> counts(R + 2, 0);
    int ng = 0, maxy = 0;
    for (int i = 0; i < n; ++i) {
      if (net.group(i) != g) continue;
      ++ng;
      ++counts[y[i]];
      maxy = std::max(maxy, y[i]);
    }
    if (ng == 0) continue;
    const int rmax = std::min(maxy + 1, R);
    std::vector<double> qv(rmax + 1, 0.0);
    int cum = 0;
    for (int r = 1; r <= rmax; ++r) {
      cum += counts[r - 1];  // #{y < r}
      const double p =
          std::clamp((cum + 0.5) / (ng + 1.0), 1e-6, 1.0 - 1e-6);
      qv[r] = norm_quantile(p);
      if (r > 1) qv[r] = std::max(qv[r], qv[r - 1] + floor_sp);
    }
    std::vector<double> gaps;
    for (int r = 2; r <= rmax; ++r) gaps.push_back(qv[r] - qv[r - 1]);
    for (int r = 2; r <= lay.switch_r; ++r) {
      const size_t k = static_cast<size_t>(r - 2);
      deltas(g, r - 2) = (k < gaps.size()) ? gaps[k]
                         : (gaps.empty() ? 0.3 : gaps.back());
    }
    // tail start: typical gap beyond the switch point
    double acc = 0.0;
    int cnt = 0;
    for (size_t k = static_cast<size_t>(lay.switch_r - 1); k < gaps.size();
         ++k) {
      acc += gaps[k];
      ++cnt;
    }
    if (cnt > 0)
      tail[g] = std::max(floor_sp, acc / cnt);
    else if (!gaps.empty())
      tail[g] = std::max(floor_sp, gaps.back());
  }

  Theta th;
  th.alpha = Eigen::MatrixXd::Zero(M, M);
  th.beta = Eigen::VectorXd::Zero(lay.P);
  // intercept from the pooled marginal: P(y = 0) = Phi(-beta0) at alpha = 0
  int zeros = 0;
  for (int i = 0; i < n; ++i) zeros += (y[i] == 0);
  const double p0 = std::clamp((zeros + 0.5) / (n + 1.0), 1e-6, 1.0 - 1e-6);
  const double b0 = -norm_quantile(p0);
  for (int c = 0; c < design.intercept_cols; ++c) th.beta[c] = b0;
  th.cuts = CutPointSpec(R, M, lay.switch_r, std::move(deltas), std::move(tail));
  return th;
}

struct InnerResult {
  Eigen::VectorXd natural;
  double value = 0.0;  // mean log-likelihood
  double grad_norm = 0.0;
  bool ok = false;
  bool strict = false;
};

/// One inner maximization of the pseudo-likelihood at fixed beliefs,
/// over log-spacing coordinates, optionally with the alpha block frozen.
inline InnerResult maximize_at_beliefs(const LikelihoodAtBeliefs& lik,
                                       const Eigen::VectorXd& start_natural,
                                       const NplSettings& settings,
                                       bool freeze_alpha) {
  const ThetaLayout& lay = lik.layout();
  std::vector<int> active;
  for (int k = 0; k < lay.dim(); ++k)
    if (!(freeze_alpha && k < lay.n_alpha())) active.push_back(k);

  Eigen::VectorXd full_log = to_log_scale(start_natural, lay);
  Eigen::VectorXd x0(static_cast<int>(active.size()));
  for (size_t k = 0; k < active.size(); ++k)
    x0[static_cast<int>(k)] = full_log[active[k]];

  LbfgsOptions opt;
  opt.max_iter = settings.max_inner;
  opt.gtol = settings.tol_inner;
  auto fn = [&](const Eigen::VectorXd& x, Eigen::VectorXd& grad) {
    return lik.neg_loglik_log_scale(x, active, full_log, grad);
  };
  const LbfgsResult r = lbfgs_minimize(fn, x0, opt);

  for (size_t k = 0; k < active.size(); ++k)
    full_log[active[k]] = r.x[static_cast<int>(k)];
  InnerResult out;
  out.natural = from_log_scale(full_log, lay);
  out.value = -r.f;
  out.grad_norm = r.grad.lpNorm<Eigen::Infinity>();
  out.strict = r.converged;
  // near-stationary points where the line search stalls on floating
  // noise still count as usable
  out.ok = r.converged || out.grad_norm < 100.0 * settings.tol_inner;
  return out;
}

inline double min_spacing_margin(const Theta& th) {
  double m = std::numeric_limits<double>::infinity();
  for (int g = 0; g < th.M(); ++g) {
    const double row = th.alpha.row(g).sum();
    for (int r = 0; r < th.cuts.deltas().cols(); ++r)
      m = std::min(m, th.cuts.deltas()(g, r) - row);
    m = std::min(m, th.cuts.tail()[g] - row);
  }
  return m;
}

}  // namespace detail

/// Nested pseudo-likelihood estimator: alternates a full inner
/// maximization of the pseudo-likelihood with a single application of
/// the expected-outcome mapping, until the joint (theta, u) change
/// falls below the outer tolerance.
inline FitResult npl_estimate(const GroupedNetwork& net,
                              const DesignMatrix& design,
                              const Eigen::VectorXi& y, int R, int switch_r,
                              const NplSettings& settings = {},
                              const Theta* theta0 = nullptr,
                              const Eigen::VectorXd* u0 = nullptr) {
  settings.validate();
  const int n = net.n();
  if (y.size() != n) throw std::invalid_argument("y length != n");
  for (int i = 0; i < n; ++i)
    if (y[i] < 0 || y[i] > R)
      throw std::invalid_argument("outcome out of 0..R at agent " +
                                  std::to_string(i));

  FitResult fit;
  fit.layout = ThetaLayout{net.num_groups(),
                           static_cast<int>(design.Z.cols()), R, switch_r};
  const ThetaLayout& lay = fit.layout;
  fit.n_params = lay.dim();
  fit.ident_verdict = identification_diagnostic(net, design).verdict;

  // starting beliefs
  Eigen::VectorXd u;
  switch (settings.u0_policy) {
    case NplSettings::U0::kObservedY:
      u = y.cast<double>();
      break;
    case NplSettings::U0::kCustom:
      if (settings.u0_custom.size() != n)
        throw std::invalid_argument("custom u0 length != n");
      u = settings.u0_custom;
      break;
    case NplSettings::U0::kAlphaOff:
      u = Eigen::VectorXd::Zero(n);  // replaced after theta init below
      break;
  }

  // starting parameters
  Eigen::VectorXd natural;
  if (theta0) {
    theta0->validate(static_cast<int>(design.Z.cols()));
    natural = pack_natural(*theta0, lay);
  } else {
    Theta init = detail::initial_theta(net, design, y, lay);
    // beta warm-up: ordered fit with the peer block frozen at zero
    LikelihoodAtBeliefs lik0(net, design, y, lay, u);
    auto warm = detail::maximize_at_beliefs(lik0, pack_natural(init, lay),
                                            settings, /*freeze_alpha=*/true);
    natural = warm.natural;
  }
  if (settings.u0_policy == NplSettings::U0::kAlphaOff) {
    u = alpha_off_outcome(unpack_natural(natural, lay), net, design);
  }

  Rng perturb_rng(0x5EEDBEEF);
  int restarts = 0;
  double last_value = -std::numeric_limits<double>::infinity();
  detail::InnerResult inner;

  for (int k = 1; k <= settings.max_outer; ++k) {
    LikelihoodAtBeliefs lik(net, design, y, lay, u);
    inner = detail::maximize_at_beliefs(lik, natural, settings, false);
    while (!inner.ok && restarts < 3) {
      ++restarts;
      Eigen::VectorXd jitter = natural;
      for (int j = 0; j < jitter.size(); ++j)
        jitter[j] += 0.1 * (1.0 + std::fabs(jitter[j])) * perturb_rng.normal() *
                     0.25;
      // spacings must stay positive after the jitter
      for (int j = lay.n_alpha() + lay.P; j < lay.dim(); ++j)
        jitter[j] = std::max(1e-3, std::fabs(jitter[j]));
      inner = detail::maximize_at_beliefs(lik, jitter, settings, false);
    }
    if (!inner.ok) {
      fit.message = "inner optimizer failed after 3 restarts";
      break;
    }

    const double theta_change =
        (inner.natural - natural).lpNorm<Eigen::Infinity>();
    natural = inner.natural;

    const Theta th = unpack_natural(natural, lay);
    Eigen::VectorXd un = expected_outcome_map(th, net, design, u);
    if (!un.allFinite())
      throw std::runtime_error("NaN in beliefs during NPL iteration");
    const double u_change = (un - u).lpNorm<Eigen::Infinity>();
    u = std::move(un);

    fit.loglik_trace.push_back(inner.value);
    if (inner.value < last_value - 1e-8) fit.ascent_warnings.push_back(k);
    last_value = inner.value;
    fit.outer_iterations = k;

    if (std::max(theta_change, u_change) < settings.tol_outer) {
      fit.converged = true;
      break;
    }
  }

  fit.natural = natural;
  fit.theta = unpack_natural(natural, lay);
  fit.u = u;
  fit.inner_grad_norm = inner.ok ? inner.grad_norm : std::nan("");

  // fixed-point certificate
  const Eigen::VectorXd Lu =
      expected_outcome_map(fit.theta, net, design, fit.u);
  fit.fixed_point_residual = (Lu - fit.u).lpNorm<Eigen::Infinity>();

  const LoglikValue ll = pseudo_loglik(fit.theta, fit.u, net, design, y);
  fit.loglik = ll.value;
  fit.loglik_sum = ll.sum;
  fit.floored = ll.floored;
  fit.bic = -2.0 * ll.sum + fit.n_params * std::log(static_cast<double>(n));
  fit.bic_subnet = -2.0 * ll.sum +
                   fit.n_params * std::log(static_cast<double>(net.num_subnets()));

  const ContractionReport cr = contraction_diagnostic(fit.theta);
  fit.contraction_margin = cr.margin;
  fit.contraction_pass = cr.pass;
  fit.spacing_margin = detail::min_spacing_margin(fit.theta);
  fit.spacing_ok = fit.spacing_margin > 0.0;
  if (fit.message.empty())
    fit.message = fit.converged ? "converged" : "outer iteration limit";
  return fit;
}

/// Sandwich covariance of the NPL estimator in the natural layout:
/// (H1 + H2)^{-1} Sigma (H1 + H2)^{-T}, where H1 is the pseudo-
/// likelihood Hessian in theta, H2 picks up the dependence of the
/// fixed-point beliefs on theta through the implicit-function solve
/// (I - dL/du) du/dtheta = dL/dtheta per subnetwork, and Sigma is the
/// conditional variance of the per-agent scores.
inline Eigen::MatrixXd npl_variance(FitResult& fit, const GroupedNetwork& net,
                                    const DesignMatrix& design,
                                    const Eigen::VectorXi& y) {
  if (!fit.converged)
    throw std::invalid_argument("variance requires a converged fit");
  const ThetaLayout& lay = fit.layout;
  const int d = lay.dim();
  LikelihoodAtBeliefs lik(net, design, y, lay, fit.u);

  const Eigen::MatrixXd H1 = lik.hessian_natural(fit.natural);
  const Eigen::MatrixXd Sigma = lik.information_natural(fit.natural);

  Eigen::MatrixXd dq, Jtheta;
  Eigen::VectorXd fstar, q;
  lik.belief_derivative_pieces(fit.natural, dq, fstar, Jtheta, q);

  Eigen::MatrixXd H2 = Eigen::MatrixXd::Zero(d, d);
  for (int s = 0; s < net.num_subnets(); ++s) {
    const auto& mem = net.members(s);
    const int ns = static_cast<int>(mem.size());
    const Eigen::MatrixXd Mw = net.alpha_weighted_matrix(s, fit.theta.alpha);

    Eigen::MatrixXd IJ = -Mw;
    Eigen::MatrixXd Jth_s(ns, d);
    Eigen::MatrixXd dq_s(d, ns);
    for (int a = 0; a < ns; ++a) {
      IJ.row(a) *= fstar[mem[a]];
      IJ(a, a) += 1.0;
      Jth_s.row(a) = Jtheta.row(mem[a]);
      dq_s.col(a) = dq.col(mem[a]);
    }
    const Eigen::MatrixXd U = IJ.partialPivLu().solve(Jth_s);  // ns x d

    // d^2 L / dtheta du' restricted to this subnetwork
    Eigen::MatrixXd A = dq_s * Mw;
    for (int a = 0; a < ns; ++a) {
      const int i = mem[a];
      const int g = net.group(i);
      for (int gp = 0; gp < lay.M; ++gp) {
        const auto& fr = net.friends_in_group(i, gp);
        if (fr.empty()) continue;
        const double w = q[i] / static_cast<double>(fr.size());
        for (int j : fr)
          A(lay.alpha_index(g, gp), net.local_index(j)) += w;
      }
    }
    H2 += A * U;
  }

  const Eigen::MatrixXd B = H1 + H2;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(B);
  Eigen::MatrixXd V;
  if (lu.isInvertible()) {
    const Eigen::MatrixXd Binv = lu.inverse();
    V = Binv * Sigma * Binv.transpose();
    fit.vcov_pseudo_inverse = false;
  } else {
    // singular bread: fall back to the Moore-Penrose inverse and flag it
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(
        B, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    const double tol = d * std::numeric_limits<double>::epsilon() * sv(0);
    Eigen::VectorXd inv = sv;
    for (int k = 0; k < inv.size(); ++k)
      inv[k] = (sv[k] > tol) ? 1.0 / sv[k] : 0.0;
    const Eigen::MatrixXd Bpinv =
        svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
    V = Bpinv * Sigma * Bpinv.transpose();
    fit.vcov_pseudo_inverse = true;
  }
  V = 0.5 * (V + V.transpose()).eval();
  fit.vcov = V;
  return V;
}

struct SwitchTableRow {
  int switch_r = 0;
  double loglik = 0.0;  // (1/S)-normalized
  double bic = 0.0;
  double bic_subnet = 0.0;
  int n_params = 0;
  bool converged = false;
  bool skipped = false;
};

struct SwitchSelection {
  FitResult best;
  std::vector<SwitchTableRow> table;
};

/// Fits the model over a grid of switch points, warm-starting each fit
/// from the previous one, and returns the BIC minimizer. Grid values
/// whose top spacing no observation can reach are skipped.
inline SwitchSelection select_cost_switch(const GroupedNetwork& net,
                                          const DesignMatrix& design,
                                          const Eigen::VectorXi& y, int R,
                                          std::vector<int> grid,
                                          const NplSettings& settings = {}) {
  if (grid.empty()) throw std::invalid_argument("empty switch grid");
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  if (grid.front() != 1)
    throw std::invalid_argument("switch grid must start at 1");
  const int maxy = y.maxCoeff();

  SwitchSelection sel;
  bool have_best = false;
  std::optional<FitResult> prev;
  for (int sw : grid) {
    SwitchTableRow row;
    row.switch_r = sw;
    if (sw > std::min(maxy + 1, R)) {
      row.skipped = true;
      sel.table.push_back(row);
      continue;
    }
    FitResult fit;
    if (prev && prev->converged) {
      // grow the spacing vector from the previous fit's thresholds
      const Theta& pt = prev->theta;
      const int psw = pt.cuts.switch_point();
      Eigen::MatrixXd deltas(pt.M(), sw - 1);
      for (int g = 0; g < pt.M(); ++g)
        for (int r = 2; r <= sw; ++r)
          deltas(g, r - 2) =
              (r <= psw) ? pt.cuts.deltas()(g, r - 2) : pt.cuts.tail()[g];
      Theta start = pt;
      start.cuts = CutPointSpec(R, pt.M(), sw, std::move(deltas), pt.cuts.tail());
      NplSettings s2 = settings;
      s2.u0_policy = NplSettings::U0::kCustom;
      s2.u0_custom = prev->u;
      fit = npl_estimate(net, design, y, R, sw, s2, &start);
    } else {
      fit = npl_estimate(net, design, y, R, sw, settings);
    }
    row.loglik = fit.loglik;
    row.bic = fit.bic;
    row.bic_subnet = fit.bic_subnet;
    row.n_params = fit.n_params;
    row.converged = fit.converged;
    sel.table.push_back(row);
    if (fit.converged) {
      if (!have_best || fit.bic < sel.best.bic) {
        sel.best = fit;
        have_best = true;
      }
      prev = std::move(fit);
    }
  }
  if (!have_best)
    throw std::runtime_error("no converged fit on the switch grid");
  return sel;
}

}  // namespace peerfx
