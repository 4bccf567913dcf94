#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "peerfx/math/normal.hpp"
#include "peerfx/model.hpp"
#include "peerfx/network.hpp"
#include "peerfx/parallel.hpp"
#include "peerfx/theta.hpp"

namespace peerfx {

inline constexpr double kProbFloor = 1e-300;
inline constexpr double kRatioClamp = 1e12;

/// Peer-average regressors at fixed beliefs u: pbar(i, g') is the
/// average of u over i's friends in group g' (zero when none).
inline Eigen::MatrixXd peer_averages(const GroupedNetwork& net,
                                     const Eigen::VectorXd& u) {
  Eigen::MatrixXd pbar = Eigen::MatrixXd::Zero(net.n(), net.num_groups());
  for (int i = 0; i < net.n(); ++i)
    for (int g = 0; g < net.num_groups(); ++g)
      pbar(i, g) = net.peer_average(i, g, u);
  return pbar;
}

namespace detail {

struct AgentEval {
  double p = 0.0;      // floored choice probability of the observed outcome
  double logp = 0.0;
  double a1 = 0.0, a2 = 0.0;  // eta - gamma(y), eta - gamma(y+1)
  double q1 = 0.0, q2 = 0.0;  // f(a1)/p, f(a2)/p (clamped)
  double h1 = 0.0, h2 = 0.0;  // a1 f(a1)/p, a2 f(a2)/p (0 at infinite a)
  bool floored = false;
};

inline AgentEval eval_agent(const CutPointSpec& cuts, int g, int yi,
                            double eta) {
  AgentEval e;
  e.a1 = eta - cuts.gamma(g, yi);
  e.a2 = eta - cuts.gamma(g, yi + 1);
  double p = norm_cdf_diff(e.a1, e.a2);
  if (p < kProbFloor) {
    p = kProbFloor;
    e.floored = true;
  }
  e.p = p;
  e.logp = std::log(p);
  const double f1 = norm_pdf(e.a1);
  const double f2 = norm_pdf(e.a2);
  e.q1 = std::min(f1 / p, kRatioClamp);
  e.q2 = std::min(f2 / p, kRatioClamp);
  e.h1 = std::isfinite(e.a1) ? std::clamp(e.a1 * f1 / p, -kRatioClamp, kRatioClamp) : 0.0;
  e.h2 = std::isfinite(e.a2) ? std::clamp(e.a2 * f2 / p, -kRatioClamp, kRatioClamp) : 0.0;
  return e;
}

/// Adds w1 * (d/dtheta)[eta - gamma(r1)] + w2 * (d/dtheta)[eta - gamma(r2)]
/// to `out` in the natural layout, where r1 = y and r2 = y + 1.
inline void add_threshold_dirs(const ThetaLayout& lay, int g, int yi,
                               const Eigen::MatrixXd& pbar,
                               const Eigen::MatrixXd& Z, int i, double w1,
                               double w2, Eigen::VectorXd& out) {
  const double we = w1 + w2;
  if (we != 0.0) {
    for (int gp = 0; gp < lay.M; ++gp)
      out[lay.alpha_index(g, gp)] += we * pbar(i, gp);
    for (int k = 0; k < lay.P; ++k) out[lay.beta_index(k)] += we * Z(i, k);
  }
  // -d gamma(r)/d spacings; gamma(r) = sum_{k<=min(r,sw)} delta_k + (r-sw)+ tail
  const int sw = lay.switch_r;
  for (int k = 2; k <= sw; ++k) {
    const double d1 = (yi >= k) ? 1.0 : 0.0;
    const double d2 = (yi + 1 >= k) ? 1.0 : 0.0;
    const double w = w1 * d1 + w2 * d2;
    if (w != 0.0) out[lay.delta_index(g, k)] -= w;
  }
  const double t1 = std::max(0, yi - sw);
  const double t2 = std::max(0, yi + 1 - sw);
  const double wt = w1 * t1 + w2 * t2;
  if (wt != 0.0) out[lay.tail_index(g)] -= wt;
}

/// c = (d/dtheta)[eta - gamma(r)] as a dense vector.
inline void fill_threshold_dir(const ThetaLayout& lay, int g, int r,
                               const Eigen::MatrixXd& pbar,
                               const Eigen::MatrixXd& Z, int i,
                               Eigen::VectorXd& c) {
  c.setZero();
  for (int gp = 0; gp < lay.M; ++gp) c[lay.alpha_index(g, gp)] = pbar(i, gp);
  for (int k = 0; k < lay.P; ++k) c[lay.beta_index(k)] = Z(i, k);
  const int sw = lay.switch_r;
  for (int k = 2; k <= std::min(r, sw); ++k) c[lay.delta_index(g, k)] -= 1.0;
  if (r > sw) c[lay.tail_index(g)] -= static_cast<double>(r - sw);
}

}  // namespace detail

struct LoglikValue {
  double value = 0.0;       // (1/S) sum_i log p_i
  double sum = 0.0;         // sum_i log p_i
  std::int64_t floored = 0; // count of probability-floor events
};

/// Pseudo-likelihood of Eq-style ordered count probabilities at an
/// arbitrary belief vector u (not necessarily the equilibrium).
inline LoglikValue pseudo_loglik(const Theta& th, const Eigen::VectorXd& u,
                                 const GroupedNetwork& net,
                                 const DesignMatrix& design,
                                 const Eigen::VectorXi& y) {
  const int n = net.n();
  if (u.size() != n) throw std::invalid_argument("u length != n");
  if (y.size() != n) throw std::invalid_argument("y length != n");
  if (!u.allFinite()) throw std::invalid_argument("non-finite beliefs u");
  for (int i = 0; i < n; ++i)
    if (y[i] < 0 || y[i] > th.cuts.R())
      throw std::invalid_argument("outcome out of 0..R at agent " +
                                  std::to_string(i));
  const Eigen::VectorXd eta = latent_index(th, net, design, u);
  detail::check_finite_eta(eta);
  LoglikValue out;
  for (int i = 0; i < n; ++i) {
    const auto e = detail::eval_agent(th.cuts, net.group(i), y[i], eta[i]);
    out.sum += e.logp;
    if (e.floored) ++out.floored;
  }
  out.value = out.sum / static_cast<double>(net.num_subnets());
  return out;
}

/// Workspace for the inner maximization and the sandwich pieces: the
/// belief vector is held fixed, so the peer averages become ordinary
/// regressors. All derivative routines use the natural layout
/// [alpha | beta | deltas | tails]; the optimizer-facing entry point
/// applies the log-spacing chain rule.
class LikelihoodAtBeliefs {
 public:
  LikelihoodAtBeliefs(const GroupedNetwork& net, const DesignMatrix& design,
                      const Eigen::VectorXi& y, ThetaLayout lay,
                      const Eigen::VectorXd& u)
      : net_(net), design_(design), y_(y), lay_(lay),
        pbar_(peer_averages(net, u)) {
    if (y_.size() != net_.n()) throw std::invalid_argument("y length != n");
  }

  const ThetaLayout& layout() const { return lay_; }
  const Eigen::MatrixXd& peer_avg() const { return pbar_; }

  Eigen::VectorXd eta(const Eigen::VectorXd& natural) const {
    const int n = net_.n();
    Eigen::VectorXd out(n);
    for (int i = 0; i < n; ++i) {
      const int g = net_.group(i);
      double v = 0.0;
      for (int gp = 0; gp < lay_.M; ++gp)
        v += natural[lay_.alpha_index(g, gp)] * pbar_(i, gp);
      for (int k = 0; k < lay_.P; ++k)
        v += natural[lay_.beta_index(k)] * design_.Z(i, k);
      out[i] = v;
    }
    return out;
  }

  /// Mean log-likelihood (per agent) and its gradient in natural
  /// coordinates. Returns the number of floored probabilities through
  /// `floored` when non-null.
  double mean_loglik_grad(const Eigen::VectorXd& natural,
                          Eigen::VectorXd& grad,
                          std::int64_t* floored = nullptr) const {
    const int n = net_.n();
    const int d = lay_.dim();
    const Theta th = unpack_natural(natural, lay_);
    const Eigen::VectorXd et = eta(natural);

    const int nblocks = (n + 255) / 256;
    std::vector<double> block_val(nblocks, 0.0);
    std::vector<std::int64_t> block_floor(nblocks, 0);
    std::vector<Eigen::VectorXd> block_grad(nblocks);
    parallel_blocks(n, [&](int b, int lo, int hi) {
      block_grad[b] = Eigen::VectorXd::Zero(d);
      for (int i = lo; i < hi; ++i) {
        const int g = net_.group(i);
        const auto e = detail::eval_agent(th.cuts, g, y_[i], et[i]);
        block_val[b] += e.logp;
        if (e.floored) ++block_floor[b];
        detail::add_threshold_dirs(lay_, g, y_[i], pbar_, design_.Z, i, e.q1,
                                   -e.q2, block_grad[b]);
      }
    });
    double val = 0.0;
    std::int64_t fl = 0;
    grad = Eigen::VectorXd::Zero(d);
    for (int b = 0; b < nblocks; ++b) {
      val += block_val[b];
      fl += block_floor[b];
      grad += block_grad[b];
    }
    grad /= static_cast<double>(n);
    if (floored) *floored = fl;
    return val / static_cast<double>(n);
  }

  /// Objective for the minimizer: negative mean log-likelihood over the
  /// log-spacing coordinates, restricted to the `active` coordinates
  /// (inactive ones stay at their value in `full`).
  double neg_loglik_log_scale(const Eigen::VectorXd& xactive,
                              const std::vector<int>& active_idx,
                              Eigen::VectorXd& full_log,
                              Eigen::VectorXd& gactive) const {
    for (size_t k = 0; k < active_idx.size(); ++k)
      full_log[active_idx[k]] = xactive[static_cast<int>(k)];
    const Eigen::VectorXd natural = from_log_scale(full_log, lay_);
    Eigen::VectorXd gnat;
    const double v = mean_loglik_grad(natural, gnat);
    Eigen::VectorXd glog = gnat;
    for (int k = lay_.n_alpha() + lay_.P; k < lay_.dim(); ++k)
      glog[k] *= natural[k];  // d/d log delta = delta * d/d delta
    gactive.resize(static_cast<int>(active_idx.size()));
    for (size_t k = 0; k < active_idx.size(); ++k)
      gactive[static_cast<int>(k)] = -glog[active_idx[k]];
    return -v;
  }

  /// Hessian of sum_i log p_i in natural coordinates.
  Eigen::MatrixXd hessian_natural(const Eigen::VectorXd& natural) const {
    const int n = net_.n();
    const int d = lay_.dim();
    const Theta th = unpack_natural(natural, lay_);
    const Eigen::VectorXd et = eta(natural);
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(d, d);
    Eigen::VectorXd c1(d), c2(d), s(d);
    for (int i = 0; i < n; ++i) {
      const int g = net_.group(i);
      const auto e = detail::eval_agent(th.cuts, g, y_[i], et[i]);
      detail::fill_threshold_dir(lay_, g, y_[i], pbar_, design_.Z, i, c1);
      detail::fill_threshold_dir(lay_, g, y_[i] + 1, pbar_, design_.Z, i, c2);
      s = e.q1 * c1 - e.q2 * c2;
      H.selfadjointView<Eigen::Lower>().rankUpdate(c1, -e.h1);
      H.selfadjointView<Eigen::Lower>().rankUpdate(c2, e.h2);
      H.selfadjointView<Eigen::Lower>().rankUpdate(s, -1.0);
    }
    return Eigen::MatrixXd(H.selfadjointView<Eigen::Lower>());
  }

  /// Conditional information: Sigma = sum_i sum_t p_it s_it s_it',
  /// the exact conditional variance of the per-agent score given the
  /// covariates and beliefs.
  Eigen::MatrixXd information_natural(const Eigen::VectorXd& natural) const {
    const int n = net_.n();
    const int d = lay_.dim();
    const int R = lay_.R;
    const Theta th = unpack_natural(natural, lay_);
    const Eigen::VectorXd et = eta(natural);
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(d, d);
    Eigen::VectorXd c1(d), c2(d), sc(d);
    for (int i = 0; i < n; ++i) {
      const int g = net_.group(i);
      for (int t = 0; t <= R; ++t) {
        const double b1 = et[i] - th.cuts.gamma(g, t);
        const double b2 = et[i] - th.cuts.gamma(g, t + 1);
        if (b1 < kTailLo) break;
        const double pt = norm_cdf_diff(b1, b2);
        if (pt < 1e-14) continue;
        detail::fill_threshold_dir(lay_, g, t, pbar_, design_.Z, i, c1);
        detail::fill_threshold_dir(lay_, g, t + 1, pbar_, design_.Z, i, c2);
        sc = (norm_pdf(b1) * c1 - norm_pdf(b2) * c2) / pt;
        S.selfadjointView<Eigen::Lower>().rankUpdate(sc, pt);
      }
    }
    return Eigen::MatrixXd(S.selfadjointView<Eigen::Lower>());
  }

  /// Pieces for the belief-derivative term of the sandwich:
  /// dq(d x n): column i holds d(q_i)/dtheta where q_i = dlogp_i/deta_i;
  /// fstar: l'_i = sum_t f(eta - gamma(t));
  /// Jtheta(n x d): row i holds d l_i / dtheta'.
  void belief_derivative_pieces(const Eigen::VectorXd& natural,
                                Eigen::MatrixXd& dq, Eigen::VectorXd& fstar,
                                Eigen::MatrixXd& Jtheta,
                                Eigen::VectorXd& q) const {
    const int n = net_.n();
    const int d = lay_.dim();
    const int R = lay_.R;
    const int sw = lay_.switch_r;
    const Theta th = unpack_natural(natural, lay_);
    const Eigen::VectorXd et = eta(natural);
    dq.setZero(d, n);
    Jtheta.setZero(n, d);
    fstar.resize(n);
    q.resize(n);
    Eigen::VectorXd c1(d), c2(d), s(d);
    std::vector<double> pdfs(R + 1);
    for (int i = 0; i < n; ++i) {
      const int g = net_.group(i);
      const auto e = detail::eval_agent(th.cuts, g, y_[i], et[i]);
      q[i] = e.q1 - e.q2;
      detail::fill_threshold_dir(lay_, g, y_[i], pbar_, design_.Z, i, c1);
      detail::fill_threshold_dir(lay_, g, y_[i] + 1, pbar_, design_.Z, i, c2);
      s = e.q1 * c1 - e.q2 * c2;
      dq.col(i) = -e.h1 * c1 + e.h2 * c2 - q[i] * s;

      // density comb and its suffix sums for the mapping derivatives
      double fs = 0.0;
      for (int t = 1; t <= R; ++t) {
        const double x = et[i] - th.cuts.gamma(g, t);
        pdfs[t] = (x > 39.0 || x < -39.0) ? 0.0 : norm_pdf(x);
        fs += pdfs[t];
      }
      fstar[i] = fs;
      for (int gp = 0; gp < lay_.M; ++gp)
        Jtheta(i, lay_.alpha_index(g, gp)) = fs * pbar_(i, gp);
      for (int k = 0; k < lay_.P; ++k)
        Jtheta(i, lay_.beta_index(k)) = fs * design_.Z(i, k);
      double suffix = fs;  // sum_{t >= 1}
      for (int k = 2; k <= sw; ++k) {
        suffix -= pdfs[k - 1];  // now sum_{t >= k}
        Jtheta(i, lay_.delta_index(g, k)) = -suffix;
      }
      double tail_term = 0.0;
      for (int t = sw + 1; t <= R; ++t)
        tail_term += static_cast<double>(t - sw) * pdfs[t];
      Jtheta(i, lay_.tail_index(g)) = -tail_term;
    }
  }

 private:
  const GroupedNetwork& net_;
  const DesignMatrix& design_;
  Eigen::VectorXi y_;
  ThetaLayout lay_;
  Eigen::MatrixXd pbar_;
};

}  // namespace peerfx
