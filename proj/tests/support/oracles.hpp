#pragma once

// Test-side oracles, kept independent of the library's solver paths:
// the belief-space fixed point iterates the per-outcome probabilities
// directly, the pi oracle composes adjacency sets, and gradients come
// from central finite differences.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <set>
#include <vector>

#include "peerfx/math/rng.hpp"
#include "peerfx/network.hpp"
#include "peerfx/simulate.hpp"
#include "peerfx/theta.hpp"

namespace oracles {

inline double phi_cdf(double x) {
  if (std::isinf(x)) return x > 0 ? 1.0 : 0.0;
  return 0.5 * std::erfc(-x / std::sqrt(2.0));
}

/// Fixed point of the full belief-vector system: iterate the ordered
/// probabilities p_it over all agents and outcomes, recompute expected
/// outcomes, repeat. Returns the implied expected-outcome vector.
inline Eigen::VectorXd belief_space_fixed_point(const peerfx::Theta& th,
                                                const peerfx::GroupedNetwork& net,
                                                const peerfx::DesignMatrix& design,
                                                double tol = 1e-13,
                                                int max_iter = 200000) {
  const int n = net.n();
  const int R = th.cuts.R();
  const int M = net.num_groups();
  Eigen::MatrixXd p = Eigen::MatrixXd::Constant(n, R + 1, 1.0 / (R + 1));
  const Eigen::VectorXd zb = design.Z * th.beta;
  Eigen::MatrixXd pn(n, R + 1);
  for (int it = 0; it < max_iter; ++it) {
    Eigen::VectorXd ye(n);
    for (int i = 0; i < n; ++i) {
      double m = 0.0;
      for (int t = 1; t <= R; ++t) m += t * p(i, t);
      ye[i] = m;
    }
    for (int i = 0; i < n; ++i) {
      const int g = net.group(i);
      double eta = zb[i];
      for (int gp = 0; gp < M; ++gp) {
        const auto& fr = net.friends_in_group(i, gp);
        if (fr.empty()) continue;
        double s = 0.0;
        for (int j : fr) s += ye[j];
        eta += th.alpha(g, gp) * s / fr.size();
      }
      for (int t = 0; t <= R; ++t)
        pn(i, t) = phi_cdf(eta - th.cuts.gamma(g, t)) -
                   phi_cdf(eta - th.cuts.gamma(g, t + 1));
    }
    const double diff = (pn - p).cwiseAbs().maxCoeff();
    p = pn;
    if (diff < tol) break;
  }
  Eigen::VectorXd ye(n);
  for (int i = 0; i < n; ++i) {
    double m = 0.0;
    for (int t = 1; t <= R; ++t) m += t * p(i, t);
    ye[i] = m;
  }
  return ye;
}

/// Friends-of-friends indicator by plain set composition.
inline Eigen::MatrixXd brute_force_pi(const peerfx::GroupedNetwork& net) {
  const int n = net.n();
  const int M = net.num_groups();
  Eigen::MatrixXd pi = Eigen::MatrixXd::Zero(n, M);
  for (int i = 0; i < n; ++i) {
    std::set<int> direct(net.friends(i).begin(), net.friends(i).end());
    std::set<int> two_step;
    for (int j : net.friends(i))
      for (int k : net.friends(j)) two_step.insert(k);
    bool qualifies = false;
    for (int k : two_step)
      if (k != i && !direct.count(k)) qualifies = true;
    if (!qualifies) continue;
    for (int g = 0; g < M; ++g) {
      bool has = false;
      for (int j : direct)
        if (net.group(j) == g) has = true;
      if (has) pi(i, g) = 1.0;
    }
  }
  return pi;
}

inline Eigen::VectorXd central_fd_gradient(
    const std::function<double(const Eigen::VectorXd&)>& f,
    const Eigen::VectorXd& x, double h = 1e-5) {
  Eigen::VectorXd g(x.size());
  for (int k = 0; k < x.size(); ++k) {
    Eigen::VectorXd up = x, dn = x;
    up[k] += h;
    dn[k] -= h;
    g[k] = (f(up) - f(dn)) / (2.0 * h);
  }
  return g;
}

struct Instance {
  peerfx::GroupedNetwork net;
  peerfx::DesignMatrix design;
  peerfx::Theta theta;
  Eigen::VectorXi y;
};

/// Random small instance for property tests. Alpha entries are drawn
/// nonnegative and rescaled to satisfy the contraction bound when
/// `ensure_contraction` is set.
inline Instance random_instance(peerfx::Rng& rng, int max_n, int max_R,
                                int max_M, bool ensure_contraction) {
  const int n = rng.uniform_int(2, max_n);
  const int M = rng.uniform_int(1, max_M);
  const int R = rng.uniform_int(1, max_R);
  const int S = rng.uniform_int(1, 2);
  const int K = rng.uniform_int(1, 2);

  std::vector<int> groups(n), subnet(n);
  for (int i = 0; i < n; ++i) {
    groups[i] = rng.uniform_int(0, M - 1);
    subnet[i] = (S == 1) ? 0 : (i < n / 2 ? 0 : 1);
  }
  std::vector<std::pair<int, int>> edges;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j && subnet[i] == subnet[j] && rng.uniform() < 0.4)
        edges.emplace_back(i, j);

  peerfx::GroupedNetwork net(edges, groups, subnet, M, S);

  Eigen::MatrixXd X(n, K);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < K; ++k) X(i, k) = rng.normal();
  peerfx::DesignMatrix design = peerfx::build_design(net, X);

  const int sw = rng.uniform_int(1, std::min(3, R));
  Eigen::MatrixXd deltas(M, sw - 1);
  for (int g = 0; g < M; ++g)
    for (int r = 0; r < sw - 1; ++r) deltas(g, r) = rng.uniform(0.3, 1.2);
  Eigen::VectorXd tail(M);
  for (int g = 0; g < M; ++g) tail[g] = rng.uniform(0.3, 1.2);

  peerfx::Theta th;
  th.cuts = peerfx::CutPointSpec(R, M, sw, deltas, tail);
  th.alpha.resize(M, M);
  for (int g = 0; g < M; ++g)
    for (int gp = 0; gp < M; ++gp) th.alpha(g, gp) = rng.uniform(0.0, 0.3);
  if (ensure_contraction) {
    const auto rep = peerfx::contraction_diagnostic(th);
    for (int g = 0; g < M; ++g) {
      const double cap = 0.8 / rep.bound_per_group[g];
      const double row = th.alpha.row(g).sum();
      if (row > cap) th.alpha.row(g) *= cap / row;
    }
  }
  th.beta.resize(1 + 2 * K);
  th.beta[0] = rng.uniform(-0.5, 1.5);
  for (int k = 1; k < th.beta.size(); ++k) th.beta[k] = rng.uniform(-0.8, 0.8);

  Eigen::VectorXi y(n);
  for (int i = 0; i < n; ++i) y[i] = rng.uniform_int(0, R);
  return Instance{std::move(net), std::move(design), std::move(th), std::move(y)};
}

}  // namespace oracles
