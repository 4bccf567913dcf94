#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "peerfx/math/rng.hpp"
#include "peerfx/model.hpp"
#include "peerfx/network.hpp"
#include "peerfx/theta.hpp"

namespace peerfx {

enum class GroupRule { kSingle, kX1Threshold };

/// Synthetic-data configuration: S subnetworks of n_s agents, two
/// covariates (uniform and Poisson), per-agent out-degree drawn
/// uniformly from [deg_lo, deg_hi] with friends sampled without
/// replacement inside the subnetwork.
struct DgpConfig {
  int S = 1;
  int n_s = 100;
  int R = 100;
  double x1_lo = 0.0, x1_hi = 5.0;
  double x2_rate = 2.0;
  int deg_lo = 0, deg_hi = 10;
  Eigen::VectorXd beta;   // (intercept, beta1, beta2) for K = 2
  Eigen::MatrixXd alpha;  // M x M
  CutPointSpec cuts;
  GroupRule group_rule = GroupRule::kSingle;
  double group_threshold = 2.5;
  std::uint64_t seed = 0;

  int n() const { return S * n_s; }
};

namespace detail {
/// Long-tail thresholds shared by the heterogeneous benchmarks. The
/// cost increments are the primitive; group g's spacings add that
/// group's peer-effect row sum (thresholds are cost differences plus
/// (r - 1/2) times the row sum). With the reference row sum 0.25 the
/// spacings are (2.050, 1.250, ..., 0.260) and the tail is 0.255, and
/// every row sum keeps the tail slope just inside the contraction
/// bound (e.g. 0.45 < 1/0.455).
inline CutPointSpec long_tail_cuts(int R, const Eigen::MatrixXd& alpha) {
  const int M = static_cast<int>(alpha.rows());
  const double base[12] = {2.050, 1.250, 0.850, 0.700, 0.500, 0.400,
                           0.330, 0.300, 0.290, 0.280, 0.270, 0.260};
  Eigen::MatrixXd deltas(M, 12);
  Eigen::VectorXd tail(M);
  for (int g = 0; g < M; ++g) {
    const double offset = alpha.row(g).sum() - 0.25;
    for (int k = 0; k < 12; ++k) deltas(g, k) = base[k] + offset;
    tail[g] = 0.255 + offset;
  }
  return CutPointSpec(R, M, 13, deltas, tail);
}
}  // namespace detail

/// The four built-in benchmark processes. A: one group, evenly spaced
/// thresholds (0.55). B: one group, long-tail thresholds. C and D: two
/// groups split at x1 <= 2.5 with heterogeneous (D: partly negative)
/// peer effects and the long-tail thresholds in both groups.
inline DgpConfig builtin_dgp(const std::string& name, int S, int n_s,
                             std::uint64_t seed) {
  DgpConfig cfg;
  cfg.S = S;
  cfg.n_s = n_s;
  cfg.R = 100;
  cfg.seed = seed;
  cfg.beta = (Eigen::VectorXd(5) << 2.0, 1.5, -1.2, 0.5, -0.9).finished();
  if (name == "A") {
    cfg.alpha = Eigen::MatrixXd::Constant(1, 1, 0.25);
    cfg.cuts = CutPointSpec::quadratic(cfg.R, Eigen::VectorXd::Constant(1, 0.55));
  } else if (name == "B") {
    cfg.alpha = Eigen::MatrixXd::Constant(1, 1, 0.25);
    cfg.cuts = detail::long_tail_cuts(cfg.R, cfg.alpha);
  } else if (name == "C") {
    cfg.alpha = (Eigen::MatrixXd(2, 2) << 0.3, 0.15, 0.1, 0.15).finished();
    cfg.cuts = detail::long_tail_cuts(cfg.R, cfg.alpha);
    cfg.group_rule = GroupRule::kX1Threshold;
  } else if (name == "D") {
    cfg.alpha = (Eigen::MatrixXd(2, 2) << 0.4, -0.1, 0.2, 0.1).finished();
    cfg.cuts = detail::long_tail_cuts(cfg.R, cfg.alpha);
    cfg.group_rule = GroupRule::kX1Threshold;
  } else {
    throw std::invalid_argument("unknown DGP '" + name + "' (expected A-D)");
  }
  return cfg;
}

struct SimulatedData {
  GroupedNetwork net;
  DesignMatrix design;
  Eigen::MatrixXd X;
  Eigen::VectorXi y;
  Theta theta_true;
  EquilibriumState equilibrium;
  bool contraction_ok = true;
};

/// Draws covariates and the network, solves the equilibrium at the true
/// parameters, then draws private shocks and best responses. Fully
/// deterministic given cfg.seed: covariates, network and shocks use
/// separate derived streams consumed in agent order.
inline SimulatedData simulate_dataset(const DgpConfig& cfg) {
  if (cfg.deg_lo < 0 || cfg.deg_hi < cfg.deg_lo)
    throw std::invalid_argument("bad degree bounds");
  const int n = cfg.n();
  const int M = static_cast<int>(cfg.alpha.rows());

  Rng rng_x = Rng::stream(cfg.seed, 1);
  Rng rng_net = Rng::stream(cfg.seed, 2);
  Rng rng_eps = Rng::stream(cfg.seed, 3);

  Eigen::MatrixXd X(n, 2);
  for (int i = 0; i < n; ++i) {
    X(i, 0) = rng_x.uniform(cfg.x1_lo, cfg.x1_hi);
    X(i, 1) = rng_x.poisson(cfg.x2_rate);
  }

  std::vector<int> groups(n, 0), subnet(n, 0);
  for (int i = 0; i < n; ++i) {
    subnet[i] = i / cfg.n_s;
    if (cfg.group_rule == GroupRule::kX1Threshold)
      groups[i] = (X(i, 0) <= cfg.group_threshold) ? 0 : 1;
  }

  const int deg_cap = std::min(cfg.deg_hi, cfg.n_s - 1);
  std::vector<std::pair<int, int>> edges;
  for (int i = 0; i < n; ++i) {
    const int s = subnet[i];
    const int base = s * cfg.n_s;
    const int deg = rng_net.uniform_int(cfg.deg_lo, deg_cap);
    const auto picks =
        rng_net.sample_without_replacement(cfg.n_s, deg, i - base);
    for (int local : picks) edges.emplace_back(i, base + local);
  }

  SimulatedData out{GroupedNetwork(edges, groups, subnet, M, cfg.S),
                    DesignMatrix{}, std::move(X), Eigen::VectorXi(n),
                    Theta{cfg.alpha, cfg.beta, cfg.cuts}, EquilibriumState{},
                    true};
  out.design = build_design(out.net, out.X, false);
  out.theta_true.validate(static_cast<int>(out.design.Z.cols()));

  out.contraction_ok = contraction_diagnostic(out.theta_true).pass;

  out.equilibrium = solve_equilibrium(out.theta_true, out.net, out.design);
  if (!out.equilibrium.converged)
    throw std::runtime_error(
        "equilibrium did not converge at the true parameters (residual " +
        std::to_string(out.equilibrium.residual) + ")");

  const Eigen::VectorXd eta =
      latent_index(out.theta_true, out.net, out.design, out.equilibrium.ye);
  for (int i = 0; i < n; ++i) {
    const double eps = rng_eps.normal();
    out.y[i] = best_response(out.theta_true, out.net.group(i), eta[i], eps);
  }
  return out;
}

}  // namespace peerfx
