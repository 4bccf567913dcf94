#include <catch_amalgamated.hpp>
#include <cmath>

#include "peerfx/effects.hpp"
#include "peerfx/simulate.hpp"
#include "support/oracles.hpp"

using namespace peerfx;

namespace {
FitResult manual_fit(const Theta& th, const GroupedNetwork& net,
                     const DesignMatrix& design) {
  FitResult fit;
  fit.theta = th;
  fit.layout = ThetaLayout{th.M(), th.P(), th.cuts.R(), th.cuts.switch_point()};
  fit.natural = pack_natural(th, fit.layout);
  const EquilibriumState eq = solve_equilibrium(th, net, design);
  fit.u = eq.ye;
  fit.converged = eq.converged;
  return fit;
}
}  // namespace

TEST_CASE("zero peer effects give zero peer DMEs", "[effects]") {
  Rng rng(61);
  auto inst = oracles::random_instance(rng, 8, 5, 2, true);
  inst.theta.alpha.setZero();
  const EquilibriumState eq =
      solve_equilibrium(inst.theta, inst.net, inst.design);
  const DirectEffects de =
      direct_marginal_effects(inst.theta, inst.net, inst.design, eq);
  CHECK(de.peer.cwiseAbs().maxCoeff() == 0.0);
  // covariate DME = beta1 * mean(fstar)
  const double mf = de.fstar.mean();
  for (int k = 0; k < inst.design.K; ++k) {
    CHECK(de.covariate[k] ==
          Catch::Approx(inst.theta.beta[1 + k] * mf).epsilon(1e-12));
    CHECK(de.contextual[k] ==
          Catch::Approx(inst.theta.beta[1 + inst.design.K + k] * mf)
              .epsilon(1e-12));
  }
}

TEST_CASE("per-group peer DMEs average over the whole sample", "[effects]") {
  // two groups, explicit hand computation
  const GroupedNetwork net =
      build_network({{0, 1}, {1, 0}, {2, 0}, {3, 2}}, {0, 1, 0, 1}, {0, 0, 0, 0});
  Eigen::MatrixXd X(4, 1);
  X << 0.2, -0.1, 0.4, 0.0;
  const DesignMatrix d = build_design(net, X);
  Theta th{(Eigen::MatrixXd(2, 2) << 0.2, 0.1, 0.05, 0.15).finished(),
           (Eigen::VectorXd(3) << 0.5, 0.3, -0.2).finished(),
           CutPointSpec(6, 2, 2, Eigen::MatrixXd::Constant(2, 1, 0.6),
                        (Eigen::VectorXd(2) << 0.7, 0.8).finished())};
  const EquilibriumState eq = solve_equilibrium(th, net, d);
  REQUIRE(eq.converged);
  const DirectEffects de = direct_marginal_effects(th, net, d, eq);
  const Eigen::VectorXd f = fstar_vector(th, net, d, eq.ye);
  const double sum_g0 = f[0] + f[2];
  const double sum_g1 = f[1] + f[3];
  CHECK(de.peer(0, 0) == Catch::Approx(0.2 * sum_g0 / 4.0).epsilon(1e-12));
  CHECK(de.peer(0, 1) == Catch::Approx(0.1 * sum_g0 / 4.0).epsilon(1e-12));
  CHECK(de.peer(1, 0) == Catch::Approx(0.05 * sum_g1 / 4.0).epsilon(1e-12));
  CHECK(de.peer(1, 1) == Catch::Approx(0.15 * sum_g1 / 4.0).epsilon(1e-12));
}

TEST_CASE("benchmark true effects at the published values", "[effects]") {
  // single samples, so tolerances reflect sampling noise in the average
  const SimulatedData a = simulate_dataset(builtin_dgp("A", 4, 250, 314));
  const DirectEffects dea = direct_marginal_effects(
      a.theta_true, a.net, a.design, a.equilibrium);
  CHECK(dea.peer(0, 0) == Catch::Approx(0.431).margin(0.02));
  CHECK(dea.covariate[0] == Catch::Approx(2.584).margin(0.1));
  CHECK(dea.contextual[1] == Catch::Approx(-1.550).margin(0.08));

  const SimulatedData c = simulate_dataset(builtin_dgp("C", 8, 250, 314));
  const DirectEffects dec = direct_marginal_effects(
      c.theta_true, c.net, c.design, c.equilibrium);
  CHECK(dec.peer(1, 1) == Catch::Approx(0.202).margin(0.02));
  CHECK(dec.peer(0, 0) == Catch::Approx(0.115).margin(0.02));
}

TEST_CASE("resolvent total effect matches perturb-and-resolve", "[effects]") {
  Rng rng(62);
  int done = 0;
  while (done < 10) {
    const auto inst = oracles::random_instance(rng, 10, 6, 2, true);
    if (!contraction_diagnostic(inst.theta).pass) continue;
    ++done;
    const EquilibriumState eq = solve_equilibrium(inst.theta, inst.net,
                                                  inst.design, nullptr, 1e-12,
                                                  10000);
    REQUIRE(eq.converged);
    for (int k = 0; k < inst.design.K; ++k) {
      const TotalEffect te = indirect_and_total_continuous(
          inst.theta, inst.net, inst.design, eq, k);
      const double h = 1e-6;
      Eigen::MatrixXd Xp = inst.design.X;
      Xp.col(k).array() += h;
      const DesignMatrix dp = build_design(inst.net, Xp);
      const EquilibriumState eqp = solve_equilibrium(
          inst.theta, inst.net, dp, &eq.ye, 1e-13, 20000);
      REQUIRE(eqp.converged);
      const double numeric = (eqp.ye.mean() - eq.ye.mean()) / h;
      CHECK(te.total ==
            Catch::Approx(numeric).epsilon(1e-4).margin(1e-7));
      CHECK(te.total == Catch::Approx(te.dme + te.ime).margin(1e-12));
    }
  }
}

TEST_CASE("no peer channel: IME is the contextual pass-through", "[effects]") {
  Rng rng(63);
  auto inst = oracles::random_instance(rng, 8, 5, 1, true);
  inst.theta.alpha.setZero();
  const EquilibriumState eq = solve_equilibrium(inst.theta, inst.net, inst.design);
  const TotalEffect te =
      indirect_and_total_continuous(inst.theta, inst.net, inst.design, eq, 0);
  // with the resolvent equal to the identity, the indirect part is
  // beta2 * mean(fstar * has_friends)
  const Eigen::VectorXd f = fstar_vector(inst.theta, inst.net, inst.design, eq.ye);
  double acc = 0.0;
  for (int i = 0; i < inst.net.n(); ++i)
    if (!inst.net.friends(i).empty()) acc += f[i];
  const double b2 = inst.theta.beta[1 + inst.design.K];
  CHECK(te.ime == Catch::Approx(b2 * acc / inst.net.n()).margin(1e-10));
}

TEST_CASE("discrete flip effects are internally consistent", "[effects]") {
  const GroupedNetwork net =
      build_network({{0, 1}, {1, 2}, {2, 0}, {3, 1}}, {0, 0, 0, 0},
                    {0, 0, 0, 0});
  Eigen::MatrixXd X(4, 2);
  X << 1, 0.3, 0, -0.4, 1, 0.9, 0, 0.1;
  const DesignMatrix d = build_design(net, X);
  Theta th{Eigen::MatrixXd::Constant(1, 1, 0.2),
           (Eigen::VectorXd(5) << 0.6, -0.5, 0.4, -0.2, 0.1).finished(),
           CutPointSpec::quadratic(5, Eigen::VectorXd::Constant(1, 0.7))};
  const EquilibriumState eq = solve_equilibrium(th, net, d, nullptr, 1e-11, 5000);
  REQUIRE(eq.converged);
  const TotalEffect te = indirect_and_total_discrete(th, net, d, eq, 0);
  CHECK(std::isfinite(te.total));
  CHECK(te.total == Catch::Approx(te.dme + te.ime).margin(1e-12));
  // negative own coefficient: the direct piece must be negative
  CHECK(te.dme < 0.0);
  // non-binary column rejected
  CHECK_THROWS(indirect_and_total_discrete(th, net, d, eq, 1));
}

TEST_CASE("delta-method standard errors", "[effects]") {
  const SimulatedData data = simulate_dataset([&] {
    DgpConfig cfg = builtin_dgp("A", 2, 100, 15);
    return cfg;
  }());
  FitResult fit = npl_estimate(data.net, data.design, data.y, 100, 1);
  REQUIRE(fit.converged);
  npl_variance(fit, data.net, data.design, data.y);
  const int d = fit.layout.dim();

  SECTION("identity coordinate returns the vcov diagonal") {
    for (int k : {0, 1, d - 1}) {
      auto fn = [&, k](const Theta& th) {
        const Eigen::VectorXd v = pack_natural(th, fit.layout);
        return Eigen::VectorXd::Constant(1, v[k]).eval();
      };
      const Eigen::VectorXd se = delta_method_se(fit, fn);
      CHECK(se[0] == Catch::Approx(std::sqrt(fit.vcov(k, k))).epsilon(1e-6));
    }
  }

  SECTION("linear map matches the exact formula") {
    Rng rng(64);
    Eigen::MatrixXd A(2, d);
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < d; ++c) A(r, c) = rng.uniform(-1.0, 1.0);
    auto fn = [&](const Theta& th) {
      return (A * pack_natural(th, fit.layout)).eval();
    };
    const Eigen::VectorXd se = delta_method_se(fit, fn);
    const Eigen::MatrixXd exact = A * fit.vcov * A.transpose();
    CHECK(se[0] == Catch::Approx(std::sqrt(exact(0, 0))).epsilon(1e-6));
    CHECK(se[1] == Catch::Approx(std::sqrt(exact(1, 1))).epsilon(1e-6));
  }

  SECTION("step halving moves equilibrium-based SEs by less than 0.1%") {
    auto effect = [&](const Theta& th, double tol) {
      const EquilibriumState eq =
          solve_equilibrium(th, data.net, data.design, &fit.u, tol, 2000);
      const DirectEffects de =
          direct_marginal_effects(th, data.net, data.design, eq);
      return Eigen::VectorXd::Constant(1, de.peer(0, 0)).eval();
    };
    auto fn = [&](const Theta& th) { return effect(th, 1e-12); };
    const Eigen::VectorXd se1 = delta_method_se(fit, fn, 1.0);
    const Eigen::VectorXd se2 = delta_method_se(fit, fn, 0.5);
    CHECK(std::fabs(se1[0] - se2[0]) < 1e-3 * se1[0]);
  }

  SECTION("missing vcov is rejected") {
    FitResult bare = fit;
    bare.vcov.resize(0, 0);
    CHECK_THROWS(delta_method_se(
        bare, [&](const Theta&) { return Eigen::VectorXd::Zero(1).eval(); }));
  }
}

TEST_CASE("counterfactual: identity assignment reproduces the baseline",
          "[effects]") {
  const SimulatedData data = simulate_dataset(builtin_dgp("C", 2, 60, 21));
  const FitResult fit = manual_fit(data.theta_true, data.net, data.design);
  REQUIRE(fit.converged);
  CounterfactualOptions opts;
  opts.assignment = [&](double, Rng&) {
    std::vector<int> labels(data.net.n());
    for (int i = 0; i < data.net.n(); ++i) labels[i] = data.net.group(i);
    return labels;
  };
  // X untouched (group_covariate = -1): identity labels + same X = baseline
  const auto curve = counterfactual(fit, data.net, data.X, {0.5}, 9, opts);
  REQUIRE(curve.size() == 1);
  REQUIRE(curve[0].converged);
  CHECK(curve[0].mean ==
        Catch::Approx(data.equilibrium.ye.mean()).margin(1e-7));
}

TEST_CASE("counterfactual: no-interaction curve is linear in the share",
          "[effects]") {
  // homogeneous agents, no edges: the mean is an exact mixture of the
  // two group-specific values, so exact-count assignment gives a line
  const int ns = 10, S = 2, n = ns * S;
  std::vector<int> groups(n, 0), subnet(n);
  for (int i = 0; i < n; ++i) subnet[i] = i / ns;
  const GroupedNetwork net({}, groups, subnet, 2, S);
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n, 1);
  const DesignMatrix d = build_design(net, X);
  Theta th{Eigen::MatrixXd::Zero(2, 2),
           (Eigen::VectorXd(3) << 1.0, -0.8, 0.0).finished(),
           CutPointSpec(8, 2, 1, Eigen::MatrixXd(2, 0),
                        (Eigen::VectorXd(2) << 0.6, 0.9).finished())};
  const FitResult fit = manual_fit(th, net, d);
  CounterfactualOptions opts;
  opts.group_covariate = 0;  // the dummy column mirrors the label
  std::vector<double> shares;
  for (int k = 0; k <= 10; ++k) shares.push_back(k / 10.0);
  const auto curve = counterfactual(fit, net, X, shares, 33, opts);
  REQUIRE(curve.size() == 11);
  const double y0 = curve[0].mean, y1 = curve[10].mean;
  for (int k = 0; k <= 10; ++k) {
    REQUIRE(curve[k].converged);
    CHECK(curve[k].mean ==
          Catch::Approx(y0 + (y1 - y0) * k / 10.0).margin(1e-9));
  }
}

TEST_CASE("counterfactual: negative group coefficient bends the curve down",
          "[effects]") {
  const int ns = 40, S = 2, n = ns * S;
  Rng rng(65);
  std::vector<std::pair<int, int>> edges;
  for (int s = 0; s < S; ++s)
    for (int i = 0; i < ns; ++i)
      for (int j = 0; j < ns; ++j)
        if (i != j && rng.uniform() < 0.08)
          edges.push_back({s * ns + i, s * ns + j});
  const GroupedNetwork net(edges, std::vector<int>(n, 0),
                           [&] {
                             std::vector<int> sn(n);
                             for (int i = 0; i < n; ++i) sn[i] = i / ns;
                             return sn;
                           }(),
                           1, S);
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n, 1);
  const DesignMatrix d = build_design(net, X);
  // homogeneous positive peer effects, negative coefficient on the dummy
  Theta th{Eigen::MatrixXd::Constant(1, 1, 0.3),
           (Eigen::VectorXd(3) << 2.0, -0.9, -0.3).finished(),
           CutPointSpec::quadratic(12, Eigen::VectorXd::Constant(1, 0.6))};
  const FitResult fit = manual_fit(th, net, d);
  REQUIRE(fit.converged);
  CounterfactualOptions opts;
  opts.group_covariate = 0;
  const auto curve = counterfactual(fit, net, X, {0.0, 0.5, 1.0}, 5, opts);
  REQUIRE(curve.size() == 3);
  for (const auto& pt : curve) REQUIRE(pt.converged);
  CHECK(curve[0].mean > curve[1].mean);
  CHECK(curve[1].mean > curve[2].mean);
}
