#include <catch_amalgamated.hpp>
#include <cmath>

#include "peerfx/math/normal.hpp"
#include "peerfx/model.hpp"
#include "support/oracles.hpp"

using namespace peerfx;

namespace {
oracles::Instance small(Rng& rng, bool contraction = true) {
  return oracles::random_instance(rng, 6, 6, 2, contraction);
}
}  // namespace

TEST_CASE("choice probabilities: symmetric and derived values", "[model]") {
  // alpha = 0, beta = 0, R = 1: P(y = 1) = F(0) = 0.5
  const GroupedNetwork net = build_network({}, {0, 0}, {0, 0});
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(2, 1);
  const DesignMatrix d = build_design(net, X);
  Theta th{Eigen::MatrixXd::Zero(1, 1), Eigen::VectorXd::Zero(3),
           CutPointSpec::quadratic(1, Eigen::VectorXd::Constant(1, 0.55))};
  const Eigen::MatrixXd p =
      choice_probabilities(th, net, d, Eigen::VectorXd::Zero(2));
  CHECK(p(0, 1) == Catch::Approx(0.5).epsilon(1e-14));
  CHECK(p(0, 0) == Catch::Approx(0.5).epsilon(1e-14));

  // z'beta = 1, gamma(2) = 0.55, R = 2
  Theta th2{Eigen::MatrixXd::Zero(1, 1),
            (Eigen::VectorXd(3) << 1.0, 0.0, 0.0).finished(),
            CutPointSpec::quadratic(2, Eigen::VectorXd::Constant(1, 0.55))};
  const Eigen::MatrixXd p2 =
      choice_probabilities(th2, net, d, Eigen::VectorXd::Zero(2));
  CHECK(p2(0, 0) == Catch::Approx(1.0 - norm_cdf(1.0)).epsilon(1e-13));
  CHECK(p2(0, 1) ==
        Catch::Approx(norm_cdf(1.0) - norm_cdf(0.45)).epsilon(1e-13));
  CHECK(p2(0, 2) == Catch::Approx(norm_cdf(0.45)).epsilon(1e-13));
}

TEST_CASE("telescoping and mean identity over random instances", "[model]") {
  Rng rng(11);
  for (int rep = 0; rep < 200; ++rep) {
    const auto inst = oracles::random_instance(rng, 6, 20, 2, false);
    Eigen::VectorXd u(inst.net.n());
    for (int i = 0; i < u.size(); ++i)
      u[i] = rng.uniform(0.0, inst.theta.cuts.R());
    const Eigen::MatrixXd p =
        choice_probabilities(inst.theta, inst.net, inst.design, u);
    const Eigen::VectorXd lmap =
        expected_outcome_map(inst.theta, inst.net, inst.design, u);
    for (int i = 0; i < inst.net.n(); ++i) {
      CHECK(p.row(i).sum() == Catch::Approx(1.0).margin(1e-10));
      CHECK(p.row(i).minCoeff() >= 0.0);
      double mean = 0.0;
      for (int t = 1; t <= inst.theta.cuts.R(); ++t) mean += t * p(i, t);
      CHECK(lmap[i] == Catch::Approx(mean).margin(1e-10));
    }
  }
}

TEST_CASE("best response thresholds", "[model]") {
  Theta th{Eigen::MatrixXd::Zero(1, 1), Eigen::VectorXd::Zero(1),
           CutPointSpec::quadratic(100, Eigen::VectorXd::Constant(1, 0.55))};
  const double inf = std::numeric_limits<double>::infinity();
  CHECK(best_response(th, 0, 0.0, -inf) == 0);
  CHECK(best_response(th, 0, 0.0, inf) == 100);
  CHECK(best_response(th, 0, 0.3, 0.0) == 1);   // gamma = (0, 0.55, 1.10, ...)
  CHECK(best_response(th, 0, 0.0, 0.56) == 2);
  CHECK(best_response(th, 0, 0.0, -0.01) == 0);
  CHECK(best_response(th, 0, 0.0, 0.0) == 1);   // gamma(1) <= v counts
}

TEST_CASE("best-response frequencies match choice probabilities", "[model]") {
  const GroupedNetwork net = build_network({{0, 1}}, {0, 0}, {0, 0});
  Eigen::MatrixXd X(2, 1);
  X << 0.4, -0.2;
  const DesignMatrix d = build_design(net, X);
  Theta th{Eigen::MatrixXd::Constant(1, 1, 0.2),
           (Eigen::VectorXd(3) << 0.8, 0.5, 0.3).finished(),
           CutPointSpec::quadratic(3, Eigen::VectorXd::Constant(1, 0.8))};
  const EquilibriumState eq = solve_equilibrium(th, net, d);
  REQUIRE(eq.converged);
  const Eigen::MatrixXd p = choice_probabilities(th, net, d, eq.ye);
  const Eigen::VectorXd eta = latent_index(th, net, d, eq.ye);

  const int N = 1000000;
  Rng rng(404);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(4);
  for (int k = 0; k < N; ++k)
    counts[best_response(th, 0, eta[0], rng.normal())] += 1.0;
  for (int t = 0; t <= 3; ++t) {
    const double se = std::sqrt(p(0, t) * (1.0 - p(0, t)) / N);
    CHECK(std::fabs(counts[t] / N - p(0, t)) < 4.0 * se + 1e-9);
  }
}

TEST_CASE("expected outcome map ignores beliefs when alpha is zero",
          "[model]") {
  Rng rng(21);
  const auto inst = small(rng);
  Theta off = inst.theta;
  off.alpha.setZero();
  Eigen::VectorXd u1 = Eigen::VectorXd::Zero(inst.net.n());
  Eigen::VectorXd u2 = Eigen::VectorXd::Constant(inst.net.n(), 3.0);
  const Eigen::VectorXd a = expected_outcome_map(off, inst.net, inst.design, u1);
  const Eigen::VectorXd b = expected_outcome_map(off, inst.net, inst.design, u2);
  CHECK((a - b).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("equilibrium solver", "[model]") {
  Rng rng(33);

  SECTION("alpha = 0 converges in one iteration") {
    auto inst = small(rng);
    inst.theta.alpha.setZero();
    const EquilibriumState eq =
        solve_equilibrium(inst.theta, inst.net, inst.design);
    CHECK(eq.converged);
    CHECK(eq.iterations == 1);
  }

  SECTION("two starting points agree when the contraction bound holds") {
    int done = 0;
    while (done < 100) {
      const auto inst = small(rng, true);
      if (!contraction_diagnostic(inst.theta).pass) continue;
      ++done;
      const double tol = 1e-10;
      Eigen::VectorXd z = Eigen::VectorXd::Zero(inst.net.n());
      Eigen::VectorXd r =
          Eigen::VectorXd::Constant(inst.net.n(), inst.theta.cuts.R());
      const EquilibriumState e1 =
          solve_equilibrium(inst.theta, inst.net, inst.design, &z, tol, 5000);
      const EquilibriumState e2 =
          solve_equilibrium(inst.theta, inst.net, inst.design, &r, tol, 5000);
      REQUIRE(e1.converged);
      REQUIRE(e2.converged);
      CHECK((e1.ye - e2.ye).lpNorm<Eigen::Infinity>() < 10.0 * tol);
    }
  }

  SECTION("matches the belief-space fixed point") {
    for (int rep = 0; rep < 20; ++rep) {
      const auto inst = small(rng, true);
      if (!contraction_diagnostic(inst.theta).pass) continue;
      const EquilibriumState eq = solve_equilibrium(
          inst.theta, inst.net, inst.design, nullptr, 1e-12, 20000);
      REQUIRE(eq.converged);
      const Eigen::VectorXd ref = oracles::belief_space_fixed_point(
          inst.theta, inst.net, inst.design);
      CHECK((eq.ye - ref).lpNorm<Eigen::Infinity>() < 1e-8);
    }
  }

  SECTION("non-convergence is flagged, not hidden") {
    auto inst = small(rng);
    const EquilibriumState eq =
        solve_equilibrium(inst.theta, inst.net, inst.design, nullptr, 1e-9, 1);
    if (!eq.converged) CHECK(eq.residual >= 1e-9);
    CHECK_THROWS(solve_equilibrium(inst.theta, inst.net, inst.design, nullptr,
                                   -1.0, 10));
  }
}

TEST_CASE("contraction diagnostic", "[model]") {
  // R = 1: the comb is a single density, maximized at the threshold
  Theta th1{Eigen::MatrixXd::Constant(1, 1, 0.1), Eigen::VectorXd::Zero(1),
            CutPointSpec::quadratic(1, Eigen::VectorXd::Constant(1, 0.7))};
  const ContractionReport r1 = contraction_diagnostic(th1);
  CHECK(r1.bound_per_group[0] == Catch::Approx(norm_pdf(0.0)).margin(1e-6));
  CHECK(1.0 / r1.bound_per_group[0] == Catch::Approx(2.5066282746).margin(1e-6));
  CHECK(r1.pass);

  // benchmark process A passes with alpha = 0.25
  Theta thA{Eigen::MatrixXd::Constant(1, 1, 0.25), Eigen::VectorXd::Zero(1),
            CutPointSpec::quadratic(100, Eigen::VectorXd::Constant(1, 0.55))};
  const ContractionReport rA = contraction_diagnostic(thA);
  CHECK(rA.pass);
  // interior of a 0.55-spaced comb sums to about 1/0.55
  CHECK(rA.bound_per_group[0] ==
        Catch::Approx(1.0 / 0.55).margin(0.005));

  // strong peer effects fail
  Theta thF{Eigen::MatrixXd::Constant(1, 1, 10.0), Eigen::VectorXd::Zero(1),
            CutPointSpec::quadratic(1, Eigen::VectorXd::Constant(1, 0.7))};
  CHECK_FALSE(contraction_diagnostic(thF).pass);
}

TEST_CASE("map is a contraction when the diagnostic passes", "[model]") {
  Rng rng(55);
  int done = 0;
  while (done < 50) {
    const auto inst = small(rng, true);
    const ContractionReport rep = contraction_diagnostic(inst.theta);
    if (!rep.pass) continue;
    ++done;
    double kappa = 0.0;
    for (int g = 0; g < inst.theta.M(); ++g)
      kappa = std::max(kappa,
                       rep.alpha_row_sum[g] * rep.bound_per_group[g]);
    REQUIRE(kappa < 1.0);
    for (int pair = 0; pair < 5; ++pair) {
      Eigen::VectorXd u(inst.net.n()), v(inst.net.n());
      for (int i = 0; i < u.size(); ++i) {
        u[i] = rng.uniform(-2.0, inst.theta.cuts.R() + 2.0);
        v[i] = rng.uniform(-2.0, inst.theta.cuts.R() + 2.0);
      }
      const double lhs =
          (expected_outcome_map(inst.theta, inst.net, inst.design, u) -
           expected_outcome_map(inst.theta, inst.net, inst.design, v))
              .lpNorm<Eigen::Infinity>();
      CHECK(lhs <= kappa * (u - v).lpNorm<Eigen::Infinity>() + 1e-12);
    }
  }
}

TEST_CASE("positive peer effects raise expected outcomes", "[model]") {
  // single agent with one friend; increasing the friend's belief raises l_i
  const GroupedNetwork net = build_network({{0, 1}}, {0, 0}, {0, 0});
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(2, 1);
  const DesignMatrix d = build_design(net, X);
  Theta th{Eigen::MatrixXd::Constant(1, 1, 0.3),
           (Eigen::VectorXd(3) << 1.0, 0.0, 0.0).finished(),
           CutPointSpec::quadratic(5, Eigen::VectorXd::Constant(1, 0.8))};
  Eigen::VectorXd lo = Eigen::VectorXd::Zero(2), hi = Eigen::VectorXd::Zero(2);
  hi[1] = 2.0;
  const double a = expected_outcome_map(th, net, d, lo)[0];
  const double b = expected_outcome_map(th, net, d, hi)[0];
  CHECK(b > a);
}

TEST_CASE("conditional moments", "[model]") {
  Rng rng(66);

  SECTION("R = 1 reduces to Bernoulli variance") {
    const GroupedNetwork net = build_network({}, {0}, {0});
    Eigen::MatrixXd X = Eigen::MatrixXd::Constant(1, 1, 0.3);
    const DesignMatrix d = build_design(net, X);
    Theta th{Eigen::MatrixXd::Zero(1, 1),
             (Eigen::VectorXd(3) << 0.4, 0.7, 0.0).finished(),
             CutPointSpec::quadratic(1, Eigen::VectorXd::Constant(1, 0.5))};
    const EquilibriumState eq = solve_equilibrium(th, net, d);
    const ConditionalMoments m = conditional_moments(th, net, d, eq);
    const double p = choice_probabilities(th, net, d, eq.ye)(0, 1);
    CHECK(m.mean[0] == Catch::Approx(p).margin(1e-12));
    CHECK(m.variance[0] == Catch::Approx(p * (1.0 - p)).margin(1e-10));
  }

  SECTION("second moment matches the belief matrix; variance nonnegative") {
    for (int rep = 0; rep < 50; ++rep) {
      const auto inst = small(rng, true);
      if (!contraction_diagnostic(inst.theta).pass) continue;
      const EquilibriumState eq = solve_equilibrium(
          inst.theta, inst.net, inst.design, nullptr, 1e-11, 5000);
      REQUIRE(eq.converged);
      const ConditionalMoments m =
          conditional_moments(inst.theta, inst.net, inst.design, eq);
      const Eigen::MatrixXd p =
          choice_probabilities(inst.theta, inst.net, inst.design, eq.ye);
      for (int i = 0; i < inst.net.n(); ++i) {
        double m2 = 0.0;
        for (int t = 1; t <= inst.theta.cuts.R(); ++t) m2 += t * t * p(i, t);
        CHECK(m.variance[i] + m.mean[i] * m.mean[i] ==
              Catch::Approx(m2).margin(1e-10));
        CHECK(m.variance[i] >= -1e-12);
      }
    }
  }

  SECTION("rejects a non-converged equilibrium") {
    const auto inst = small(rng);
    EquilibriumState eq;
    eq.converged = false;
    eq.ye = Eigen::VectorXd::Zero(inst.net.n());
    CHECK_THROWS(conditional_moments(inst.theta, inst.net, inst.design, eq));
  }
}

TEST_CASE("equilibrium bounds and probs-mean consistency", "[model]") {
  Rng rng(88);
  for (int rep = 0; rep < 30; ++rep) {
    const auto inst = small(rng, true);
    if (!contraction_diagnostic(inst.theta).pass) continue;
    const EquilibriumState eq =
        solve_equilibrium(inst.theta, inst.net, inst.design, nullptr, 1e-10, 5000);
    REQUIRE(eq.converged);
    const Eigen::MatrixXd p =
        choice_probabilities(inst.theta, inst.net, inst.design, eq.ye);
    for (int i = 0; i < inst.net.n(); ++i) {
      CHECK(eq.ye[i] >= 0.0);
      CHECK(eq.ye[i] <= inst.theta.cuts.R());
      double mean = 0.0;
      for (int t = 1; t <= inst.theta.cuts.R(); ++t) mean += t * p(i, t);
      CHECK(eq.ye[i] == Catch::Approx(mean).margin(1e-8));
    }
  }
}
