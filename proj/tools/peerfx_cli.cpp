// Command-line front end: simulate | estimate | effects | counterfactual |
// diagnose | montecarlo. Every run writes a manifest.json with the seed,
// a hash of the effective configuration, and the library version.
// Exit codes: 0 success, 1 input error, 2 non-convergence.

#include <CLI11.hpp>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <thread>

#include "peerfx/effects.hpp"
#include "peerfx/estimate.hpp"
#include "peerfx/io.hpp"
#include "peerfx/model.hpp"
#include "peerfx/network.hpp"
#include "peerfx/parallel.hpp"
#include "peerfx/simulate.hpp"

namespace fs = std::filesystem;
using namespace peerfx;

namespace {

bool log_enabled() {
  const char* v = std::getenv("PEERFX_LOG");
  return v && std::string(v) != "" && std::string(v) != "0";
}

void logln(const std::string& s) {
  if (log_enabled()) std::cerr << "[peerfx] " << s << "\n";
}

struct NonConvergence : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<int> parse_grid(const std::string& spec) {
  std::vector<int> grid;
  if (spec.find(':') != std::string::npos) {
    const auto pos = spec.find(':');
    const int lo = std::stoi(spec.substr(0, pos));
    const int hi = std::stoi(spec.substr(pos + 1));
    for (int v = lo; v <= hi; ++v) grid.push_back(v);
  } else {
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) grid.push_back(std::stoi(tok));
  }
  if (grid.empty()) throw std::invalid_argument("empty switch grid");
  return grid;
}

std::vector<double> parse_shares(const std::string& spec) {
  std::vector<double> out;
  std::stringstream ss(spec);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
  if (out.empty()) throw std::invalid_argument("empty share list");
  return out;
}

struct LoadedData {
  NodeTable nodes;
  GroupedNetwork net;
  DesignMatrix design;
};

LoadedData load_data(const std::string& nodes_path,
                     const std::string& edges_path, bool fixed_effects,
                     bool need_y) {
  NodeTable t = read_nodes_csv(nodes_path);
  if (need_y && !t.has_y)
    throw std::invalid_argument(nodes_path + ": missing y column");
  auto edges = read_edges_csv(edges_path, t);
  GroupedNetwork net(edges, t.group, t.subnet,
                     static_cast<int>(t.group_label.size()),
                     static_cast<int>(t.subnet_label.size()));
  DesignMatrix design = build_design(net, t.X, fixed_effects);
  return LoadedData{std::move(t), std::move(net), std::move(design)};
}

json id_map_json(const NodeTable& t) {
  json j;
  j["ids"] = t.ids;
  j["group_labels"] = t.group_label;
  j["subnet_labels"] = t.subnet_label;
  return j;
}

/// Stacked effect vector used for delta-method standard errors:
/// [peer (M^2, row-major) | covariate (K) | contextual (K)].
Eigen::VectorXd stacked_effects(const Theta& th, const GroupedNetwork& net,
                                const DesignMatrix& design,
                                const Eigen::VectorXd* warm, double tol) {
  const EquilibriumState eq = solve_equilibrium(th, net, design, warm, tol, 1000);
  if (!eq.converged) throw NonConvergence("equilibrium failed inside effects");
  const DirectEffects de = direct_marginal_effects(th, net, design, eq);
  const int M = th.M();
  const int K = design.K;
  Eigen::VectorXd v(M * M + 2 * K);
  for (int g = 0; g < M; ++g)
    for (int gp = 0; gp < M; ++gp) v[g * M + gp] = de.peer(g, gp);
  v.segment(M * M, K) = de.covariate;
  v.segment(M * M + K, K) = de.contextual;
  return v;
}

std::vector<std::string> effect_names(int M, int K) {
  std::vector<std::string> names;
  for (int g = 1; g <= M; ++g)
    for (int gp = 1; gp <= M; ++gp)
      names.push_back(M == 1 ? "PE"
                             : "PE_" + std::to_string(g) + std::to_string(gp));
  for (int k = 1; k <= K; ++k) names.push_back("x" + std::to_string(k));
  for (int k = 1; k <= K; ++k) names.push_back("x" + std::to_string(k) + "_bar");
  return names;
}

int cmd_simulate(const std::string& dgp, int S, int ns, std::uint64_t seed,
                 const std::string& out_dir) {
  fs::create_directories(out_dir);
  const DgpConfig cfg = builtin_dgp(dgp, S, ns, seed);
  const SimulatedData data = simulate_dataset(cfg);
  if (!data.contraction_ok)
    std::cerr << "warning: contraction condition fails at the true "
                 "parameters; output flagged\n";
  write_nodes_csv(out_dir + "/nodes.csv", data.net, data.X, &data.y);
  write_edges_csv(out_dir + "/edges.csv", data.net);
  json truth;
  truth["theta"] = theta_to_json(data.theta_true);
  truth["ye"] = std::vector<double>(
      data.equilibrium.ye.data(),
      data.equilibrium.ye.data() + data.equilibrium.ye.size());
  truth["contraction_ok"] = data.contraction_ok;
  write_json(out_dir + "/truth.json", truth);
  json cfgj{{"dgp", dgp}, {"S", S}, {"ns", ns}, {"seed", seed}};
  write_json(out_dir + "/manifest.json", make_manifest("simulate", seed, cfgj));
  std::cout << "simulated " << data.net.n() << " agents, max y "
            << data.y.maxCoeff() << ", mean y "
            << data.y.cast<double>().mean() << "\n";
  return 0;
}

int cmd_estimate(const std::string& nodes, const std::string& edges,
                 const std::string& out_dir, int R, const std::string& grid_spec,
                 bool fixed_effects, std::uint64_t seed, double tol_inner,
                 double tol_outer, std::optional<int> contextual_index) {
  fs::create_directories(out_dir);
  LoadedData d = load_data(nodes, edges, fixed_effects, true);
  if (R <= 0) R = d.nodes.y.maxCoeff();
  for (int i = 0; i < d.nodes.y.size(); ++i)
    if (d.nodes.y[i] > R)
      throw std::invalid_argument("y exceeds R at row " + std::to_string(i));

  const DiagnosticReport diag =
      identification_diagnostic(d.net, d.design, contextual_index);
  write_json(out_dir + "/diagnostics.json",
             json{{"rank_zz", diag.rank_zz},
                  {"cols_zz", diag.cols_zz},
                  {"cond_zz", diag.cond_zz},
                  {"rank_pi", diag.rank_pi},
                  {"M", diag.M},
                  {"condition_a", diag.cond_a_pass},
                  {"condition_b", diag.cond_b_pass},
                  {"verdict", to_string(diag.verdict)},
                  {"notes", diag.notes}});
  if (diag.verdict == Verdict::kFail)
    std::cerr << "warning: identification diagnostic FAILED; proceeding\n";

  NplSettings settings;
  settings.tol_inner = tol_inner;
  settings.tol_outer = tol_outer;
  const std::vector<int> grid = parse_grid(grid_spec);

  SwitchSelection sel =
      select_cost_switch(d.net, d.design, d.nodes.y, R, grid, settings);
  npl_variance(sel.best, d.net, d.design, d.nodes.y);

  json jf = fit_to_json(sel.best);
  json table = json::array();
  for (const auto& row : sel.table)
    table.push_back(json{{"switch", row.switch_r},
                         {"loglik", row.loglik},
                         {"bic", row.bic},
                         {"bic_subnet", row.bic_subnet},
                         {"n_params", row.n_params},
                         {"converged", row.converged},
                         {"skipped", row.skipped}});
  jf["switch_table"] = table;
  jf["id_map"] = id_map_json(d.nodes);
  write_json(out_dir + "/fit.json", jf);

  json cfgj{{"nodes", nodes},     {"edges", edges},
            {"R", R},             {"switch_grid", grid_spec},
            {"fixed_effects", fixed_effects}, {"seed", seed},
            {"tol_inner", tol_inner}, {"tol_outer", tol_outer}};
  write_json(out_dir + "/manifest.json", make_manifest("estimate", seed, cfgj));

  std::cout << "selected switch " << sel.best.theta.cuts.switch_point()
            << ", loglik " << sel.best.loglik_sum << ", bic " << sel.best.bic
            << (sel.best.converged ? "" : " [NOT CONVERGED]") << "\n";
  if (!sel.best.converged) throw NonConvergence("best fit did not converge");
  return 0;
}

FitResult fit_from_json(const json& j) {
  FitResult fit;
  fit.theta = theta_from_json(j.at("theta"));
  fit.layout = ThetaLayout{fit.theta.M(), fit.theta.P(), fit.theta.cuts.R(),
                           fit.theta.cuts.switch_point()};
  fit.natural = pack_natural(fit.theta, fit.layout);
  const auto uv = j.at("u").get<std::vector<double>>();
  fit.u = Eigen::Map<const Eigen::VectorXd>(uv.data(), uv.size());
  fit.converged = j.at("converged").get<bool>();
  if (j.contains("vcov")) {
    const auto v = j.at("vcov").get<std::vector<double>>();
    const int dd = fit.layout.dim();
    fit.vcov.resize(dd, dd);
    for (int r = 0; r < dd; ++r)
      for (int c = 0; c < dd; ++c) fit.vcov(r, c) = v[r * dd + c];
  }
  return fit;
}

int cmd_effects(const std::string& nodes, const std::string& edges,
                const std::string& fit_path, const std::string& out_dir,
                bool fixed_effects, int discrete_col) {
  fs::create_directories(out_dir);
  LoadedData d = load_data(nodes, edges, fixed_effects, false);
  std::ifstream in(fit_path);
  if (!in) throw std::invalid_argument("cannot open fit file: " + fit_path);
  json jf = json::parse(in);
  FitResult fit = fit_from_json(jf);
  fit.theta.validate(static_cast<int>(d.design.Z.cols()));

  const EquilibriumState eq =
      solve_equilibrium(fit.theta, d.net, d.design, &fit.u, 1e-9, 1000);
  if (!eq.converged) throw NonConvergence("equilibrium failed at theta-hat");
  const DirectEffects de = direct_marginal_effects(fit.theta, d.net, d.design, eq);

  const int M = fit.theta.M();
  const int K = d.design.K;
  json out;
  const auto names = effect_names(M, K);
  Eigen::VectorXd point = stacked_effects(fit.theta, d.net, d.design, &fit.u, 1e-9);
  Eigen::VectorXd se = Eigen::VectorXd::Zero(point.size());
  if (fit.vcov.size() > 0) {
    se = delta_method_se(fit, [&](const Theta& th) {
      return stacked_effects(th, d.net, d.design, &fit.u, 1e-9);
    });
  }
  json dme = json::array();
  for (int k = 0; k < point.size(); ++k)
    dme.push_back(json{{"effect", names[k]}, {"dme", point[k]}, {"se", se[k]}});
  out["direct"] = dme;

  json totals = json::array();
  for (int k = 0; k < K; ++k) {
    const TotalEffect te =
        (k == discrete_col)
            ? indirect_and_total_discrete(fit.theta, d.net, d.design, eq, k)
            : indirect_and_total_continuous(fit.theta, d.net, d.design, eq, k);
    totals.push_back(json{{"variable", "x" + std::to_string(k + 1)},
                          {"dme", te.dme},
                          {"ime", te.ime},
                          {"total", te.total},
                          {"discrete", k == discrete_col}});
  }
  out["total"] = totals;
  out["mean_fstar"] = de.fstar.mean();
  write_json(out_dir + "/effects.json", out);
  json cfgj{{"nodes", nodes}, {"edges", edges}, {"fit", fit_path},
            {"discrete_col", discrete_col}};
  write_json(out_dir + "/manifest.json", make_manifest("effects", 0, cfgj));
  std::cout << "effects written to " << out_dir << "/effects.json\n";
  return 0;
}

int cmd_counterfactual(const std::string& nodes, const std::string& edges,
                       const std::string& fit_path, const std::string& out_dir,
                       const std::string& shares_spec, std::uint64_t seed,
                       int group_covariate, bool with_se) {
  fs::create_directories(out_dir);
  LoadedData d = load_data(nodes, edges, false, false);
  std::ifstream in(fit_path);
  if (!in) throw std::invalid_argument("cannot open fit file: " + fit_path);
  FitResult fit = fit_from_json(json::parse(in));

  CounterfactualOptions opts;
  opts.group_covariate = group_covariate;
  opts.with_se = with_se && fit.vcov.size() > 0;
  const auto shares = parse_shares(shares_spec);
  const auto curve = counterfactual(fit, d.net, d.nodes.X, shares, seed, opts);

  std::ofstream csv(out_dir + "/counterfactual.csv");
  csv << "share,mean,se,converged\n";
  csv.precision(12);
  for (const auto& pt : curve)
    csv << pt.share << "," << pt.mean << "," << pt.se << ","
        << (pt.converged ? 1 : 0) << "\n";
  json cfgj{{"nodes", nodes},  {"edges", edges},
            {"fit", fit_path}, {"shares", shares_spec},
            {"seed", seed},    {"group_covariate", group_covariate}};
  write_json(out_dir + "/manifest.json",
             make_manifest("counterfactual", seed, cfgj));
  std::cout << "counterfactual curve written (" << curve.size() << " points)\n";
  return 0;
}

int cmd_diagnose(const std::string& nodes, const std::string& edges,
                 const std::string& out_dir,
                 std::optional<int> contextual_index) {
  fs::create_directories(out_dir);
  LoadedData d = load_data(nodes, edges, false, false);
  const DiagnosticReport r =
      identification_diagnostic(d.net, d.design, contextual_index);
  json j{{"rank_zz", r.rank_zz},       {"cols_zz", r.cols_zz},
         {"cond_zz", r.cond_zz},       {"rank_pi", r.rank_pi},
         {"M", r.M},                   {"condition_a", r.cond_a_pass},
         {"condition_b", r.cond_b_pass}, {"verdict", to_string(r.verdict)},
         {"notes", r.notes}};
  write_json(out_dir + "/diagnostics.json", j);
  json cfgj{{"nodes", nodes}, {"edges", edges}};
  write_json(out_dir + "/manifest.json", make_manifest("diagnose", 0, cfgj));
  std::cout << "condition A (rank of Z): " << (r.cond_a_pass ? "PASS" : "FAIL")
            << " (rank " << r.rank_zz << "/" << r.cols_zz << ")\n"
            << "condition B (pi'pi rank): "
            << (r.cond_b_pass ? "PASS" : "FAIL") << " (rank " << r.rank_pi
            << "/" << r.M << ")\n"
            << "verdict: " << to_string(r.verdict) << "\n";
  return 0;
}

struct Welford {
  long count = 0;
  double mean = 0.0, m2 = 0.0;
  void add(double x) {
    ++count;
    const double d1 = x - mean;
    mean += d1 / count;
    m2 += d1 * (x - mean);
  }
  double sd() const { return count > 1 ? std::sqrt(m2 / (count - 1)) : 0.0; }
};

int cmd_montecarlo(const std::string& dgp, int S, int ns, int reps,
                   std::uint64_t seed, const std::string& grid_spec,
                   const std::string& out_dir) {
  fs::create_directories(out_dir);
  const std::vector<int> grid = parse_grid(grid_spec);

  // replication worker; results stored per replication, aggregated in order
  const DgpConfig proto = builtin_dgp(dgp, S, ns, seed);
  const int M = static_cast<int>(proto.alpha.rows());
  const int K = 2;
  const int neff = M * M + 2 * K;
  std::vector<Eigen::VectorXd> est(reps), truth(reps);
  std::vector<char> ok(reps, 0);
  std::vector<int> chosen_switch(reps, 0);

  const int workers = std::min(threads(), reps);
  set_threads(1);  // estimation loops run serial inside each worker
  std::atomic<int> next{0};
  auto work = [&] {
    int rep;
    while ((rep = next.fetch_add(1)) < reps) {
      try {
        DgpConfig cfg = proto;
        cfg.seed = Rng::stream(seed, rep).next_u64();
        const SimulatedData data = simulate_dataset(cfg);
        truth[rep] = stacked_effects(data.theta_true, data.net, data.design,
                                     &data.equilibrium.ye, 1e-9);
        SwitchSelection sel =
            select_cost_switch(data.net, data.design, data.y, cfg.R, grid);
        chosen_switch[rep] = sel.best.theta.cuts.switch_point();
        est[rep] = stacked_effects(sel.best.theta, data.net, data.design,
                                   &sel.best.u, 1e-9);
        ok[rep] = 1;
        logln("rep " + std::to_string(rep) + " done (switch " +
              std::to_string(chosen_switch[rep]) + ")");
      } catch (const std::exception& e) {
        logln("rep " + std::to_string(rep) + " failed: " + e.what());
        ok[rep] = 0;
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }

  const auto names = effect_names(M, K);
  std::vector<Welford> acc(neff), acc_truth(neff);
  std::ofstream reps_csv(out_dir + "/mc_reps.csv");
  reps_csv << "rep,converged,switch";
  for (const auto& nm : names) reps_csv << "," << nm;
  reps_csv << "\n";
  reps_csv.precision(12);
  int used = 0;
  for (int rep = 0; rep < reps; ++rep) {
    reps_csv << rep << "," << int(ok[rep]) << "," << chosen_switch[rep];
    if (ok[rep]) {
      ++used;
      for (int k = 0; k < neff; ++k) {
        acc[k].add(est[rep][k]);
        acc_truth[k].add(truth[rep][k]);
        reps_csv << "," << est[rep][k];
      }
    } else {
      for (int k = 0; k < neff; ++k) reps_csv << ",";
    }
    reps_csv << "\n";
  }
  if (used == 0) throw NonConvergence("no replication converged");

  std::ofstream csv(out_dir + "/mc_table.csv");
  csv << "effect,true_effect,mean,sd,reps_used\n";
  csv.precision(12);
  for (int k = 0; k < neff; ++k)
    csv << names[k] << "," << acc_truth[k].mean << "," << acc[k].mean << ","
        << acc[k].sd() << "," << used << "\n";

  json cfgj{{"dgp", dgp},   {"S", S},          {"ns", ns},
            {"reps", reps}, {"seed", seed},    {"switch_grid", grid_spec}};
  write_json(out_dir + "/manifest.json", make_manifest("montecarlo", seed, cfgj));
  std::cout << "montecarlo done: " << used << "/" << reps
            << " replications converged; table in " << out_dir
            << "/mc_table.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"peerfx: peer-effect model for count outcomes on grouped networks"};
  app.require_subcommand(1);

  std::string nodes, edges, out_dir = "out", dgp = "A", grid = "1:15";
  std::string fit_path, shares = "0,0.25,0.5,0.75,1";
  int R = 0, S = 2, ns = 250, reps = 100, threads_opt = 0;
  int discrete_col = -1, group_covariate = -1, contextual_index = -1;
  std::uint64_t seed = 1;
  double tol_inner = 1e-7, tol_outer = 1e-6;
  bool fixed_effects = false, with_se = false;

  auto add_common = [&](CLI::App* c) {
    c->add_option("--out", out_dir, "output directory");
    c->add_option("--threads", threads_opt,
                  "worker threads (0 = hardware, 1 = fully serial)");
    c->add_option("--seed", seed, "RNG seed");
  };

  auto* sim = app.add_subcommand("simulate", "simulate a built-in DGP");
  sim->add_option("--dgp", dgp, "A|B|C|D")->required();
  sim->add_option("--S", S, "number of subnetworks");
  sim->add_option("--ns", ns, "agents per subnetwork");
  add_common(sim);

  auto* est = app.add_subcommand("estimate", "NPL estimation with BIC switch selection");
  est->add_option("--nodes", nodes)->required();
  est->add_option("--edges", edges)->required();
  est->add_option("--R", R, "maximum outcome (default: max observed y)");
  est->add_option("--switch-grid", grid, "e.g. 1:15 or 1,5,9");
  est->add_flag("--fixed-effects", fixed_effects, "subnetwork intercept dummies");
  est->add_option("--tol-inner", tol_inner);
  est->add_option("--tol-outer", tol_outer);
  est->add_option("--contextual-index", contextual_index,
                  "covariate index for identification condition C");
  add_common(est);

  auto* eff = app.add_subcommand("effects", "marginal effects at a saved fit");
  eff->add_option("--nodes", nodes)->required();
  eff->add_option("--edges", edges)->required();
  eff->add_option("--fit", fit_path, "fit.json from estimate")->required();
  eff->add_flag("--fixed-effects", fixed_effects);
  eff->add_option("--discrete", discrete_col,
                  "0-based covariate index treated as a 0/1 flip variable");
  add_common(eff);

  auto* cf = app.add_subcommand("counterfactual", "group-composition curve");
  cf->add_option("--nodes", nodes)->required();
  cf->add_option("--edges", edges)->required();
  cf->add_option("--fit", fit_path)->required();
  cf->add_option("--shares", shares, "comma-separated target shares");
  cf->add_option("--group-covariate", group_covariate,
                 "0-based X column mirroring the group dummy");
  cf->add_flag("--with-se", with_se, "delta-method standard errors");
  add_common(cf);

  auto* dg = app.add_subcommand("diagnose", "identification diagnostics");
  dg->add_option("--nodes", nodes)->required();
  dg->add_option("--edges", edges)->required();
  dg->add_option("--contextual-index", contextual_index);
  add_common(dg);

  auto* mc = app.add_subcommand("montecarlo", "replication study of a built-in DGP");
  mc->add_option("--dgp", dgp)->required();
  mc->add_option("--S", S);
  mc->add_option("--ns", ns);
  mc->add_option("--reps", reps);
  mc->add_option("--switch-grid", grid);
  add_common(mc);

  CLI11_PARSE(app, argc, argv);
  set_threads(threads_opt == 0 ? 1 : threads_opt);

  try {
    std::optional<int> ctx_idx;
    if (contextual_index >= 0) ctx_idx = contextual_index;
    if (sim->parsed()) return cmd_simulate(dgp, S, ns, seed, out_dir);
    if (est->parsed())
      return cmd_estimate(nodes, edges, out_dir, R, grid, fixed_effects, seed,
                          tol_inner, tol_outer, ctx_idx);
    if (eff->parsed())
      return cmd_effects(nodes, edges, fit_path, out_dir, fixed_effects,
                         discrete_col);
    if (cf->parsed())
      return cmd_counterfactual(nodes, edges, fit_path, out_dir, shares, seed,
                                group_covariate, with_se);
    if (dg->parsed()) return cmd_diagnose(nodes, edges, out_dir, ctx_idx);
    if (mc->parsed())
      return cmd_montecarlo(dgp, S, ns, reps, seed, grid, out_dir);
  } catch (const NonConvergence& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
