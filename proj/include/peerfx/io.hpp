#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "peerfx/estimate.hpp"
#include "peerfx/network.hpp"
#include "peerfx/simulate.hpp"
#include "peerfx/theta.hpp"
#include "peerfx/version.hpp"

namespace peerfx {

using nlohmann::json;

/// Node table as read from CSV: `id,subnet,group,x1..xK[,y]`.
/// Ids and labels are remapped to dense 0-based indices; the original
/// values are kept for output.
struct NodeTable {
  std::vector<long long> ids;          // dense index -> original id
  std::vector<int> subnet;             // dense subnet label per agent
  std::vector<int> group;              // dense group label per agent
  std::vector<long long> subnet_label; // dense -> original
  std::vector<long long> group_label;  // dense -> original
  std::vector<std::string> x_names;
  Eigen::MatrixXd X;
  Eigen::VectorXi y;
  bool has_y = false;

  int n() const { return static_cast<int>(ids.size()); }
  int index_of(long long id) const {
    const auto it = std::lower_bound(sorted_.begin(), sorted_.end(),
                                     std::pair<long long, int>{id, -1});
    if (it == sorted_.end() || it->first != id)
      throw std::invalid_argument("unknown node id " + std::to_string(id));
    return it->second;
  }
  std::vector<std::pair<long long, int>> sorted_;  // (id, dense index)
};

namespace detail {
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) {
    // trim whitespace and CR
    const auto b = field.find_first_not_of(" \t\r");
    const auto e = field.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? "" : field.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

inline double parse_double(const std::string& s, int line_no,
                           const std::string& what) {
  try {
    size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("line " + std::to_string(line_no) +
                                ": cannot parse " + what + " from '" + s + "'");
  }
}

inline long long parse_int(const std::string& s, int line_no,
                           const std::string& what) {
  try {
    size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("line " + std::to_string(line_no) +
                                ": cannot parse " + what + " from '" + s + "'");
  }
}

inline std::vector<int> densify(const std::vector<long long>& raw,
                                std::vector<long long>& label_of) {
  std::map<long long, int> m;
  for (long long v : raw) m.emplace(v, 0);
  int next = 0;
  label_of.clear();
  for (auto& [k, v] : m) {
    v = next++;
    label_of.push_back(k);
  }
  std::vector<int> dense(raw.size());
  for (size_t i = 0; i < raw.size(); ++i) dense[i] = m[raw[i]];
  return dense;
}
}  // namespace detail

inline NodeTable read_nodes_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open node file: " + path);
  std::string line;
  if (!std::getline(in, line))
    throw std::invalid_argument(path + ": empty node file");
  auto header = detail::split_csv_line(line);
  const std::string schema = "expected schema: id,subnet,group,x1..xK[,y]";
  if (header.size() < 4 || header[0] != "id" || header[1] != "subnet" ||
      header[2] != "group")
    throw std::invalid_argument(path + ": bad header; " + schema);
  bool has_y = (header.back() == "y");
  const int K = static_cast<int>(header.size()) - 3 - (has_y ? 1 : 0);
  if (K < 1) throw std::invalid_argument(path + ": no covariates; " + schema);
  for (int k = 0; k < K; ++k) {
    const std::string& name = header[3 + k];
    if (name == "y" || name == "id" || name == "subnet" || name == "group")
      throw std::invalid_argument(path + ": unexpected column '" + name +
                                  "'; " + schema);
  }

  NodeTable t;
  t.has_y = has_y;
  for (int k = 0; k < K; ++k) t.x_names.push_back(header[3 + k]);
  std::vector<long long> raw_sub, raw_grp;
  std::vector<std::vector<double>> xrows;
  std::vector<int> yvals;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto f = detail::split_csv_line(line);
    if (static_cast<int>(f.size()) != static_cast<int>(header.size()))
      throw std::invalid_argument(path + ": line " + std::to_string(line_no) +
                                  ": expected " + std::to_string(header.size()) +
                                  " fields, got " + std::to_string(f.size()));
    t.ids.push_back(detail::parse_int(f[0], line_no, "id"));
    raw_sub.push_back(detail::parse_int(f[1], line_no, "subnet"));
    raw_grp.push_back(detail::parse_int(f[2], line_no, "group"));
    std::vector<double> row(K);
    for (int k = 0; k < K; ++k)
      row[k] = detail::parse_double(f[3 + k], line_no, header[3 + k]);
    xrows.push_back(std::move(row));
    if (has_y)
      yvals.push_back(static_cast<int>(detail::parse_int(f.back(), line_no, "y")));
  }
  const int n = static_cast<int>(t.ids.size());
  if (n == 0) throw std::invalid_argument(path + ": no data rows");

  t.sorted_.reserve(n);
  for (int i = 0; i < n; ++i) t.sorted_.push_back({t.ids[i], i});
  std::sort(t.sorted_.begin(), t.sorted_.end());
  for (int i = 1; i < n; ++i)
    if (t.sorted_[i].first == t.sorted_[i - 1].first)
      throw std::invalid_argument(path + ": duplicate id " +
                                  std::to_string(t.sorted_[i].first));

  t.subnet = detail::densify(raw_sub, t.subnet_label);
  t.group = detail::densify(raw_grp, t.group_label);
  t.X.resize(n, K);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < K; ++k) t.X(i, k) = xrows[i][k];
  if (has_y) {
    t.y.resize(n);
    for (int i = 0; i < n; ++i) t.y[i] = yvals[i];
  }
  return t;
}

inline std::vector<std::pair<int, int>> read_edges_csv(const std::string& path,
                                                       const NodeTable& nodes) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open edge file: " + path);
  std::string line;
  if (!std::getline(in, line))
    throw std::invalid_argument(path + ": empty edge file");
  auto header = detail::split_csv_line(line);
  if (header.size() != 2 || header[0] != "src" || header[1] != "dst")
    throw std::invalid_argument(path + ": bad header; expected schema: src,dst");
  std::vector<std::pair<int, int>> edges;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != 2)
      throw std::invalid_argument(path + ": line " + std::to_string(line_no) +
                                  ": expected 2 fields");
    try {
      edges.emplace_back(
          nodes.index_of(detail::parse_int(f[0], line_no, "src")),
          nodes.index_of(detail::parse_int(f[1], line_no, "dst")));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path + ": line " + std::to_string(line_no) +
                                  ": " + e.what());
    }
  }
  return edges;
}

inline void write_nodes_csv(const std::string& path, const GroupedNetwork& net,
                            const Eigen::MatrixXd& X,
                            const Eigen::VectorXi* y = nullptr) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "id,subnet,group";
  for (int k = 0; k < X.cols(); ++k) out << ",x" << (k + 1);
  if (y) out << ",y";
  out << "\n";
  out.precision(17);
  for (int i = 0; i < net.n(); ++i) {
    out << i << "," << net.subnet(i) << "," << (net.group(i) + 1);
    for (int k = 0; k < X.cols(); ++k) out << "," << X(i, k);
    if (y) out << "," << (*y)[i];
    out << "\n";
  }
}

inline void write_edges_csv(const std::string& path,
                            const GroupedNetwork& net) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "src,dst\n";
  for (int i = 0; i < net.n(); ++i)
    for (int j : net.friends(i)) out << i << "," << j << "\n";
}

inline json theta_to_json(const Theta& th) {
  json j;
  j["M"] = th.M();
  j["R"] = th.cuts.R();
  j["switch"] = th.cuts.switch_point();
  std::vector<double> a;
  for (int g = 0; g < th.M(); ++g)
    for (int gp = 0; gp < th.M(); ++gp) a.push_back(th.alpha(g, gp));
  j["alpha"] = a;
  j["beta"] = std::vector<double>(th.beta.data(), th.beta.data() + th.beta.size());
  std::vector<double> ls;
  for (int g = 0; g < th.M(); ++g)
    for (int r = 2; r <= th.cuts.switch_point(); ++r)
      ls.push_back(std::log(th.cuts.deltas()(g, r - 2)));
  j["log_spacings"] = ls;
  j["tail_spacings"] = std::vector<double>(th.cuts.tail().data(),
                                           th.cuts.tail().data() + th.M());
  return j;
}

inline Theta theta_from_json(const json& j) {
  const int M = j.at("M").get<int>();
  const int R = j.at("R").get<int>();
  const int sw = j.at("switch").get<int>();
  Theta th;
  th.alpha.resize(M, M);
  const auto a = j.at("alpha").get<std::vector<double>>();
  if (static_cast<int>(a.size()) != M * M)
    throw std::invalid_argument("alpha block has wrong length");
  for (int g = 0; g < M; ++g)
    for (int gp = 0; gp < M; ++gp) th.alpha(g, gp) = a[g * M + gp];
  const auto b = j.at("beta").get<std::vector<double>>();
  th.beta = Eigen::Map<const Eigen::VectorXd>(b.data(), b.size());
  const auto ls = j.at("log_spacings").get<std::vector<double>>();
  if (static_cast<int>(ls.size()) != M * (sw - 1))
    throw std::invalid_argument("log_spacings block has wrong length");
  Eigen::MatrixXd deltas(M, sw - 1);
  for (int g = 0; g < M; ++g)
    for (int r = 0; r < sw - 1; ++r)
      deltas(g, r) = std::exp(ls[g * (sw - 1) + r]);
  const auto tl = j.at("tail_spacings").get<std::vector<double>>();
  Eigen::VectorXd tail = Eigen::Map<const Eigen::VectorXd>(tl.data(), tl.size());
  th.cuts = CutPointSpec(R, M, sw, std::move(deltas), std::move(tail));
  return th;
}

inline json fit_to_json(const FitResult& fit) {
  json j;
  j["theta"] = theta_to_json(fit.theta);
  j["loglik"] = fit.loglik;
  j["loglik_sum"] = fit.loglik_sum;
  j["bic"] = fit.bic;
  j["bic_subnet"] = fit.bic_subnet;
  j["n_params"] = fit.n_params;
  j["converged"] = fit.converged;
  j["outer_iterations"] = fit.outer_iterations;
  j["fixed_point_residual"] = fit.fixed_point_residual;
  j["inner_grad_norm"] = fit.inner_grad_norm;
  j["contraction_margin"] = fit.contraction_margin;
  j["contraction_pass"] = fit.contraction_pass;
  j["spacing_margin"] = fit.spacing_margin;
  j["spacing_ok"] = fit.spacing_ok;
  j["floored_probabilities"] = fit.floored;
  j["identification"] = to_string(fit.ident_verdict);
  j["loglik_trace"] = fit.loglik_trace;
  j["ascent_warnings"] = fit.ascent_warnings;
  j["message"] = fit.message;
  j["u"] = std::vector<double>(fit.u.data(), fit.u.data() + fit.u.size());
  if (fit.vcov.size() > 0) {
    std::vector<double> v;
    v.reserve(fit.vcov.size());
    for (int r = 0; r < fit.vcov.rows(); ++r)
      for (int c = 0; c < fit.vcov.cols(); ++c) v.push_back(fit.vcov(r, c));
    j["vcov"] = v;  // row-major, natural layout [alpha|beta|deltas|tails]
    j["vcov_pseudo_inverse"] = fit.vcov_pseudo_inverse;
  }
  return j;
}

/// FNV-1a over the canonical JSON dump; stable across runs, used to
/// stamp outputs with the configuration that produced them.
inline std::string config_hash(const json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline json make_manifest(const std::string& command, std::uint64_t seed,
                          const json& config) {
  json m;
  m["command"] = command;
  m["seed"] = seed;
  m["config"] = config;
  m["config_hash"] = config_hash(config);
  m["version"] = kVersion;
  return m;
}

inline void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

}  // namespace peerfx
