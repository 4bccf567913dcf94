#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <utility>

#include "peerfx/cutpoints.hpp"

namespace peerfx {

/// Full parameter vector: M x M peer-effect matrix (row = own group,
/// column = peer group), regression coefficients matching the design
/// columns, and the threshold spacings.
struct Theta {
  Eigen::MatrixXd alpha;  // M x M
  Eigen::VectorXd beta;   // intercept block + beta1 + beta2
  CutPointSpec cuts;

  int M() const { return static_cast<int>(alpha.rows()); }
  int P() const { return static_cast<int>(beta.size()); }

  void validate(int design_cols) const {
    if (alpha.rows() != alpha.cols())
      throw std::invalid_argument("alpha must be square");
    if (alpha.rows() != cuts.M())
      throw std::invalid_argument("alpha and cut points disagree on M");
    if (static_cast<int>(beta.size()) != design_cols)
      throw std::invalid_argument("beta length != design column count");
  }
};

/// Flat layout used for the natural-parameter vector (and for the
/// reported covariance): [alpha row-major | beta | per-group deltas
/// r = 2..switch | per-group tails]. The optimizer uses the same
/// layout with spacings on the log scale.
struct ThetaLayout {
  int M = 1;
  int P = 1;
  int R = 1;
  int switch_r = 1;

  int n_alpha() const { return M * M; }
  int n_spacing() const { return M * switch_r; }  // (switch-1) deltas + tail, per group
  int dim() const { return n_alpha() + P + n_spacing(); }
  int alpha_index(int g, int gp) const { return g * M + gp; }
  int beta_index(int k) const { return n_alpha() + k; }
  int delta_index(int g, int r) const {  // r in 2..switch_r
    return n_alpha() + P + g * (switch_r - 1) + (r - 2);
  }
  int tail_index(int g) const { return n_alpha() + P + M * (switch_r - 1) + g; }
};

inline Eigen::VectorXd pack_natural(const Theta& th, const ThetaLayout& lay) {
  Eigen::VectorXd v(lay.dim());
  for (int g = 0; g < lay.M; ++g)
    for (int gp = 0; gp < lay.M; ++gp)
      v[lay.alpha_index(g, gp)] = th.alpha(g, gp);
  v.segment(lay.n_alpha(), lay.P) = th.beta;
  for (int g = 0; g < lay.M; ++g) {
    for (int r = 2; r <= lay.switch_r; ++r)
      v[lay.delta_index(g, r)] = th.cuts.deltas()(g, r - 2);
    v[lay.tail_index(g)] = th.cuts.tail()[g];
  }
  return v;
}

inline Theta unpack_natural(const Eigen::VectorXd& v, const ThetaLayout& lay) {
  if (v.size() != lay.dim())
    throw std::invalid_argument("parameter vector length mismatch");
  Theta th;
  th.alpha.resize(lay.M, lay.M);
  for (int g = 0; g < lay.M; ++g)
    for (int gp = 0; gp < lay.M; ++gp)
      th.alpha(g, gp) = v[lay.alpha_index(g, gp)];
  th.beta = v.segment(lay.n_alpha(), lay.P);
  Eigen::MatrixXd deltas(lay.M, lay.switch_r - 1);
  Eigen::VectorXd tail(lay.M);
  for (int g = 0; g < lay.M; ++g) {
    for (int r = 2; r <= lay.switch_r; ++r)
      deltas(g, r - 2) = v[lay.delta_index(g, r)];
    tail[g] = v[lay.tail_index(g)];
  }
  th.cuts = CutPointSpec(lay.R, lay.M, lay.switch_r, std::move(deltas),
                         std::move(tail));
  return th;
}

/// Natural -> optimizer coordinates: spacings go to log scale so the
/// inner maximization is unconstrained while spacings stay positive.
inline Eigen::VectorXd to_log_scale(const Eigen::VectorXd& natural,
                                    const ThetaLayout& lay) {
  Eigen::VectorXd v = natural;
  for (int k = lay.n_alpha() + lay.P; k < lay.dim(); ++k) v[k] = std::log(v[k]);
  return v;
}

inline Eigen::VectorXd from_log_scale(const Eigen::VectorXd& logv,
                                      const ThetaLayout& lay) {
  Eigen::VectorXd v = logv;
  for (int k = lay.n_alpha() + lay.P; k < lay.dim(); ++k) v[k] = std::exp(v[k]);
  return v;
}

}  // namespace peerfx
