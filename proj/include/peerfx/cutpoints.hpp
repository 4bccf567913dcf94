#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace peerfx {

/// Per-group threshold sequence built from a semiparametric cost with
/// switch point `switch_r`: free spacings delta_g(r) = gamma_g(r) -
/// gamma_g(r-1) for r = 2..switch_r, then a constant spacing tail_g
/// beyond. Conventions: gamma_g(0) = -inf, gamma_g(1) = 0,
/// gamma_g(R+1) = +inf. With switch_r = 1 the cost is fully quadratic
/// (all spacings equal tail_g).
class CutPointSpec {
 public:
  CutPointSpec() = default;

  CutPointSpec(int R, int M, int switch_r, Eigen::MatrixXd deltas,
               Eigen::VectorXd tail)
      : R_(R), M_(M), switch_(switch_r), deltas_(std::move(deltas)),
        tail_(std::move(tail)) {
    if (R_ < 1) throw std::invalid_argument("R must be >= 1");
    if (M_ < 1) throw std::invalid_argument("M must be >= 1");
    if (switch_ < 1 || switch_ > R_)
      throw std::invalid_argument("switch point must lie in [1, R]");
    if (deltas_.rows() != M_ || deltas_.cols() != switch_ - 1)
      throw std::invalid_argument("deltas must be M x (switch-1)");
    if (tail_.size() != M_) throw std::invalid_argument("tail must have M entries");
    if ((deltas_.size() > 0 && (deltas_.array() <= 0.0).any()) ||
        (tail_.array() <= 0.0).any())
      throw std::invalid_argument("spacings must be strictly positive");
    rebuild();
  }

  /// Quadratic cost: evenly spaced thresholds with per-group spacing.
  static CutPointSpec quadratic(int R, const Eigen::VectorXd& spacing) {
    const int M = static_cast<int>(spacing.size());
    return CutPointSpec(R, M, 1, Eigen::MatrixXd(M, 0), spacing);
  }

  int R() const { return R_; }
  int M() const { return M_; }
  int switch_point() const { return switch_; }
  const Eigen::MatrixXd& deltas() const { return deltas_; }
  const Eigen::VectorXd& tail() const { return tail_; }
  /// Free spacing parameters per group: (switch - 1) deltas plus the tail.
  int params_per_group() const { return switch_; }

  /// gamma_g(r) for r in 0..R+1 (boundaries give -inf / +inf).
  double gamma(int g, int r) const {
    if (g < 0 || g >= M_) throw std::invalid_argument("group out of range");
    if (r < 0 || r > R_ + 1)
      throw std::invalid_argument("threshold index " + std::to_string(r) +
                                  " outside 0.." + std::to_string(R_ + 1));
    return table_(g, r);
  }

  /// Row of finite thresholds gamma_g(1..R) plus the boundary sentinels.
  const Eigen::MatrixXd& table() const { return table_; }

 private:
  void rebuild() {
    const double inf = std::numeric_limits<double>::infinity();
    table_.resize(M_, R_ + 2);
    for (int g = 0; g < M_; ++g) {
      table_(g, 0) = -inf;
      table_(g, 1) = 0.0;
      for (int r = 2; r <= R_; ++r) {
        const double step = (r <= switch_) ? deltas_(g, r - 2) : tail_(g);
        table_(g, r) = table_(g, r - 1) + step;
      }
      table_(g, R_ + 1) = inf;
    }
  }

  int R_ = 1;
  int M_ = 1;
  int switch_ = 1;
  Eigen::MatrixXd deltas_;  // M x (switch-1)
  Eigen::VectorXd tail_;    // M
  Eigen::MatrixXd table_;   // M x (R+2)
};

inline double gamma_eval(const CutPointSpec& cuts, int g, int r) {
  return cuts.gamma(g, r);
}

}  // namespace peerfx
