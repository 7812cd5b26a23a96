#pragma once

#include "adate/model.hpp"

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace adate {

/// Thrown when a pivot block stays indefinite after regularization.
class SolverError : public std::runtime_error {
 public:
  SolverError(const std::string& what, int block) : std::runtime_error(what), block_(block) {}
  int block() const { return block_; }

 private:
  int block_;
};

/// Symmetric block-tridiagonal normal equations M s = b over a window of
/// N-dimensional states. `sub[i]` holds M_{i+1,i}; the upper band is its transpose.
template <int N>
struct BlockTridiagonalSystem {
  using Block = Eigen::Matrix<double, N, N>;
  using Vector = Eigen::Matrix<double, N, 1>;

  std::vector<Block> diag;
  std::vector<Block> sub;
  std::vector<Vector> rhs;
  int first_index = 1;
  Flags flags = kNone;

  std::size_t size() const { return diag.size(); }
  void resize(std::size_t n);

  Eigen::MatrixXd dense() const;
  Eigen::VectorXd dense_rhs() const;
};

/// Position observation of a state: H = [I 0 ...] with covariance r.
struct Measurement {
  Vec3 z = Vec3::Zero();
  int sensor = 0;
  Mat3 r = Mat3::Identity();
};

/// One linearized transition between consecutive window states:
/// s_{i+1} = phi s_i + offset + eps, eps ~ N(0, q).
template <int N>
struct LinearTransition {
  Eigen::Matrix<double, N, N> phi;
  Eigen::Matrix<double, N, N> q;
  Eigen::Matrix<double, N, 1> offset = Eigen::Matrix<double, N, 1>::Zero();
};

/// Frozen predecessor of the first window state, entering through
/// Q^-1 (Phi s_anchor + offset).
template <int N>
struct Anchor {
  Eigen::Matrix<double, N, 1> state;
  LinearTransition<N> transition;
};

/// Builds the normal equations of
///   sum_i |s_i - Phi s_{i-1} - offset|^2_{Q^-1} + sum_{i,j} |H s_i - z_ij|^2_{R^-1}
/// over the window. `transitions[i]` links state i to i+1.
template <int N>
BlockTridiagonalSystem<N> assemble(std::span<const LinearTransition<N>> transitions,
                                   std::span<const std::vector<Measurement>> observations,
                                   const std::optional<Anchor<N>>& anchor, int first_index = 1);

/// Block LDL^T elimination; linear in the number of blocks.
template <int N>
std::vector<Eigen::Matrix<double, N, 1>> solve(BlockTridiagonalSystem<N>& sys);

/// Inverse of a symmetric covariance; inflates by 1e-9 * trace * I when it is
/// not safely invertible and raises kRegularized in `flags`.
template <int N>
Eigen::Matrix<double, N, N> regularized_inverse(const Eigen::Matrix<double, N, N>& cov,
                                                Flags& flags);

extern template struct BlockTridiagonalSystem<6>;
extern template struct BlockTridiagonalSystem<10>;

}  // namespace adate
