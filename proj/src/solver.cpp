#include "adate/solver.hpp"

#include <cmath>

namespace adate {

namespace {

constexpr double kInflation = 1e-9;
constexpr double kMinRcond = 1e-13;

template <int N>
double inflation_scale(const Eigen::Matrix<double, N, N>& m) {
  const double tr = m.trace();
  return kInflation * (tr > 0.0 ? tr : 1.0);
}

}  // namespace

template <int N>
void BlockTridiagonalSystem<N>::resize(std::size_t n) {
  diag.assign(n, Block::Zero());
  sub.assign(n > 0 ? n - 1 : 0, Block::Zero());
  rhs.assign(n, Vector::Zero());
}

template <int N>
Eigen::MatrixXd BlockTridiagonalSystem<N>::dense() const {
  const auto n = static_cast<Eigen::Index>(diag.size());
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n * N, n * N);
  for (Eigen::Index i = 0; i < n; ++i) {
    m.block(i * N, i * N, N, N) = diag[i];
    if (i + 1 < n) {
      m.block((i + 1) * N, i * N, N, N) = sub[i];
      m.block(i * N, (i + 1) * N, N, N) = sub[i].transpose();
    }
  }
  return m;
}

template <int N>
Eigen::VectorXd BlockTridiagonalSystem<N>::dense_rhs() const {
  const auto n = static_cast<Eigen::Index>(rhs.size());
  Eigen::VectorXd b(n * N);
  for (Eigen::Index i = 0; i < n; ++i) b.segment(i * N, N) = rhs[i];
  return b;
}

template <int N>
Eigen::Matrix<double, N, N> regularized_inverse(const Eigen::Matrix<double, N, N>& cov,
                                                Flags& flags) {
  using Mat = Eigen::Matrix<double, N, N>;
  const Mat sym = 0.5 * (cov + cov.transpose());
  Eigen::LLT<Mat> llt(sym);
  if (llt.info() == Eigen::Success && llt.rcond() > kMinRcond) {
    return llt.solve(Mat::Identity());
  }
  flags |= kRegularized;
  Mat inflated = sym + inflation_scale<N>(sym) * Mat::Identity();
  llt.compute(inflated);
  if (llt.info() != Eigen::Success) {
    // Indefinite input: fall back to an eigenvalue floor.
    Eigen::SelfAdjointEigenSolver<Mat> es(sym);
    const double floor = inflation_scale<N>(sym);
    Eigen::Matrix<double, N, 1> ev = es.eigenvalues().cwiseMax(floor);
    return es.eigenvectors() * ev.cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
  }
  return llt.solve(Mat::Identity());
}

template <int N>
BlockTridiagonalSystem<N> assemble(std::span<const LinearTransition<N>> transitions,
                                   std::span<const std::vector<Measurement>> observations,
                                   const std::optional<Anchor<N>>& anchor, int first_index) {
  using Mat = Eigen::Matrix<double, N, N>;
  const std::size_t n = observations.size();
  if (n == 0) throw std::invalid_argument("assemble: empty window");
  if (transitions.size() + 1 != n)
    throw std::invalid_argument("assemble: need one transition per consecutive state pair");

  BlockTridiagonalSystem<N> sys;
  sys.resize(n);
  sys.first_index = first_index;

  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& m : observations[i]) {
      const Mat3 r_inv = regularized_inverse<3>(m.r, sys.flags);
      sys.diag[i].template block<3, 3>(0, 0) += r_inv;
      sys.rhs[i].template head<3>() += r_inv * m.z;
    }
  }

  for (std::size_t i = 0; i + 1 < n; ++i) {
    const auto& tr = transitions[i];
    const Mat q_inv = regularized_inverse<N>(tr.q, sys.flags);
    const Mat q_inv_phi = q_inv * tr.phi;
    sys.diag[i] += tr.phi.transpose() * q_inv_phi;
    sys.diag[i + 1] += q_inv;
    sys.sub[i] -= q_inv_phi;
    if (!tr.offset.isZero(0.0)) {
      sys.rhs[i + 1] += q_inv * tr.offset;
      sys.rhs[i] -= q_inv_phi.transpose() * tr.offset;
    }
  }

  if (anchor) {
    const Mat q_inv = regularized_inverse<N>(anchor->transition.q, sys.flags);
    sys.diag[0] += q_inv;
    sys.rhs[0] += q_inv * (anchor->transition.phi * anchor->state + anchor->transition.offset);
  }

  for (auto& d : sys.diag) d = 0.5 * (d + d.transpose()).eval();
  return sys;
}

template <int N>
std::vector<Eigen::Matrix<double, N, 1>> solve(BlockTridiagonalSystem<N>& sys) {
  using Mat = Eigen::Matrix<double, N, N>;
  using Vec = Eigen::Matrix<double, N, 1>;
  const std::size_t n = sys.size();
  if (n == 0) return {};

  std::vector<Eigen::LLT<Mat>> pivots(n);
  std::vector<Mat> lower(n, Mat::Zero());  // L_i = M_{i,i-1} D_{i-1}^-1
  std::vector<Vec> y(n);

  const auto factor = [&](std::size_t i, const Mat& d) {
    pivots[i].compute(d);
    if (pivots[i].info() == Eigen::Success && pivots[i].rcond() > kMinRcond) return;
    sys.flags |= kPivotRegularized;
    pivots[i].compute(d + inflation_scale<N>(d) * Mat::Identity());
    if (pivots[i].info() != Eigen::Success) {
      throw SolverError("solve: pivot block " + std::to_string(i) +
                            " is not positive definite after regularization",
                        static_cast<int>(i));
    }
  };

  factor(0, sys.diag[0]);
  y[0] = sys.rhs[0];
  for (std::size_t i = 1; i < n; ++i) {
    // D_{i-1}^-1 M_{i-1,i} = (M_{i,i-1} D_{i-1}^-1)^T since D is symmetric.
    const Mat dinv_upper = pivots[i - 1].solve(sys.sub[i - 1].transpose());
    lower[i] = dinv_upper.transpose();
    const Mat d = sys.diag[i] - sys.sub[i - 1] * dinv_upper;
    factor(i, 0.5 * (d + d.transpose()));
    y[i] = sys.rhs[i] - lower[i] * y[i - 1];
  }

  std::vector<Vec> s(n);
  s[n - 1] = pivots[n - 1].solve(y[n - 1]);
  for (std::size_t i = n - 1; i-- > 0;) {
    s[i] = pivots[i].solve(y[i] - sys.sub[i].transpose() * s[i + 1]);
  }
  for (const auto& v : s) {
    if (!v.allFinite()) throw SolverError("solve: non-finite solution", -1);
  }
  return s;
}

template struct BlockTridiagonalSystem<6>;
template struct BlockTridiagonalSystem<10>;

template Eigen::Matrix<double, 3, 3> regularized_inverse<3>(const Eigen::Matrix<double, 3, 3>&,
                                                            Flags&);
template Eigen::Matrix<double, 6, 6> regularized_inverse<6>(const Eigen::Matrix<double, 6, 6>&,
                                                            Flags&);
template Eigen::Matrix<double, 10, 10> regularized_inverse<10>(
    const Eigen::Matrix<double, 10, 10>&, Flags&);

template BlockTridiagonalSystem<6> assemble<6>(std::span<const LinearTransition<6>>,
                                               std::span<const std::vector<Measurement>>,
                                               const std::optional<Anchor<6>>&, int);
template BlockTridiagonalSystem<10> assemble<10>(std::span<const LinearTransition<10>>,
                                                 std::span<const std::vector<Measurement>>,
                                                 const std::optional<Anchor<10>>&, int);

template std::vector<Eigen::Matrix<double, 6, 1>> solve<6>(BlockTridiagonalSystem<6>&);
template std::vector<Eigen::Matrix<double, 10, 1>> solve<10>(BlockTridiagonalSystem<10>&);

}  // namespace adate
