#include "adate/baselines.hpp"

#include <chrono>
#include <cmath>
#include <numbers>

namespace adate {

namespace {

// F(1, ~17) at roughly the 0.5% level.
constexpr double kArcFTest = 10.0;

template <int N>
using Vec = Eigen::Matrix<double, N, 1>;
template <int N>
using Mat = Eigen::Matrix<double, N, N>;

// Lower Cholesky factor of a covariance, jittered once if needed.
template <int N>
Mat<N> covariance_sqrt(const Mat<N>& cov, Flags* flags) {
  const Mat<N> sym = 0.5 * (cov + cov.transpose());
  Eigen::LLT<Mat<N>> llt(sym);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  if (flags) *flags |= kRegularized;
  Eigen::SelfAdjointEigenSolver<Mat<N>> es(sym);
  const Vec<N> ev = es.eigenvalues().cwiseMax(1e-12 * std::max(1.0, std::abs(sym.trace())));
  return es.eigenvectors() * ev.cwiseSqrt().asDiagonal();
}

template <int N>
void transform(const Vec<N>& mean, const Mat<N>& cov, const UkfParams& ukf,
               const std::function<Vec<N>(const Vec<N>&)>& f, Vec<N>& out_mean, Mat<N>& out_cov,
               Flags* flags) {
  const double n = N;
  const double lambda = ukf.alpha * ukf.alpha * (n + ukf.kappa) - n;
  const Mat<N> l = covariance_sqrt<N>((n + lambda) * cov, flags);
  const double wm0 = lambda / (n + lambda);
  const double wc0 = wm0 + (1.0 - ukf.alpha * ukf.alpha + ukf.beta);
  const double wi = 0.5 / (n + lambda);

  std::vector<Vec<N>> ys;
  ys.reserve(2 * N + 1);
  ys.push_back(f(mean));
  for (int i = 0; i < N; ++i) {
    ys.push_back(f(mean + l.col(i)));
    ys.push_back(f(mean - l.col(i)));
  }
  out_mean = wm0 * ys[0];
  for (int i = 1; i <= 2 * N; ++i) out_mean += wi * ys[i];
  Vec<N> d = ys[0] - out_mean;
  out_cov = wc0 * d * d.transpose();
  for (int i = 1; i <= 2 * N; ++i) {
    d = ys[i] - out_mean;
    out_cov += wi * d * d.transpose();
  }
  out_cov = 0.5 * (out_cov + out_cov.transpose());
}

// Sequential Kalman update with position observations; H = [I 0].
template <int N>
void position_update(Vec<N>& s, Mat<N>& p, std::span<const Measurement> z, Flags& flags,
                     double* nis_out = nullptr) {
  double worst = 0.0;
  for (const auto& m : z) {
    const Vec3 nu = m.z - s.template head<3>();
    const Mat3 innov = p.template topLeftCorner<3, 3>() + m.r;
    const Mat3 s_inv = regularized_inverse<3>(innov, flags);
    const Eigen::Matrix<double, N, 3> gain = p.template leftCols<3>() * s_inv;
    worst = std::max(worst, nu.dot(s_inv * nu));
    s += gain * nu;
    // Joseph form keeps p symmetric PSD.
    Mat<N> ikh = Mat<N>::Identity();
    ikh.template leftCols<3>() -= gain;
    p = ikh * p * ikh.transpose() + gain * m.r * gain.transpose();
    p = 0.5 * (p + p.transpose());
  }
  if (nis_out) *nis_out = worst;
}

}  // namespace

Vec9 CaState::vector() const {
  Vec9 s;
  s << x, v, a;
  return s;
}

CaState CaState::from_vector(const Vec9& s) {
  return {s.segment<3>(0), s.segment<3>(3), s.segment<3>(6)};
}

bool CaState::finite() const { return vector().allFinite(); }

Mat9 ca_transition(double tau) {
  Mat9 a = Mat9::Identity();
  a.block<3, 3>(0, 3) = tau * Mat3::Identity();
  a.block<3, 3>(0, 6) = 0.5 * tau * tau * Mat3::Identity();
  a.block<3, 3>(3, 6) = tau * Mat3::Identity();
  return a;
}

Mat9 ca_process_noise(double q, double tau) {
  const double t2 = tau * tau, t3 = t2 * tau, t4 = t3 * tau, t5 = t4 * tau;
  Eigen::Matrix3d k;
  k << t5 / 20, t4 / 8, t3 / 6, t4 / 8, t3 / 3, t2 / 2, t3 / 6, t2 / 2, tau;
  Mat9 out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out.block<3, 3>(3 * i, 3 * j) = q * k(i, j) * Mat3::Identity();
  return out;
}

double ca_jerk_psd(const ModelParams& prm, double speed) {
  const double v = std::max(speed, 1.0);
  return prm.d_a / (v * v) + prm.d_t.trace() / 3.0 * v * v;
}

template <int N>
void unscented_transform(const Vec<N>& mean, const Mat<N>& cov, const UkfParams& ukf,
                         const std::function<Vec<N>(const Vec<N>&)>& f, Vec<N>& out_mean,
                         Mat<N>& out_cov) {
  transform<N>(mean, cov, ukf, f, out_mean, out_cov, nullptr);
}

template void unscented_transform<9>(const Vec9&, const Mat9&, const UkfParams&,
                                     const std::function<Vec9(const Vec9&)>&, Vec9&, Mat9&);
template void unscented_transform<10>(const Vec10&, const Mat10&, const UkfParams&,
                                      const std::function<Vec10(const Vec10&)>&, Vec10&, Mat10&);

CaFilter ekf_ca_step(const CaFilter& f, std::span<const Measurement> z, double q, double tau) {
  CaFilter out = f;
  const Mat9 a = ca_transition(tau);
  Vec9 s = a * f.state.vector();
  Mat9 p = a * f.cov * a.transpose() + ca_process_noise(q, tau);
  position_update<9>(s, p, z, out.flags);
  out.state = CaState::from_vector(s);
  out.cov = p;
  if (!out.state.finite()) out.flags |= kDiverged;
  return out;
}

CaFilter ukf_ca_step(const CaFilter& f, std::span<const Measurement> z, double q, double tau,
                     const UkfParams& ukf) {
  CaFilter out = f;
  const Mat9 a = ca_transition(tau);
  Vec9 s;
  Mat9 p;
  transform<9>(f.state.vector(), f.cov, ukf, [&](const Vec9& x) -> Vec9 { return a * x; }, s, p,
               &out.flags);
  p += ca_process_noise(q, tau);
  position_update<9>(s, p, z, out.flags);
  out.state = CaState::from_vector(s);
  out.cov = p;
  if (!out.state.finite()) out.flags |= kDiverged;
  return out;
}

PlsFilter ukf_pls_step(const PlsFilter& f, std::span<const Measurement> z, const ModelParams& prm,
                       double tau, const UkfParams& ukf) {
  PlsFilter out = f;
  Vec10 s;
  Mat10 p;
  transform<10>(
      f.state.vector(), f.cov, ukf,
      [&](const Vec10& x) -> Vec10 {
        const auto pred = predict_state(State::from_vector(x), prm, tau);
        out.flags |= pred.flags & (kRk4Fallback | kDegenerateSpeed);
        return pred.state.vector();
      },
      s, p, &out.flags);
  p += propagated_covariance(State::from_vector(s), prm, tau);
  position_update<10>(s, p, z, out.flags, &out.nis);
  out.state = State::from_vector(s);
  out.cov = p;
  if (!out.state.finite() || out.nis > kDivergenceNis) out.flags |= kDiverged;
  return out;
}

PlsFilter ekf_pls_step(const PlsFilter& f, std::span<const Measurement> z, const ModelParams& prm,
                       double tau) {
  PlsFilter out = f;
  if (!f.state.finite()) {
    out.flags |= kDiverged;
    return out;
  }
  Flags flags = kNone;
  const auto pred = predict_state(f.state, prm, tau);
  const Mat10 phi = transition_matrix(f.state, prm, tau, &flags);
  const Mat10 q = transition_covariance(f.state, prm, tau, &flags);
  Vec10 s = pred.state.vector();
  Mat10 p = phi * f.cov * phi.transpose() + q;
  position_update<10>(s, p, z, out.flags, &out.nis);
  out.state = State::from_vector(s);
  out.cov = p;
  out.flags |= (flags | pred.flags) & (kRk4Fallback | kDegenerateSpeed);
  if (!out.state.finite() || !p.allFinite() || out.nis > kDivergenceNis) out.flags |= kDiverged;
  return out;
}

double nees(const PlsFilter& f, const State& truth) {
  const Vec10 e = f.state.vector() - truth.vector();
  return e.dot(f.cov.ldlt().solve(e));
}

Mat6 ct_transition(double omega, double tau) {
  Mat6 f = Mat6::Identity();
  const double th = omega * tau;
  const double c = std::cos(th), s = std::sin(th);
  // Integrals of the rotation over [0, tau]; series near zero turn rate.
  double si, ci;
  if (std::abs(th) < 1e-6) {
    si = tau * (1.0 - th * th / 6.0);
    ci = tau * (th / 2.0 - th * th * th / 24.0);
  } else {
    si = s / omega;
    ci = (1.0 - c) / omega;
  }
  Mat3 rot = Mat3::Identity();
  rot(0, 0) = c;
  rot(0, 1) = -s;
  rot(1, 0) = s;
  rot(1, 1) = c;
  Mat3 integ = Mat3::Zero();
  integ(0, 0) = si;
  integ(0, 1) = -ci;
  integ(1, 0) = ci;
  integ(1, 1) = si;
  integ(2, 2) = tau;
  f.block<3, 3>(0, 3) = integ;
  f.block<3, 3>(3, 3) = rot;
  return f;
}

Mat6 ct_process_noise(double q, double tau) {
  Mat6 out = Mat6::Zero();
  out.block<3, 3>(0, 0) = q * tau * tau * tau / 3.0 * Mat3::Identity();
  out.block<3, 3>(0, 3) = q * tau * tau / 2.0 * Mat3::Identity();
  out.block<3, 3>(3, 0) = q * tau * tau / 2.0 * Mat3::Identity();
  out.block<3, 3>(3, 3) = q * tau * Mat3::Identity();
  return out;
}

double fit_turn_rate(std::span<const Vec3> points, std::span<const double> times) {
  const std::size_t n = points.size();
  if (n < 4 || times.size() != n) return 0.0;
  // Kasa fit: x^2 + y^2 + D x + E y + F = 0, centred for conditioning.
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (const auto& p : points) mean += p.head<2>();
  mean /= static_cast<double>(n);
  Eigen::MatrixXd a(n, 3);
  Eigen::VectorXd b(n);
  double spread = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector2d q = points[i].head<2>() - mean;
    a.row(i) << q.x(), q.y(), 1.0;
    b(i) = -q.squaredNorm();
    spread = std::max(spread, q.norm());
  }
  if (spread <= 0.0) return 0.0;
  const Eigen::Vector3d sol = a.colPivHouseholderQr().solve(b);
  const Eigen::Vector2d centre(-sol(0) / 2.0, -sol(1) / 2.0);
  const double r2 = centre.squaredNorm() - sol(2);
  // A radius far beyond the arc length means the points are a straight line.
  if (!std::isfinite(r2) || r2 <= 0.0 || std::sqrt(r2) > 1e3 * spread) return 0.0;

  // Keep the arc only if it explains the points significantly better than a
  // line: F-test on the geometric residuals, one extra parameter.
  const double radius = std::sqrt(r2);
  Eigen::Matrix2d scatter = Eigen::Matrix2d::Zero();
  double sse_circle = 0.0;
  for (const auto& p : points) {
    const Eigen::Vector2d q = p.head<2>() - mean;
    scatter += q * q.transpose();
    const double e = (q - centre).norm() - radius;
    sse_circle += e * e;
  }
  const double sse_line = Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d>(scatter).eigenvalues()(0);
  const double dof = static_cast<double>(n) - 3.0;
  if (sse_line <= 1e-12 * spread * spread) return 0.0;
  if (sse_circle > 0.0 && (sse_line - sse_circle) * dof < kArcFTest * sse_circle) return 0.0;

  double prev = 0.0, offset = 0.0, st = 0.0, sth = 0.0, stt = 0.0, sthh = 0.0;
  std::vector<double> theta(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector2d q = points[i].head<2>() - mean - centre;
    double th = std::atan2(q.y(), q.x());
    if (i > 0) {
      while (th + offset - prev > std::numbers::pi) offset -= 2.0 * std::numbers::pi;
      while (th + offset - prev < -std::numbers::pi) offset += 2.0 * std::numbers::pi;
    }
    theta[i] = th + offset;
    prev = theta[i];
    st += times[i];
    sth += theta[i];
  }
  st /= n;
  sth /= n;
  for (std::size_t i = 0; i < n; ++i) {
    stt += (times[i] - st) * (times[i] - st);
    sthh += (times[i] - st) * (theta[i] - sth);
  }
  return stt > 0.0 ? sthh / stt : 0.0;
}

MapCtResult map_ct(std::span<const std::vector<Measurement>> obs, const MapCtConfig& cfg) {
  MapCtResult out;
  const int n = static_cast<int>(obs.size());
  if (n == 0) return out;
  if (obs[0].empty()) throw std::invalid_argument("map-ct: the first step needs an observation");

  Flags ignored = kNone;
  const auto fused = [&](const std::vector<Measurement>& ms) {
    Mat3 info = Mat3::Zero();
    Vec3 acc = Vec3::Zero();
    for (const auto& m : ms) {
      const Mat3 w = regularized_inverse<3>(m.r, ignored);
      info += w;
      acc += w * m.z;
    }
    return Vec3(info.ldlt().solve(acc));
  };

  Vec6 seed = Vec6::Zero();
  seed.head<3>() = fused(obs[0]);
  const Vec6 var = cfg.prior_sigma.cwiseProduct(cfg.prior_sigma);
  const std::optional<Anchor<6>> anchor =
      Anchor<6>{seed, {Mat6::Identity(), var.asDiagonal(), Vec6::Zero()}};
  const Mat6 q = ct_process_noise(cfg.accel_psd, cfg.tau);

  std::vector<Vec3> fit_points;
  std::vector<double> fit_times;
  std::vector<LinearTransition<6>> transitions;
  for (int k = 1; k <= n; ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    if (!obs[k - 1].empty()) {
      fit_points.push_back(fused(obs[k - 1]));
      fit_times.push_back((k - 1) * cfg.tau);
      if (static_cast<int>(fit_points.size()) > cfg.fit_window) {
        fit_points.erase(fit_points.begin());
        fit_times.erase(fit_times.begin());
      }
    }
    if (k > 1) {
      double omega = fit_turn_rate(fit_points, fit_times);
      omega = std::clamp(omega, -cfg.max_turn_rate, cfg.max_turn_rate);
      out.turn_rates.push_back(omega);
      transitions.push_back({ct_transition(omega, cfg.tau), q, Vec6::Zero()});
    }
    try {
      auto sys = assemble<6>(transitions, obs.subspan(0, k), anchor, 1);
      out.states = solve(sys);
      out.flags |= sys.flags;
    } catch (const SolverError&) {
      out.flags |= kSolverFailed;
      // Keep the previous solution and extend it by the transition.
      const Vec6 last = out.states.empty() ? seed : out.states.back();
      out.states.push_back(k > 1 ? Vec6(transitions.back().phi * last) : last);
    }
    out.step_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return out;
}

}  // namespace adate
