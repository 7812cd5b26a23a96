#include "adate/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace adate {

namespace {

constexpr int kNewtonMaxIter = 50;
constexpr double kNewtonTol = 1e-10;
constexpr double kRodriguesSeriesAngle = 1e-8;
constexpr double kMuSeriesLimit = 0.1;
constexpr int kMuSeriesTerms = 24;
constexpr double kJacobianStep = 1e-6;

// 5-point Gauss-Legendre nodes/weights on [-1, 1].
constexpr std::array<double, 5> kGlNodes = {-0.9061798459386640, -0.5384693101056831, 0.0,
                                            0.5384693101056831, 0.9061798459386640};
constexpr std::array<double, 5> kGlWeights = {0.2369268850561891, 0.4786286704993665,
                                              0.5688888888888889, 0.4786286704993665,
                                              0.2369268850561891};

// Log-form residual of the implicit speed relation.
double speed_residual(double w, double v0, const AxialRoots& r, double tau) {
  double f = r.sigma1 * std::log((w + r.sigma1) / (v0 + r.sigma1)) + r.gamma * tau;
  if (r.sigma2 != 0.0) {
    f -= r.sigma2 * std::log(std::abs(w + r.sigma2) / std::abs(v0 + r.sigma2));
  }
  return f;
}

double speed_residual_slope(double w, const AxialRoots& r) {
  double d = r.sigma1 / (w + r.sigma1);
  if (r.sigma2 != 0.0) d -= r.sigma2 / (w + r.sigma2);
  return d;
}

// Everything the transition blocks need about the axial motion of one state.
struct AxialTerms {
  bool degenerate = true;
  double v0 = 0.0;
  Vec3 n = Vec3::Zero();
  AxialRoots roots;
  double w_hat = 0.0;   // unperturbed predicted speed
  double dv = 0.0;      // compensation
  double e = 1.0;       // e^{-lambda tau} g = (w_hat + sigma1) / (v0 + sigma1)
  double h = 0.0;
  double ratio = 1.0;   // compensated speed ratio |v(t+tau)| / |v(t)|
  Flags flags = kNone;
};

double h_coefficient(double beta, double gamma, double eps_disc) {
  const double floor = std::sqrt(eps_disc);
  double diff = beta - gamma;
  if (std::abs(diff) < floor) diff = diff > 0.0 ? floor : -floor;
  return 2.0 / diff;
}

AxialTerms axial_terms(const State& s, const ModelParams& prm, double tau) {
  AxialTerms t;
  t.v0 = s.speed();
  t.roots = axial_roots(s.p, prm);
  if (t.roots.clamped) t.flags |= kDiscriminantClamped;
  if (t.v0 <= prm.eps_speed) {
    t.flags |= kDegenerateSpeed;
    return t;
  }
  t.degenerate = false;
  t.n = s.v / t.v0;
  const auto pred = predict_axial_speed(t.v0, s.p, prm, tau);
  const auto comp = compensation(t.v0, s.p, prm, tau);
  t.flags |= pred.flags | comp.flags;
  t.w_hat = pred.speed;
  t.dv = comp.dv;
  t.e = (t.w_hat + t.roots.sigma1) / (t.v0 + t.roots.sigma1);
  t.h = h_coefficient(prm.beta, t.roots.gamma, prm.eps_disc);
  t.ratio = t.e + t.dv / t.v0 + t.h * s.p / t.v0 * (1.0 - t.e);
  return t;
}

}  // namespace

Vec10 State::vector() const {
  Vec10 s;
  s.segment<3>(slot::x) = x;
  s.segment<3>(slot::v) = v;
  s(slot::p) = p;
  s.segment<3>(slot::c) = c;
  return s;
}

State State::from_vector(const Vec10& s) {
  State out;
  out.x = s.segment<3>(slot::x);
  out.v = s.segment<3>(slot::v);
  out.p = s(slot::p);
  out.c = s.segment<3>(slot::c);
  return out;
}

bool State::finite() const { return vector().allFinite(); }

double ModelParams::equilibrium_speed(double p) const {
  const double disc = beta * beta + 4.0 * alpha * p;
  if (disc <= 0.0) return 0.0;
  return std::max(0.0, (-beta + std::sqrt(disc)) / (2.0 * alpha));
}

void ModelParams::validate() const {
  if (!(alpha > 0.0)) throw std::invalid_argument("model: alpha must be positive");
  if (!(beta >= 0.0)) throw std::invalid_argument("model: beta must be non-negative");
  if (!(d_a >= 0.0)) throw std::invalid_argument("model: d_a must be non-negative");
  if (!(eps_speed > 0.0) || !(eps_disc > 0.0))
    throw std::invalid_argument("model: eps_speed and eps_disc must be positive");
  if (!d_t.isApprox(d_t.transpose(), 1e-12))
    throw std::invalid_argument("model: d_t must be symmetric");
  Eigen::SelfAdjointEigenSolver<Mat3> es(d_t, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -1e-12 * std::max(1.0, d_t.trace()))
    throw std::invalid_argument("model: d_t must be positive semi-definite");
}

AxialRoots axial_roots(double p, const ModelParams& prm) {
  AxialRoots r;
  double disc = prm.beta * prm.beta + 4.0 * prm.alpha * p;
  if (disc < prm.eps_disc) {
    disc = prm.eps_disc;
    r.clamped = true;
  }
  r.gamma = std::sqrt(disc);
  r.sigma1 = (prm.beta + r.gamma) / (2.0 * prm.alpha);
  r.sigma2 = (prm.beta - r.gamma) / (2.0 * prm.alpha);
  // p == 0 with beta > 0 makes sigma2 vanish up to rounding.
  if (!r.clamped && std::abs(r.sigma2) < 1e-15 * r.sigma1) r.sigma2 = 0.0;
  return r;
}

double integrate_axial_speed(double v0, double p, const ModelParams& prm, double tau,
                             int substeps) {
  const auto rate = [&](double w) { return p / w - prm.alpha * w - prm.beta; };
  const double h = tau / substeps;
  double w = v0;
  for (int i = 0; i < substeps; ++i) {
    if (w <= prm.eps_speed) {
      // Positive power restarts from rest; otherwise the object has stopped.
      if (p <= 0.0) return 0.0;
      w = prm.eps_speed;
    }
    const double k1 = rate(w);
    const double w2 = w + 0.5 * h * k1;
    if (w2 <= 0.0) return p > 0.0 ? prm.eps_speed : 0.0;
    const double k2 = rate(w2);
    const double w3 = w + 0.5 * h * k2;
    if (w3 <= 0.0) return p > 0.0 ? prm.eps_speed : 0.0;
    const double k3 = rate(w3);
    const double w4 = w + h * k3;
    if (w4 <= 0.0) return p > 0.0 ? prm.eps_speed : 0.0;
    const double k4 = rate(w4);
    w += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  return std::max(w, 0.0);
}

SpeedPrediction predict_axial_speed(double v0, double p, const ModelParams& prm, double tau) {
  SpeedPrediction out{v0, kNone};
  if (tau <= 0.0) return out;
  v0 = std::max(v0, 0.0);

  const AxialRoots r = axial_roots(p, prm);
  if (r.clamped) {
    out.speed = integrate_axial_speed(v0, p, prm, tau);
    out.flags = kDiscriminantClamped | kRk4Fallback;
    return out;
  }

  // The solution lies between v0 and the attracting speed.
  double lo = 0.0;
  double hi = 0.0;
  if (r.sigma2 < 0.0) {
    const double v_eq = -r.sigma2;
    if (std::abs(v0 - v_eq) <= 1e-14 * std::max(1.0, v_eq)) return out;
    lo = std::min(v0, v_eq);
    hi = std::max(v0, v_eq);
  } else {
    if (v0 <= 0.0) {
      out.speed = 0.0;
      return out;
    }
    lo = 0.0;
    hi = v0;
    // Residual is increasing on [0, v0]; a non-negative value at zero means
    // the object comes to rest before tau.
    if (speed_residual(0.0, v0, r, tau) >= 0.0) {
      out.speed = 0.0;
      return out;
    }
  }

  // Newton safeguarded by bisection on the bracket (lo, hi).
  const double f_hi_sign = r.sigma2 < 0.0 && hi > v0 ? -1.0 : 1.0;
  double w = v0 + tau * ((v0 > 0.0 ? p / v0 : 0.0) - prm.alpha * v0 - prm.beta);
  if (!(w > lo && w < hi)) w = 0.5 * (lo + hi);
  for (int it = 0; it < kNewtonMaxIter; ++it) {
    const double f = speed_residual(w, v0, r, tau);
    if (!std::isfinite(f)) {
      w = 0.5 * (lo + hi);
      continue;
    }
    if (std::abs(f) < kNewtonTol || (hi - lo) < 4.0 * std::numeric_limits<double>::epsilon() *
                                                       std::max(1.0, std::abs(w))) {
      out.speed = w;
      return out;
    }
    // Shrink the bracket: the sign of f at hi is f_hi_sign.
    if ((f > 0.0) == (f_hi_sign > 0.0)) {
      hi = w;
    } else {
      lo = w;
    }
    const double slope = speed_residual_slope(w, r);
    double next = w - f / slope;
    if (!std::isfinite(next) || next <= lo || next >= hi) next = 0.5 * (lo + hi);
    w = next;
  }

  out.speed = integrate_axial_speed(v0, p, prm, tau);
  out.flags |= kRk4Fallback;
  return out;
}

Mat3 skew(const Vec3& a) {
  Mat3 m;
  m << 0.0, -a.z(), a.y(), a.z(), 0.0, -a.x(), -a.y(), a.x(), 0.0;
  return m;
}

Mat3 rotation_exp(const Vec3& c, double tau) {
  const Mat3 k = skew(c * tau);
  const double theta = tau * c.norm();
  if (theta < kRodriguesSeriesAngle) {
    return Mat3::Identity() + k + 0.5 * k * k;
  }
  return Mat3::Identity() + std::sin(theta) / theta * k +
         (1.0 - std::cos(theta)) / (theta * theta) * k * k;
}

Vec3 rotate_direction(const Vec3& v, const Vec3& c, double tau, double eps_speed) {
  const double speed = v.norm();
  if (speed == 0.0) return Vec3::Zero();
  const Vec3 n = v / speed;
  if (speed <= eps_speed) return n;
  const Vec3 out = rotation_exp(c, tau) * n;
  return out / out.norm();
}

Compensation compensation(double v0, double p, const ModelParams& prm, double tau) {
  Compensation out;
  if (tau <= 0.0 || prm.d_a == 0.0) return out;
  if (v0 <= prm.eps_speed) {
    out.flags = kDegenerateSpeed;
    return out;
  }
  const double a = v0 * v0;
  const double mu = p - v0 * (prm.alpha * v0 + prm.beta);
  const double x = tau * mu / a;
  if (std::abs(x) < kMuSeriesLimit || std::abs(mu) < prm.eps_disc) {
    // The bracket is (a/mu) sum_{n>=3} (-1)^(n+1) (1 - 2/n) x^n; summing it
    // avoids the cancellation of the closed form for small x.
    double series = 0.0;
    double xn = 1.0;
    for (int n = 3; n < 3 + kMuSeriesTerms; ++n) {
      series += (n % 2 == 1 ? 1.0 : -1.0) * (1.0 - 2.0 / n) * xn;
      xn *= x;
    }
    out.dv = -v0 * prm.d_a * tau * tau * tau / (2.0 * a * a) * series;
    out.flags = kMuSeries;
    return out;
  }
  double arg = 1.0 + x;
  if (arg <= 0.0) {
    arg = prm.eps_disc;
    out.flags |= kLogArgClamped;
  }
  const double log_arg = out.flags & kLogArgClamped ? std::log(arg) : std::log1p(x);
  const double bracket = tau - 2.0 * a / mu * log_arg + tau / arg;
  out.dv = -v0 * prm.d_a / (2.0 * mu * mu) * bracket;
  return out;
}

Prediction predict_state(const State& s, const ModelParams& prm, double tau) {
  Prediction out{s, kNone};
  if (tau <= 0.0) return out;

  const double v0 = s.speed();
  const auto velocity_at = [&](double t, Flags& flags) -> Vec3 {
    if (t <= 0.0) return s.v;
    const auto sp = predict_axial_speed(v0, s.p, prm, t);
    const auto cp = compensation(v0, s.p, prm, t);
    flags |= sp.flags | cp.flags;
    const double speed = std::max(0.0, sp.speed + cp.dv);
    return speed * rotate_direction(s.v, s.c, t, prm.eps_speed);
  };

  Flags flags = kNone;
  const Vec3 v_end = velocity_at(tau, flags);
  // Position: Gauss-Legendre quadrature of the velocity path.
  Vec3 disp = Vec3::Zero();
  Flags node_flags = kNone;
  for (std::size_t i = 0; i < kGlNodes.size(); ++i) {
    const double t = 0.5 * tau * (kGlNodes[i] + 1.0);
    disp += kGlWeights[i] * velocity_at(t, node_flags);
  }
  disp *= 0.5 * tau;

  out.state.x = s.x + disp;
  out.state.v = v_end;
  out.flags = flags;
  if (v0 <= prm.eps_speed) out.flags |= kDegenerateSpeed;
  return out;
}

Mat10 transition_matrix(const State& s, const ModelParams& prm, double tau, Flags* flags) {
  Mat10 phi = Mat10::Identity();
  if (tau <= 0.0) return phi;
  const AxialTerms t = axial_terms(s, prm, tau);
  if (flags) *flags |= t.flags;

  if (t.degenerate) {
    const double decay = std::exp(-prm.alpha * tau);
    phi.block<3, 3>(slot::v, slot::v) = decay * Mat3::Identity();
    phi.block<3, 3>(slot::x, slot::v) = 0.5 * tau * (1.0 + decay) * Mat3::Identity();
    return phi;
  }

  const Mat3 vx = skew(s.v);
  const double k22 = t.e + t.dv / t.v0;
  phi.block<3, 3>(slot::v, slot::v) = k22 * Mat3::Identity();
  phi.block<3, 1>(slot::v, slot::p) = (1.0 - t.e) * t.h * t.n;
  phi.block<3, 3>(slot::v, slot::c) = -tau * t.ratio * vx;

  phi.block<3, 3>(slot::x, slot::v) =
      tau * (0.5 + 0.5 * t.e + t.dv / (2.0 * t.v0)) * Mat3::Identity();
  phi.block<3, 1>(slot::x, slot::p) = tau * (0.5 - 0.5 * t.e) * t.h * t.n;
  phi.block<3, 3>(slot::x, slot::c) = -0.5 * tau * tau * t.ratio * vx;
  return phi;
}

Mat10 transition_covariance(const State& s, const ModelParams& prm, double tau, Flags* flags) {
  Mat10 q = Mat10::Zero();
  if (tau <= 0.0) return q;
  const AxialTerms t = axial_terms(s, prm, tau);
  Flags local = t.flags;

  q(slot::p, slot::p) = tau * prm.d_a;
  q.block<3, 3>(slot::c, slot::c) = tau * prm.d_t;

  if (!t.degenerate) {
    const double tau2 = tau * tau;
    const double tau3 = tau2 * tau;
    const double tau4 = tau3 * tau;
    const double tau5 = tau4 * tau;

    // 1 - e(s) over the step, interpolated by a quadratic with the exact
    // initial slope and the exact end value.
    const double rate = s.p / t.v0 - prm.alpha * t.v0 - prm.beta;
    const double c1 = -rate / (t.v0 + t.roots.sigma1);
    const double c2 = ((1.0 - t.e) - c1 * tau) / tau2;
    const double i_a = c1 * tau2 / 2.0 + c2 * tau3 / 3.0;
    const double i_aa = c1 * c1 * tau3 / 3.0 + c1 * c2 * tau4 / 2.0 + c2 * c2 * tau5 / 5.0;
    const double i_sa = 0.5 * (c1 * tau3 / 3.0 + c2 * tau4 / 4.0);
    const double i_saa =
        0.5 * (c1 * c1 * tau4 / 4.0 + 2.0 * c1 * c2 * tau5 / 5.0 + c2 * c2 * tau5 * tau / 6.0);
    const double i_ssaa = 0.25 * (c1 * c1 * tau5 / 5.0 + c1 * c2 * tau5 * tau / 3.0 +
                                  c2 * c2 * tau5 * tau2 / 7.0);

    const Vec3 u = t.h * t.n;
    const Mat3 uu = u * u.transpose();
    const Mat3 vx = skew(s.v);
    const Mat3 kdk = vx * prm.d_t * vx.transpose();
    const Mat3 kd = vx * prm.d_t;
    const double r = t.ratio;

    q.block<3, 3>(slot::x, slot::x) = prm.d_a * i_ssaa * uu + tau5 / 20.0 * r * r * kdk;
    q.block<3, 3>(slot::x, slot::v) = prm.d_a * i_saa * uu + tau4 / 8.0 * r * r * kdk;
    q.block<3, 1>(slot::x, slot::p) = prm.d_a * i_sa * u;
    q.block<3, 3>(slot::x, slot::c) = -tau3 / 6.0 * r * kd;
    q.block<3, 3>(slot::v, slot::v) = prm.d_a * i_aa * uu + tau3 / 3.0 * r * r * kdk;
    q.block<3, 1>(slot::v, slot::p) = prm.d_a * i_a * u;
    q.block<3, 3>(slot::v, slot::c) = -tau2 / 2.0 * r * kd;

    q.block<3, 3>(slot::v, slot::x) = q.block<3, 3>(slot::x, slot::v).transpose();
    q.block<1, 3>(slot::p, slot::x) = q.block<3, 1>(slot::x, slot::p).transpose();
    q.block<3, 3>(slot::c, slot::x) = q.block<3, 3>(slot::x, slot::c).transpose();
    q.block<1, 3>(slot::p, slot::v) = q.block<3, 1>(slot::v, slot::p).transpose();
    q.block<3, 3>(slot::c, slot::v) = q.block<3, 3>(slot::v, slot::c).transpose();
  }

  if (enforce_psd(q)) local |= kPsdClipped;
  if (flags) *flags |= local;
  return q;
}

TransitionStep linearize(const State& s, const ModelParams& prm, double tau) {
  TransitionStep step;
  step.tau = tau;
  step.phi = transition_matrix(s, prm, tau, &step.flags);
  step.q = transition_covariance(s, prm, tau, &step.flags);
  return step;
}

Mat10 prediction_jacobian(const State& s, const ModelParams& prm, double tau) {
  Mat10 j = Mat10::Identity();
  if (tau <= 0.0) return j;
  const Vec10 base = s.vector();
  for (int c = slot::v; c < kStateDim; ++c) {
    const double h = kJacobianStep * std::max(1.0, std::abs(base(c)));
    Vec10 plus = base;
    Vec10 minus = base;
    plus(c) += h;
    minus(c) -= h;
    const Vec10 fp = predict_state(State::from_vector(plus), prm, tau).state.vector();
    const Vec10 fm = predict_state(State::from_vector(minus), prm, tau).state.vector();
    j.col(c) = (fp - fm) / (2.0 * h);
  }
  return j;
}

Mat10 propagated_covariance(const State& s, const ModelParams& prm, double tau) {
  Mat10 q = Mat10::Zero();
  if (tau <= 0.0) return q;
  Eigen::Matrix4d d = Eigen::Matrix4d::Zero();
  d(0, 0) = prm.d_a;
  d.block<3, 3>(1, 1) = prm.d_t;
  if (d.isZero(0.0)) return q;
  const Vec10 base = s.vector();
  for (std::size_t n = 0; n < kGlNodes.size(); ++n) {
    const double r = 0.5 * tau * (kGlNodes[n] + 1.0);
    Eigen::Matrix<double, 10, 4> g;
    for (int c = 0; c < 4; ++c) {
      const int col = slot::p + c;
      const double h = kJacobianStep * std::max(1.0, std::abs(base(col)));
      Vec10 plus = base;
      Vec10 minus = base;
      plus(col) += h;
      minus(col) -= h;
      g.col(c) = (predict_state(State::from_vector(plus), prm, r).state.vector() -
                  predict_state(State::from_vector(minus), prm, r).state.vector()) /
                 (2.0 * h);
    }
    q += 0.5 * tau * kGlWeights[n] * g * d * g.transpose();
  }
  enforce_psd(q);
  return q;
}

bool enforce_psd(Mat10& m) {
  m = 0.5 * (m + m.transpose()).eval();
  const double tr = m.trace();
  Eigen::SelfAdjointEigenSolver<Mat10> es(m);
  const auto& ev = es.eigenvalues();
  if (ev.minCoeff() >= -1e-9 * std::abs(tr)) return false;
  const Vec10 clipped = ev.cwiseMax(0.0);
  m = es.eigenvectors() * clipped.asDiagonal() * es.eigenvectors().transpose();
  m = 0.5 * (m + m.transpose()).eval();
  return true;
}

}  // namespace adate
