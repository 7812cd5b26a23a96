#pragma once

#include <Eigen/Dense>

#include <cstdint>

namespace adate {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec10 = Eigen::Matrix<double, 10, 1>;
using Mat10 = Eigen::Matrix<double, 10, 10>;

inline constexpr int kStateDim = 10;

// Offsets of the sub-vectors inside the stacked state s = [x v p c_T].
namespace slot {
inline constexpr int x = 0;
inline constexpr int v = 3;
inline constexpr int p = 6;
inline constexpr int c = 7;
}  // namespace slot

/// Diagnostic bits attached to results that went through a numerical fallback.
enum Flag : std::uint32_t {
  kNone = 0,
  kRk4Fallback = 1u << 0,
  kDiscriminantClamped = 1u << 1,
  kLogArgClamped = 1u << 2,
  kMuSeries = 1u << 3,
  kDegenerateSpeed = 1u << 4,
  kPsdClipped = 1u << 5,
  kRegularized = 1u << 6,
  kPivotRegularized = 1u << 7,
  kSolverFailed = 1u << 8,
  kOutlier = 1u << 9,
  kInfeasible = 1u << 10,
  kDiverged = 1u << 11,
  kBridged = 1u << 12,
};
using Flags = std::uint32_t;

/// Power-limited steering state: position, velocity, specific power and
/// instantaneous angular velocity.
struct State {
  Vec3 x = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  double p = 0.0;
  Vec3 c = Vec3::Zero();

  Vec10 vector() const;
  static State from_vector(const Vec10& s);
  double speed() const { return v.norm(); }
  bool finite() const;
};

struct ModelParams {
  double alpha = 0.05;           // damping, 1/s
  double beta = 0.5;             // resistance, m/s^2
  double d_a = 1.0;              // PSD of the axial control (p-dot)
  Mat3 d_t = Mat3::Identity() * 1e-4;  // PSD of the transverse control (c_T-dot)
  double eps_speed = 1e-6;
  double eps_disc = 1e-9;

  /// Speed at which constant power balances damping and resistance.
  double equilibrium_speed(double p) const;
  /// Specific power that holds `speed` in equilibrium.
  double equilibrium_power(double speed) const { return speed * (alpha * speed + beta); }
  void validate() const;
};

/// Roots of alpha*w^2 + beta*w - p, stored with the sign convention
/// d|v|/dt = -alpha (|v| + sigma1)(|v| + sigma2) / |v|.
struct AxialRoots {
  double sigma1 = 0.0;
  double sigma2 = 0.0;
  double gamma = 0.0;
  bool clamped = false;
};

AxialRoots axial_roots(double p, const ModelParams& params);

struct SpeedPrediction {
  double speed = 0.0;
  Flags flags = kNone;
};

/// Unperturbed axial speed after `tau`, solving the implicit closed-form
/// relation of the speed ODE with a bracketed Newton iteration in log form.
SpeedPrediction predict_axial_speed(double v0, double p, const ModelParams& params, double tau);

/// Speed after `tau` by RK4 on d|v|/dt = p/|v| - alpha|v| - beta; stops at zero speed.
double integrate_axial_speed(double v0, double p, const ModelParams& params, double tau,
                             int substeps = 400);

/// Skew-symmetric cross-product matrix, skew(a) * b == a.cross(b).
Mat3 skew(const Vec3& a);

/// exp(tau [c]x) by the Rodrigues formula.
Mat3 rotation_exp(const Vec3& c, double tau);

/// Unit direction of `v` rotated by exp(tau [c]x). Speeds at or below
/// `eps_speed` return the unrotated direction (zero for a zero vector).
Vec3 rotate_direction(const Vec3& v, const Vec3& c, double tau, double eps_speed = 1e-6);

struct Compensation {
  double dv = 0.0;
  Flags flags = kNone;
};

/// Second-order correction of the mean axial speed for the random walk of p.
Compensation compensation(double v0, double p, const ModelParams& params, double tau);

struct Prediction {
  State state;
  Flags flags = kNone;
};

/// Compensated mean prediction of the state after `tau`. p and c_T are held.
Prediction predict_state(const State& s, const ModelParams& params, double tau);

/// Linearized discrete transition s(t+tau) = phi * s(t) + eps, eps ~ N(0, q).
struct TransitionStep {
  Mat10 phi = Mat10::Identity();
  Mat10 q = Mat10::Zero();
  double tau = 0.0;
  Flags flags = kNone;
};

Mat10 transition_matrix(const State& s, const ModelParams& params, double tau,
                        Flags* flags = nullptr);
Mat10 transition_covariance(const State& s, const ModelParams& params, double tau,
                            Flags* flags = nullptr);
TransitionStep linearize(const State& s, const ModelParams& params, double tau);

/// Jacobian of predict_state at `s` by central differences over the v, p and
/// c_T components (the position columns are exact).
Mat10 prediction_jacobian(const State& s, const ModelParams& params, double tau);

/// Covariance of the linearized transition consistent with prediction_jacobian:
/// int_0^tau G(r) D_u G(r)^T dr, where G(r) holds the p and c_T columns of the
/// Jacobian of predict_state over the remaining duration r (Gauss-Legendre in r).
Mat10 propagated_covariance(const State& s, const ModelParams& params, double tau);

/// Symmetrizes `m` and clips negative eigenvalues when the most negative one
/// is below -1e-9 * trace. Returns true when clipping happened.
bool enforce_psd(Mat10& m);

}  // namespace adate
