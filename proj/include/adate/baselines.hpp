#pragma once

#include "adate/model.hpp"
#include "adate/solver.hpp"

#include <functional>
#include <span>
#include <vector>

namespace adate {

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Vec9 = Eigen::Matrix<double, 9, 1>;
using Mat9 = Eigen::Matrix<double, 9, 9>;

/// Constant-acceleration state [x v a].
struct CaState {
  Vec3 x = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  Vec3 a = Vec3::Zero();

  Vec9 vector() const;
  static CaState from_vector(const Vec9& s);
  bool finite() const;
};

/// Exact discretization of the CA model: x += tau v + tau^2 a / 2, v += tau a.
Mat9 ca_transition(double tau);
/// White-jerk (Wiener-process acceleration) covariance for jerk PSD q per axis.
Mat9 ca_process_noise(double q, double tau);
/// Jerk PSD equivalent to the PLS controls at `speed`: the axial acceleration
/// p/|v| wanders with PSD D_A/|v|^2, the transverse one c x v with D_T |v|^2.
double ca_jerk_psd(const ModelParams& params, double speed);

/// Spread parameters of the scaled unscented transform.
struct UkfParams {
  double alpha = 1.0;
  double beta = 2.0;
  double kappa = 0.0;
};

struct CaFilter {
  CaState state;
  Mat9 cov = Mat9::Identity();
  Flags flags = kNone;
};

/// Predict by `tau` with white-jerk PSD q, then update sequentially with every
/// observation in `z` (none on a missing step).
CaFilter ekf_ca_step(const CaFilter& f, std::span<const Measurement> z, double q, double tau);
CaFilter ukf_ca_step(const CaFilter& f, std::span<const Measurement> z, double q, double tau,
                     const UkfParams& ukf = {});

struct PlsFilter {
  State state;
  Mat10 cov = Mat10::Identity();
  Flags flags = kNone;
  double nis = 0.0;  // normalized innovation squared of the last update
};

/// Sigma points through predict_state, additive propagated_covariance.
PlsFilter ukf_pls_step(const PlsFilter& f, std::span<const Measurement> z, const ModelParams& params,
                       double tau, const UkfParams& ukf = {});
/// Extended filter on transition_matrix / transition_covariance. Raises
/// kDiverged once the state goes non-finite or an innovation is wildly
/// inconsistent (NIS above kDivergenceNis); the flag is sticky.
PlsFilter ekf_pls_step(const PlsFilter& f, std::span<const Measurement> z, const ModelParams& params,
                       double tau);
inline constexpr double kDivergenceNis = 1e4;

/// Normalized estimation error squared of the filter against a known state.
double nees(const PlsFilter& f, const State& truth);

/// Unscented transform of (mean, cov) through f with the scaled sigma set.
/// Exposed for tests.
template <int N>
void unscented_transform(const Eigen::Matrix<double, N, 1>& mean,
                         const Eigen::Matrix<double, N, N>& cov, const UkfParams& ukf,
                         const std::function<Eigen::Matrix<double, N, 1>(const Eigen::Matrix<double, N, 1>&)>& f,
                         Eigen::Matrix<double, N, 1>& out_mean, Eigen::Matrix<double, N, N>& out_cov);

/// Constant-turn transition about the vertical axis for state [x v]:
/// v rotates by omega tau, x integrates the rotating velocity exactly.
Mat6 ct_transition(double omega, double tau);
/// White-acceleration covariance with PSD q per axis.
Mat6 ct_process_noise(double q, double tau);

/// Turn rate of a horizontal arc through `points` observed at `times`: an
/// algebraic circle fit followed by a least-squares slope of the unwrapped
/// bearing from the centre. Zero when the points are too straight to fit.
double fit_turn_rate(std::span<const Vec3> points, std::span<const double> times);

struct MapCtConfig {
  double tau = 1.0;
  int fit_window = 20;       // observed positions per turn-rate fit
  double max_turn_rate = 0.3;
  double accel_psd = 0.1;    // white-acceleration PSD, m^2/s^3
  Vec6 prior_sigma = (Vec6() << 1e3, 1e3, 1e3, 100, 100, 100).finished();
};

struct MapCtResult {
  std::vector<Vec6> states;          // final full-horizon solution
  std::vector<double> turn_rates;    // per transition
  std::vector<double> step_seconds;  // wall time of each step's full solve
  Flags flags = kNone;
};

/// Non-adaptive sparse MAP over the whole horizon, re-solved after every new
/// step. Each transition gets the turn rate fitted to the observations ending
/// at its arrival time.
MapCtResult map_ct(std::span<const std::vector<Measurement>> obs, const MapCtConfig& cfg);

}  // namespace adate
