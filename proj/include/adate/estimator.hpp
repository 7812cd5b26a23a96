#pragma once

#include "adate/model.hpp"
#include "adate/solver.hpp"

#include <map>
#include <span>
#include <vector>

namespace adate {

/// How window transitions are linearized around the previous trajectory.
/// `state_matrix` uses transition_matrix as the coefficient of s_i with no offset;
/// `jacobian` uses s_{i+1} = f(s) + J (s_i - s) with J from prediction_jacobian.
enum class Linearization { jacobian, state_matrix };

struct AdateConfig {
  double eta = 1e-5;          // truncation threshold on the Psi-norm of state revisions
  double t_m = 10.0;          // fading-memory time, s
  Vec10 psi = (Vec10() << 1, 1, 1, 0.1, 0.1, 0.1, 0.01, 0.01, 0.01, 0.01).finished();
  int min_window = 10;
  double outlier_factor = 3.0;  // threshold is outlier_factor * sqrt(3) on the Mahalanobis norm
  double tau = 1.0;

  bool adapt_q = true;
  bool adapt_r = true;
  bool truncate = true;
  Linearization linearization = Linearization::jacobian;
  // The window is assembled with q_seq[i] + q_floor * prior_i, so the
  // adapted covariance can inflate freely but cannot collapse below a
  // fraction of the model prior.
  double q_floor = 0.5;
  // Each Q_{i,i+1} is adapted while it is among the latest adapt_span
  // transitions, then kept. Re-adapting every window transition on every
  // step never settles (a smaller Q stiffens the trajectory, which shrinks
  // the transition errors further), so old states keep being revised and the
  // window cannot truncate. Zero adapts the whole window.
  int adapt_span = 30;
  // Transitions whose linearization point moved less than this (Psi-norm)
  // reuse their cached linearization.
  double relinearize_tol = 1e-4;
  // After a run of at least bridge_min_gap steps without observations, the
  // states across the gap are re-initialized once bridge_after observed steps
  // have arrived: a cubic Hermite curve from the last state before the gap to
  // a straight-line fit through the new observations. Coasting through a long
  // gap can wind the heading far enough to leave the solution in a wrong
  // basin. Set bridge_min_gap to 0 to disable.
  int bridge_min_gap = 5;
  int bridge_after = 3;
  // Standard deviations of the weak prior on the seeded first state while it
  // is still inside the window (position, velocity, p, c_T).
  Vec10 seed_sigma = (Vec10() << 1e3, 1e3, 1e3, 30, 30, 30, 30, 0.1, 0.1, 0.1).finished();

  void validate() const;
};

/// Full trajectory s_1..s_k. Time indices in the API are 1-based; the vectors
/// are 0-based (states[i - 1] is s_i).
struct TrajectoryEstimate {
  std::vector<State> states;
  std::vector<Mat10> q_seq;                      // q_seq[i - 1] = Q_{i,i+1}
  std::vector<Mat10> q_prior;                    // model covariance each q_seq entry started from
  std::vector<std::vector<Measurement>> obs;     // r fields hold the adapted R_{i,j}
  std::vector<Flags> flags;                      // per time index
  int xi_t = 1;
  std::vector<State> prev_window;                // s_{xi_t}..s_k of the last iteration
  std::map<int, Mat3> sensor_r;                  // latest adapted covariance per sensor
  bool seeded = false;
  State seed;                                    // prior mean of s_1 once seeded

  struct CachedLinearization {
    State point;
    LinearTransition<10> transition;
    bool valid = false;
  };
  std::vector<CachedLinearization> lin_cache;    // per transition i -> i+1

  int k() const { return static_cast<int>(states.size()); }
  int window_size() const { return k() - xi_t + 1; }
};

/// (t_m q + tau eps eps^T) / (t_m + tau).
Mat10 adapt_transition_covariance(const Mat10& q, const Vec10& eps, double t_m, double tau);

struct ObservationAdaptation {
  Mat3 r;
  bool outlier = false;
  double deviation = 0.0;  // Mahalanobis norm of dz under the incoming r
};

/// Inflates r toward dz dz^T when dz is an outlier under r.
ObservationAdaptation adapt_observation_covariance(const Mat3& r, const Vec3& dz, double t_m,
                                                   double tau, double outlier_factor);

/// New truncation time from the revisions between two consecutive solutions.
/// `current` and `previous` hold states first_index, first_index + 1, ... and
/// are compared on their common prefix. The result never exceeds k - min_window;
/// step() passes the latest observed time as k.
int truncation_time(std::span<const State> current, std::span<const State> previous,
                    int first_index, int previous_xi, const AdateConfig& cfg, int k);

/// Revision norm ||a - b||_Psi.
double revision_norm(const State& a, const State& b, const Vec10& psi);

/// Linear transition from `s` to the next step under the configured scheme.
LinearTransition<10> linearize_transition(const State& s, const ModelParams& params,
                                          const AdateConfig& cfg, Flags* flags = nullptr);

/// One AdaTE iteration at time k = est.k() + 1. `new_obs` may be empty.
void step(TrajectoryEstimate& est, std::span<const Measurement> new_obs,
          const ModelParams& params, const AdateConfig& cfg);

}  // namespace adate
