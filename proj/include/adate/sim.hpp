#pragma once

#include "adate/model.hpp"
#include "adate/solver.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace adate {

enum class Route { cruise, swaying, snake };

std::string to_string(Route r);
Route route_from_string(const std::string& name);

/// Inclusive range of 1-based time indices.
struct Interval {
  int start = 0;
  int end = -1;
  bool contains(int t) const { return t >= start && t <= end; }
};

struct Drift {
  Interval span;
  Vec3 offset = Vec3::Zero();
  std::vector<int> sensors{0};
};

struct Scenario {
  Route route = Route::cruise;
  int length = 600;
  double tau = 1.0;
  double noise_sigma = 10.0;  // per-axis standard deviation, m
  std::optional<Drift> drift;
  std::optional<Interval> missing;
  int sensors = 2;
  std::uint64_t seed = 1;

  double speed = 20.0;     // nominal cruise speed, m/s
  ModelParams truth;       // alpha and beta drive the ground truth
  ModelParams model;       // priors handed to the estimators
  bool random_controls = false;  // add Brownian p and c_T with truth.d_a / truth.d_t
  int substeps = 20;

  void validate() const;
};

/// Calibrated defaults per route: noise, drift magnitude and estimator priors.
Scenario default_scenario(Route route, bool drift, std::uint64_t seed = 1);

struct ScenarioData {
  std::vector<State> truth;                       // truth[t - 1] at time t
  std::vector<std::vector<Measurement>> obs;      // obs[t - 1], r = noise_sigma^2 I
};

ScenarioData generate(const Scenario& scn);

/// Continuous-time drift of the deterministic dynamics with controls held.
Vec10 pls_derivative(const State& s, const ModelParams& params);

struct EvalReport {
  double rmse_obs = 0.0;
  double rmse_est = 0.0;
  double normalized = 0.0;
  std::vector<double> per_step_errors;
};

/// Position RMSE of the estimate against truth, normalized by the raw
/// observation RMSE over all observations.
EvalReport evaluate(std::span<const State> truth, std::span<const Vec3> estimate,
                    std::span<const std::vector<Measurement>> obs);

std::vector<Vec3> positions(std::span<const State> states);

}  // namespace adate
