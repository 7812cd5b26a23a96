#pragma once

#include "adate/baselines.hpp"
#include "adate/estimator.hpp"

#include <span>
#include <string>
#include <vector>

namespace adate {

enum class Method { adate_pls, ekf_ca, ukf_ca, ukf_pls, ekf_pls, map_ct };

std::string to_string(Method m);
Method method_from_string(const std::string& name);
inline constexpr Method kAllMethods[] = {Method::adate_pls, Method::ekf_ca,  Method::ukf_ca,
                                         Method::ukf_pls,   Method::ekf_pls, Method::map_ct};

struct MethodOptions {
  AdateConfig adate;
  UkfParams ukf;
  MapCtConfig ct;
  // Speed at which the CA and CT noise levels are matched to the PLS priors;
  // zero means a line fit over the first observed steps.
  double nominal_speed = 0.0;
};

/// Final estimates of a method over the whole horizon. Components a method does
/// not model (p and c_T for CA, p for CT) are NaN.
struct MethodRun {
  std::vector<State> states;
  std::vector<double> step_seconds;
  std::vector<Flags> flags;  // per time index
  bool diverged = false;
};

MethodRun run_method(Method m, std::span<const std::vector<Measurement>> obs,
                     const ModelParams& params, const MethodOptions& opts = {});

/// Speed of a least-squares line through the fused positions of the first
/// `steps` observed time indices.
double line_fit_speed(std::span<const std::vector<Measurement>> obs, double tau, int steps = 20);

}  // namespace adate
