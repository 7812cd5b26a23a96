#pragma once

#include "adate/nav.hpp"
#include "adate/sim.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace adate {

inline constexpr int kSchemaVersion = 1;

/// Malformed configuration. The message names the line where it went wrong
/// whenever the text pins one down.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Scenario config. Every key is optional and overrides the calibrated
/// defaults of `route` (with "drift": true picking the calibrated drift):
///   {"schema": 1, "route": "snake", "seed": 3, "length": 600, "tau": 1,
///    "noise_sigma": 10, "sensors": 2, "speed": 20, "substeps": 20,
///    "random_controls": false,
///    "drift": true | false | {"start", "end", "offset": [x,y,z], "sensors": [..]},
///    "missing": null | {"start", "end"},
///    "truth": {params}, "model": {params}}
/// with params {"alpha", "beta", "d_a", "d_t": [3] diagonal or [3][3]}.
Scenario parse_scenario(const std::string& text);
std::string scenario_to_json(const Scenario& scn);

/// Navigation config; without "nodes" the random scenario for
/// "obstacles_random" (count) and "seed" is used:
///   {"schema": 1, "start": {"x": [..], "v": [..]},
///    "nodes": [{"position": [..], "cov": [3] or [3][3], "time": 20}, ..],
///    "obstacles": [{"center": [..], "shape": [3] or [3][3], "margin": 0.5}, ..],
///    "params": {params}, "nav": {"tau", "eta", "max_iterations", "max_hit",
///    "hinge_sigma", "horizon_nodes"}}
NavScenario parse_nav_scenario(const std::string& text);
std::string nav_scenario_to_json(const NavScenario& scn);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

/// Rows (t, sensor, zx, zy, zz) with 1-based t.
std::string observations_csv(std::span<const std::vector<Measurement>> obs);
/// Inverse of observations_csv over `length` steps; every measurement gets
/// covariance sigma^2 I.
std::vector<std::vector<Measurement>> parse_observations_csv(const std::string& text, int length,
                                                             double sigma);

/// Rows (t, x_x, x_y, x_z, v_x, v_y, v_z, p, c_x, c_y, c_z), t = first_t, first_t + 1, ...
std::string states_csv(std::span<const State> states, int first_t = 1);
std::vector<State> parse_states_csv(const std::string& text);

}  // namespace adate
