#pragma once

#include "adate/estimator.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace adate {

/// Restricted area: d^2 = (x - center)^T shape^-1 (x - center).
struct Obstacle {
  Vec3 center = Vec3::Zero();
  Mat3 shape = Mat3::Identity();
  double margin = 0.5;  // danger band beyond the safe distance, in units of d

  void validate() const;
};

/// Key point the vehicle should reach at step `time`.
struct Node {
  Vec3 position = Vec3::Zero();
  Mat3 cov = Mat3::Identity();
  int time = 0;
};

struct NodePlan {
  std::vector<Node> nodes;  // arrival times strictly increasing
  void validate() const;
};

/// exp(-d^2 / 2), clipped to [0, 1 - 1e-12].
double hit_probability(const Vec3& x, const Obstacle& obs);
double hit_probability(const State& s, const Obstacle& obs);

struct NavConfig {
  double tau = 1.0;
  double eta = 1e-2;         // outer loop stops once the largest Psi revision is below
  int max_iterations = 6;
  double max_hit = 0.01;     // accepted plans keep P_h below this everywhere
  double hinge_sigma = 0.01; // spread of the clearance pseudo-observation, m
  int horizon_nodes = 2;     // plan to the next this many nodes
  Vec10 psi = (Vec10() << 1, 1, 1, 0.1, 0.1, 0.1, 0.01, 0.01, 0.01, 0.01).finished();

  void validate() const;
  /// Distance below which P_h reaches max_hit.
  double safe_distance() const;
};

struct PlanResult {
  std::vector<State> states;  // states[j] at step k + j; states[0] is the current state
  int iterations = 0;
  bool converged = false;
  bool feasible = true;       // false when a node is unsafe or P_h >= max_hit remains
  double max_hit = 0.0;
  Flags flags = kNone;
};

/// Extended MAP of the plan from the current state at step k to the arrival
/// time of the last upcoming node. `warm` holds a previous plan starting at
/// step k (may be empty or shorter; the rest is a straight-line guess).
PlanResult plan_window(const State& current, int k, std::span<const State> warm,
                       const NodePlan& plan, std::span<const Obstacle> obstacles,
                       const ModelParams& params, const NavConfig& cfg = {});

struct NavigationTrace {
  std::vector<State> path;         // executed states, path[0] is the start
  std::vector<int> iterations;     // outer iterations of each replan
  std::vector<double> max_hit;     // along each accepted plan
  std::vector<std::vector<State>> plans;  // plans[k] starts at path[k]
  bool feasible = true;
};

/// Executes the first step of every plan and replans, until the last node.
NavigationTrace navigate(const State& start, const NodePlan& plan,
                         std::span<const Obstacle> obstacles, const ModelParams& params,
                         const NavConfig& cfg = {});

/// Steering prior for planning: turns about the vertical are cheap, pitch and
/// roll a hundred times dearer.
ModelParams planning_params();

struct NavScenario {
  State start;
  NodePlan plan;
  std::vector<Obstacle> obstacles;
  ModelParams params = planning_params();
  NavConfig cfg;
};

/// Level flight at 10 m/s through nodes 200 m apart every 20 s, with one
/// sphere of radius 4-8 m placed at random near each of the first
/// `n_obstacles` legs (at most the number of legs).
NavScenario random_nav_scenario(int n_obstacles, std::uint64_t seed);

}  // namespace adate
