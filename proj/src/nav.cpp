#include "adate/nav.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>

namespace adate {

namespace {

constexpr double kMaxHit = 1.0 - 1e-12;
constexpr int kMaxActiveSetPasses = 20;
constexpr double kActiveTol = 2e-6;  // m, slack that flips a clearance on or off

double distance(const Vec3& x, const Obstacle& o) {
  return std::sqrt(std::max(0.0, (x - o.center).dot(o.shape.ldlt().solve(x - o.center))));
}

Vec3 lateral_away(const Vec3& x, const Vec3& heading, const Obstacle& o) {
  const Vec3 h = heading.norm() > 0.0 ? Vec3(heading.normalized()) : Vec3::UnitX();
  const Vec3 rel = x - o.center;
  Vec3 u = rel - rel.dot(h) * h;
  if (u.norm() < 1e-6 * std::max(1.0, rel.norm())) {
    // Dead ahead: keep left of the heading.
    u = Vec3::UnitZ().cross(h);
    if (u.norm() < 1e-9) u = Vec3::UnitX();
  }
  return u.normalized();
}

// Largest root s of d(x + s u) = target; empty when the line along u misses
// that level set (x is clear whatever it does along u).
std::optional<double> signed_step_out(const Vec3& x, const Vec3& u, const Obstacle& o,
                                      double target) {
  const Mat3 inv = o.shape.inverse();
  const Vec3 rel = x - o.center;
  const double a = u.dot(inv * u), b = u.dot(inv * rel), c = rel.dot(inv * rel) - target * target;
  const double disc = b * b - a * c;
  if (disc < 0.0) return std::nullopt;
  return (-b + std::sqrt(disc)) / a;
}

// Side to pass an obstacle on: among directions normal to the heading, the
// one whose clearance is cheapest under the steering prior. Turning towards u
// takes steering about heading x u, whose spread is read off D_T.
Vec3 cheapest_side(const Vec3& x, const Vec3& heading, const Obstacle& o, double target,
                   const Mat3& d_t) {
  const Vec3 away = lateral_away(x, heading, o);
  const Vec3 h = heading.norm() > 0.0 ? Vec3(heading.normalized()) : Vec3::UnitX();
  const Vec3 w = h.cross(away);
  constexpr int kSides = 24;
  Vec3 best = away;
  double best_cost = std::numeric_limits<double>::infinity();
  for (int i = 0; i < kSides; ++i) {
    const double a = 2.0 * std::numbers::pi * i / kSides;
    const Vec3 u = std::cos(a) * away + std::sin(a) * w;
    const double need = std::max(0.0, signed_step_out(x, u, o, target).value_or(0.0));
    const Vec3 axis = h.cross(u);
    const double ease = axis.dot(d_t * axis);
    const double cost = ease > 0.0 ? need * need / ease : std::numeric_limits<double>::infinity();
    if (cost < best_cost) {
      best_cost = cost;
      best = u;
    }
  }
  return best;
}

// Velocity, power and steering consistent with a polyline of positions.
void fit_kinematics(std::vector<State>& s, const ModelParams& prm, double tau) {
  const int n = static_cast<int>(s.size());
  if (n < 3) return;
  std::vector<Vec3> v(n), a(n);
  for (int j = 1; j < n; ++j) v[j] = j + 1 < n ? Vec3((s[j + 1].x - s[j - 1].x) / (2 * tau))
                                               : Vec3((s[j].x - s[j - 1].x) / tau);
  v[0] = s[0].v;
  for (int j = 1; j < n; ++j)
    a[j] = j + 1 < n ? Vec3((v[j + 1] - v[j - 1]) / (2 * tau)) : Vec3((v[j] - v[j - 1]) / tau);
  for (int j = 1; j < n; ++j) {
    s[j].v = v[j];
    const double sp = v[j].norm();
    s[j].p = prm.equilibrium_power(sp) + sp * a[j].dot(v[j]) / std::max(sp, 1e-9);
    s[j].c = sp > 1e-9 ? Vec3(v[j].cross(a[j]) / (sp * sp)) : Vec3::Zero();
  }
}

// Straight segments through the node positions, timed by their arrival steps.
std::vector<State> straight_guess(const State& current, int k, std::span<const Node> nodes,
                                  const ModelParams& prm, double tau) {
  const int horizon = nodes.back().time - k;
  std::vector<State> out(horizon + 1);
  out[0] = current;
  Vec3 from = current.x;
  int t_from = k;
  for (const Node& nd : nodes) {
    const Vec3 v = (nd.position - from) / ((nd.time - t_from) * tau);
    for (int t = t_from + 1; t <= nd.time; ++t) {
      State& s = out[t - k];
      s.x = from + v * ((t - t_from) * tau);
      s.v = v;
      s.p = prm.equilibrium_power(v.norm());
      s.c.setZero();
    }
    from = nd.position;
    t_from = nd.time;
  }
  return out;
}

}  // namespace

void Obstacle::validate() const {
  if (!center.allFinite()) throw std::invalid_argument("obstacle: center must be finite");
  Eigen::LLT<Mat3> llt(0.5 * (shape + shape.transpose()));
  if (llt.info() != Eigen::Success || !shape.allFinite())
    throw std::invalid_argument("obstacle: shape must be symmetric positive definite");
  if (!(margin > 0.0)) throw std::invalid_argument("obstacle: margin must be positive");
}

void NodePlan::validate() const {
  if (nodes.empty()) throw std::invalid_argument("node plan: no nodes");
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (i > 0 && nodes[i].time <= nodes[i - 1].time)
      throw std::invalid_argument("node plan: arrival times must increase strictly");
    Eigen::LLT<Mat3> llt(nodes[i].cov);
    if (llt.info() != Eigen::Success) throw std::invalid_argument("node plan: covariance not SPD");
  }
}

void NavConfig::validate() const {
  if (!(tau > 0.0)) throw std::invalid_argument("nav: tau must be positive");
  if (!(eta > 0.0)) throw std::invalid_argument("nav: eta must be positive");
  if (max_iterations < 1) throw std::invalid_argument("nav: max_iterations must be at least 1");
  if (!(max_hit > 0.0 && max_hit < 1.0)) throw std::invalid_argument("nav: max_hit must be in (0, 1)");
  if (!(hinge_sigma > 0.0)) throw std::invalid_argument("nav: hinge_sigma must be positive");
  if (horizon_nodes < 1) throw std::invalid_argument("nav: horizon_nodes must be at least 1");
}

double NavConfig::safe_distance() const { return std::sqrt(-2.0 * std::log(max_hit)); }

double hit_probability(const Vec3& x, const Obstacle& obs) {
  const Vec3 rel = x - obs.center;
  const double d2 = rel.dot(obs.shape.ldlt().solve(rel));
  return std::clamp(std::exp(-0.5 * d2), 0.0, kMaxHit);
}

double hit_probability(const State& s, const Obstacle& obs) { return hit_probability(s.x, obs); }

PlanResult plan_window(const State& current, int k, std::span<const State> warm,
                       const NodePlan& plan, std::span<const Obstacle> obstacles,
                       const ModelParams& prm, const NavConfig& cfg) {
  cfg.validate();
  plan.validate();
  for (const auto& o : obstacles) o.validate();

  std::vector<Node> upcoming;
  for (const Node& nd : plan.nodes)
    if (nd.time > k && static_cast<int>(upcoming.size()) < cfg.horizon_nodes) upcoming.push_back(nd);
  if (upcoming.empty()) throw std::invalid_argument("nav: no node ahead of the current step");

  PlanResult res;
  const double d_safe = cfg.safe_distance();
  for (const Node& nd : upcoming)
    for (const auto& o : obstacles)
      if (hit_probability(nd.position, o) >= cfg.max_hit) res.flags |= kInfeasible;

  // Linearization points: warm start where available, straight segments beyond.
  std::vector<State> lin = straight_guess(current, k, upcoming, prm, cfg.tau);
  const int horizon = static_cast<int>(lin.size()) - 1;
  for (int j = 1; j <= horizon && j < static_cast<int>(warm.size()); ++j) lin[j] = warm[j];
  lin[0] = current;

  // Bend the guess around every obstacle it crosses: one side per obstacle,
  // chosen at the closest approach. Each detour eases in and out over the
  // whole leg between the surrounding nodes, as the planned path does.
  std::vector<int> legs{0};
  for (const Node& nd : upcoming) legs.push_back(nd.time - k);
  const auto ease = [](double s) { return s * s * (3.0 - 2.0 * s); };
  bool moved = false;
  for (const auto& o : obstacles) {
    const double target = d_safe + o.margin;
    int closest = 1;
    for (int j = 1; j <= horizon; ++j)
      if (distance(lin[j].x, o) < distance(lin[closest].x, o)) closest = j;
    if (distance(lin[closest].x, o) >= target) continue;
    const Vec3 side = cheapest_side(lin[closest].x, lin[closest].v, o, target, prm.d_t);
    std::vector<double> need(horizon + 1, 0.0), offset(horizon + 1, 0.0);
    for (int j = 1; j <= horizon; ++j)
      if (distance(lin[j].x, o) < target)
        need[j] = std::max(0.0, signed_step_out(lin[j].x, side, o, target).value_or(0.0));
    for (int i = 1; i <= horizon; ++i) {
      if (need[i] <= 0.0) continue;
      const auto leg = std::lower_bound(legs.begin(), legs.end(), i);
      if (*leg == i) continue;  // a node stays put
      const int a = *(leg - 1), b = *leg;
      for (int j = a + 1; j < b; ++j) {
        const double s = j <= i ? double(j - a) / (i - a) : double(b - j) / (b - i);
        offset[j] = std::max(offset[j], need[i] * ease(s));
      }
    }
    for (int j = 1; j <= horizon; ++j) lin[j].x += offset[j] * side;
    moved = true;
  }
  if (moved) fit_kinematics(lin, prm, cfg.tau);

  AdateConfig lin_cfg;
  lin_cfg.tau = cfg.tau;
  std::vector<std::vector<Measurement>> pseudo(horizon);
  for (const Node& nd : upcoming) {
    Measurement m;
    m.z = nd.position;
    m.r = nd.cov;
    m.sensor = -1;
    pseudo[nd.time - k - 1].push_back(m);
  }

  // The dynamics stay linearized about the initial guess (the warm start when
  // replanning); outer iterations relinearize only the obstacle terms.
  std::vector<LinearTransition<10>> trs(horizon);
  for (int j = 0; j < horizon; ++j) {
    trs[j] = linearize_transition(lin[j], prm, lin_cfg, &res.flags);
    trs[j].q = propagated_covariance(lin[j], prm, cfg.tau);
  }
  const Anchor<10> anchor{current.vector(), trs[0]};
  const auto base = assemble<10>(std::span<const LinearTransition<10>>(trs).subspan(1), pseudo,
                                 anchor, k + 1);
  res.flags |= base.flags;

  // Clearance of one step from one obstacle: the half-space normal^T x >= bound
  // tangent to the safe surface, plus the concave curvature that surface
  // contributes to the Lagrangian at the last multiplier. `dir` is a lateral
  // fallback for a point sitting at the centre.
  struct Clearance {
    bool known = false;
    bool active = false;
    Vec3 dir = Vec3::Zero();
    Vec3 normal = Vec3::Zero();
    double bound = 0.0;
    double force = 0.0;  // multiplier of the last solve
    Mat3 curvature = Mat3::Zero();
  };
  const std::size_t n_obs = obstacles.size();
  std::vector<std::vector<Clearance>> clear(n_obs, std::vector<Clearance>(horizon + 1));
  const double w_hinge = 1.0 / (cfg.hinge_sigma * cfg.hinge_sigma);
  const auto target = [&](std::size_t oi) { return d_safe + obstacles[oi].margin; };
  const auto refresh = [&](Clearance& cl, const Vec3& x, std::size_t oi) {
    // Tangent plane at the radial projection of x onto the safe surface; a
    // point at the centre falls back to the lateral direction.
    const Obstacle& o = obstacles[oi];
    const double d = distance(x, o);
    const Vec3 q = d > 1e-9 ? Vec3(o.center + (x - o.center) * (target(oi) / d))
                            : Vec3(x + signed_step_out(x, cl.dir, o, target(oi)).value_or(0.0) * cl.dir);
    cl.normal = o.shape.ldlt().solve(q - o.center).normalized();
    cl.bound = cl.normal.dot(q);
    cl.known = true;
    // Hessian of the metric distance d is (S^-1 - g g^T) / d with g its gradient.
    const Mat3 inv = o.shape.inverse();
    const Vec3 g = inv * (q - o.center) / target(oi);
    cl.curvature = -cl.force * (inv - g * g.transpose()) / (target(oi) * g.norm());
  };
  const auto introduce = [&](Clearance& cl, const State& s, std::size_t oi) {
    cl.dir = lateral_away(s.x, s.v, obstacles[oi]);
    refresh(cl, s.x, oi);
  };

  for (int it = 1; it <= cfg.max_iterations; ++it) {
    // Barrier quadratics at the current linearization points.
    std::vector<std::vector<std::pair<Mat3, Vec3>>> barrier(
        n_obs, std::vector<std::pair<Mat3, Vec3>>(horizon + 1));
    for (std::size_t oi = 0; oi < n_obs; ++oi) {
      const Obstacle& o = obstacles[oi];
      const Mat3 inv = o.shape.inverse();
      for (int j = 1; j <= horizon; ++j) {
        const Vec3 x0 = lin[j].x;
        const Vec3 rel = x0 - o.center;
        const double d0 = std::sqrt(std::max(0.0, rel.dot(inv * rel)));
        Clearance& cl = clear[oi][j];
        if (!cl.known && d0 < 2.0 * target(oi)) introduce(cl, lin[j], oi);
        else if (cl.known) refresh(cl, x0, oi);
        if (cl.known && !cl.active && cl.normal.dot(x0) <= cl.bound + 1e-9) cl.active = true;

        // -log(1 - P_h) to second order, Hessian projected to PSD.
        const double u = 0.5 * d0 * d0;
        const double ph = std::min(std::exp(-u), kMaxHit);
        const double f1 = -ph / (1.0 - ph);
        const double f2 = ph / ((1.0 - ph) * (1.0 - ph));
        const Vec3 gu = inv * rel;
        Mat3 h = f2 * gu * gu.transpose() + f1 * inv;
        Eigen::SelfAdjointEigenSolver<Mat3> es(0.5 * (h + h.transpose()));
        h = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).asDiagonal() *
            es.eigenvectors().transpose();
        barrier[oi][j] = {h, Vec3(h * x0 - f1 * gu)};
      }
    }

    // Inner active-set loop on the linearized problem.
    std::vector<Vec10> sol;
    bool failed = false;
    // The multiplier curvature is concave; drop it for this iteration if it
    // breaks positive definiteness.
    bool curved = true;
    for (int inner = 0; inner < kMaxActiveSetPasses; ++inner) {
      auto sys = base;
      for (std::size_t oi = 0; oi < n_obs; ++oi)
        for (int j = 1; j <= horizon; ++j) {
          const Clearance& cl = clear[oi][j];
          auto diag = sys.diag[j - 1].topLeftCorner<3, 3>();
          auto rhs = sys.rhs[j - 1].head<3>();
          if (cl.active) {
            // The barrier is swamped inside the band; the clearance takes over.
            diag += w_hinge * cl.normal * cl.normal.transpose();
            rhs += w_hinge * cl.normal * cl.bound;
            if (curved) {
              diag += cl.curvature;
              rhs += cl.curvature * lin[j].x;
            }
          } else {
            diag += barrier[oi][j].first;
            rhs += barrier[oi][j].second;
          }
        }
      try {
        sol = solve(sys);
      } catch (const SolverError&) {
        if (!curved) {
          failed = true;
          break;
        }
        sys.flags |= kPivotRegularized;
      }
      if (curved && (sys.flags & kPivotRegularized)) {
        curved = false;
        --inner;
        continue;
      }
      res.flags |= sys.flags;

      bool changed = false;
      for (std::size_t oi = 0; oi < n_obs; ++oi)
        for (int j = 1; j <= horizon; ++j) {
          Clearance& cl = clear[oi][j];
          const Vec3 x = sol[j - 1].head<3>();
          if (!cl.known) {
            if (hit_probability(x, obstacles[oi]) < cfg.max_hit) continue;
            introduce(cl, State::from_vector(sol[j - 1]), oi);
          }
          const double slack = cl.normal.dot(x) - cl.bound;
          if (!cl.active && slack < -kActiveTol) {
            cl.active = true;
            changed = true;
          } else if (cl.active && slack > kActiveTol) {
            // Held in rather than pushed out.
            cl.active = false;
            changed = true;
          }
        }
      if (!changed) break;
    }
    if (failed) {
      res.flags |= kSolverFailed;
      break;
    }
    for (std::size_t oi = 0; oi < n_obs; ++oi)
      for (int j = 1; j <= horizon; ++j) {
        Clearance& cl = clear[oi][j];
        const double pressed = cl.bound - cl.normal.dot(sol[j - 1].head<3>());
        cl.force = cl.active ? std::max(0.0, w_hinge * pressed) : 0.0;
      }
    double change = 0.0;
    for (int j = 1; j <= horizon; ++j) {
      const State next = State::from_vector(sol[j - 1]);
      change = std::max(change, revision_norm(next, lin[j], cfg.psi));
      lin[j] = next;
    }
    res.iterations = it;
    if (change < cfg.eta) {
      res.converged = true;
      break;
    }
  }

  res.states = std::move(lin);
  for (const auto& o : obstacles)
    for (const State& s : res.states) res.max_hit = std::max(res.max_hit, hit_probability(s, o));
  if (res.max_hit >= cfg.max_hit) res.flags |= kInfeasible;
  res.feasible = !(res.flags & kInfeasible);
  return res;
}

ModelParams planning_params() {
  ModelParams prm;
  prm.d_t = Vec3(1e-4, 1e-4, 1e-2).asDiagonal();
  return prm;
}

NavScenario random_nav_scenario(int n_obstacles, std::uint64_t seed) {
  constexpr int kLegs = 3;
  if (n_obstacles < 0 || n_obstacles > kLegs)
    throw std::invalid_argument("nav scenario: obstacle count must be in [0, 3]");
  NavScenario scn;
  scn.start.v = Vec3(10, 0, 0);
  scn.start.p = scn.params.equilibrium_power(10.0);
  for (int i = 1; i <= kLegs; ++i) scn.plan.nodes.push_back({Vec3(200.0 * i, 0, 0), 4.0 * Mat3::Identity(), 20 * i});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-0.5, 0.5);
  for (int i = 0; i < n_obstacles; ++i) {
    Obstacle o;
    o.center = Vec3(200.0 * i + 100.0 + 60.0 * unit(rng), 16.0 * unit(rng), 6.0 * unit(rng));
    const double r = 6.0 + 4.0 * unit(rng);
    o.shape = r * r * Mat3::Identity();
    scn.obstacles.push_back(o);
  }
  return scn;
}

NavigationTrace navigate(const State& start, const NodePlan& plan,
                         std::span<const Obstacle> obstacles, const ModelParams& prm,
                         const NavConfig& cfg) {
  plan.validate();
  NavigationTrace trace;
  trace.path.push_back(start);
  State now = start;
  std::vector<State> warm;
  const int k0 = 0, last = plan.nodes.back().time;
  for (int k = k0; k < last; ++k) {
    const PlanResult res = plan_window(now, k, warm, plan, obstacles, prm, cfg);
    trace.iterations.push_back(res.iterations);
    trace.max_hit.push_back(res.max_hit);
    trace.feasible = trace.feasible && res.feasible;
    now = res.states[1];
    trace.path.push_back(now);
    warm.assign(res.states.begin() + 1, res.states.end());
    trace.plans.push_back(res.states);
  }
  return trace;
}

}  // namespace adate
