#include "adate/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace adate {

namespace {

// R^-1 weighted mean of the positions observed at one time.
Vec3 fused_position(std::span<const Measurement> obs) {
  Mat3 info = Mat3::Zero();
  Vec3 acc = Vec3::Zero();
  Flags ignored = kNone;
  for (const auto& m : obs) {
    const Mat3 w = regularized_inverse<3>(m.r, ignored);
    info += w;
    acc += w * m.z;
  }
  return info.ldlt().solve(acc);
}

Mat10 prior_covariance(const State& s, const ModelParams& prm, const AdateConfig& cfg,
                       Flags* flags = nullptr) {
  if (cfg.linearization == Linearization::state_matrix) return transition_covariance(s, prm, cfg.tau, flags);
  return propagated_covariance(s, prm, cfg.tau);
}

// Straight-line cruise through the first and the latest observed positions.
void reseed(TrajectoryEstimate& est, const Vec3& z_now, const ModelParams& prm,
            const AdateConfig& cfg) {
  const int k = est.k();
  const Vec3 z_first = est.states.front().x;
  const Vec3 v = (z_now - z_first) / ((k - 1) * cfg.tau);
  const double p = prm.equilibrium_power(v.norm());
  for (int i = 0; i < k; ++i) {
    State& s = est.states[i];
    s.x = z_first + v * (i * cfg.tau);
    s.v = v;
    s.p = p;
    s.c = Vec3::Zero();
  }
  for (int i = 0; i + 1 < k; ++i) {
    est.q_prior[i] = prior_covariance(est.states[i], prm, cfg);
    est.q_seq[i] = est.q_prior[i];
  }
  for (auto& c : est.lin_cache) c.valid = false;
  est.prev_window.assign(est.states.begin() + (est.xi_t - 1), est.states.end());
  est.seed = est.states.front();
  est.seeded = true;
}

// Re-initializes s_{a+1}..s_k after the gap (a, b) once observations resume
// at b. Returns false when the pattern does not apply at this step.
bool bridge_gap(TrajectoryEstimate& est, const ModelParams& prm, const AdateConfig& cfg) {
  if (cfg.bridge_min_gap <= 0 || cfg.bridge_after < 2) return false;
  const int k = est.k();
  const int b = k - cfg.bridge_after + 1;
  if (b < 2) return false;
  for (int i = b; i <= k; ++i)
    if (est.obs[i - 1].empty()) return false;
  int a = b - 1;
  while (a >= 1 && est.obs[a - 1].empty()) --a;
  if (a < 1 || b - a - 1 < cfg.bridge_min_gap || a + 1 < est.xi_t) return false;

  // Least-squares line through the fused observations at b..k.
  const double tau = cfg.tau;
  const int m = k - b + 1;
  double t_mean = 0.0;
  Vec3 z_mean = Vec3::Zero();
  std::vector<Vec3> z(m);
  for (int j = 0; j < m; ++j) {
    z[j] = fused_position(est.obs[b + j - 1]);
    t_mean += j * tau;
    z_mean += z[j];
  }
  t_mean /= m;
  z_mean /= m;
  double stt = 0.0;
  Vec3 stz = Vec3::Zero();
  for (int j = 0; j < m; ++j) {
    stt += (j * tau - t_mean) * (j * tau - t_mean);
    stz += (j * tau - t_mean) * (z[j] - z_mean);
  }
  const Vec3 v_b = stz / stt;
  const Vec3 x_b = z_mean - v_b * t_mean;

  const State& sa = est.states[a - 1];
  const double T = (b - a) * tau;
  const Vec3 x0 = sa.x, m0 = sa.v * T, x1 = x_b, m1 = v_b * T;
  for (int i = a + 1; i <= k; ++i) {
    State& s = est.states[i - 1];
    Vec3 acc = Vec3::Zero();
    if (i < b) {
      const double u = (i - a) * tau / T;
      const double u2 = u * u, u3 = u2 * u;
      s.x = (2 * u3 - 3 * u2 + 1) * x0 + (u3 - 2 * u2 + u) * m0 + (-2 * u3 + 3 * u2) * x1 +
            (u3 - u2) * m1;
      s.v = ((6 * u2 - 6 * u) * x0 + (3 * u2 - 4 * u + 1) * m0 + (-6 * u2 + 6 * u) * x1 +
             (3 * u2 - 2 * u) * m1) / T;
      acc = ((12 * u - 6) * x0 + (6 * u - 4) * m0 + (-12 * u + 6) * x1 + (6 * u - 2) * m1) /
            (T * T);
    } else {
      s.x = x_b + v_b * ((i - b) * tau);
      s.v = v_b;
    }
    const double sp2 = s.v.squaredNorm();
    s.c = sp2 > prm.eps_speed * prm.eps_speed ? Vec3(s.v.cross(acc) / sp2) : Vec3::Zero();
    s.p = prm.equilibrium_power(s.v.norm());
  }
  for (int i = a; i < k; ++i) {
    est.q_prior[i - 1] = prior_covariance(est.states[i - 1], prm, cfg);
    est.q_seq[i - 1] = est.q_prior[i - 1];
    est.lin_cache[i - 1].valid = false;
  }
  return true;
}

// Reuses the cached linearization of transition i -> i+1 (0-based) while its
// linearization point has not moved by more than relinearize_tol.
LinearTransition<10> cached_transition(TrajectoryEstimate& est, int i, const ModelParams& prm,
                                       const AdateConfig& cfg, Flags& flags) {
  auto& entry = est.lin_cache[i];
  const State& s = est.states[i];
  if (!entry.valid || revision_norm(s, entry.point, cfg.psi) > cfg.relinearize_tol) {
    entry.transition = linearize_transition(s, prm, cfg, &flags);
    entry.point = s;
    entry.valid = true;
  }
  LinearTransition<10> tr = entry.transition;
  tr.q = est.q_seq[i] + cfg.q_floor * est.q_prior[i];
  return tr;
}

}  // namespace

LinearTransition<10> linearize_transition(const State& s, const ModelParams& prm,
                                          const AdateConfig& cfg, Flags* flags) {
  LinearTransition<10> tr;
  tr.q = Mat10::Zero();
  if (cfg.linearization == Linearization::state_matrix) {
    tr.phi = transition_matrix(s, prm, cfg.tau, flags);
    return tr;
  }
  const auto pred = predict_state(s, prm, cfg.tau);
  if (flags) *flags |= pred.flags;
  tr.phi = prediction_jacobian(s, prm, cfg.tau);
  tr.offset = pred.state.vector() - tr.phi * s.vector();
  return tr;
}

void AdateConfig::validate() const {
  if (!(eta > 0.0)) throw std::invalid_argument("adate: eta must be positive");
  if (!(t_m > 0.0)) throw std::invalid_argument("adate: t_m must be positive");
  if (!(tau > 0.0)) throw std::invalid_argument("adate: tau must be positive");
  if ((psi.array() < 0.0).any()) throw std::invalid_argument("adate: psi must be non-negative");
  if (min_window < 1) throw std::invalid_argument("adate: min_window must be at least 1");
  if (!(outlier_factor > 0.0)) throw std::invalid_argument("adate: outlier_factor must be positive");
  if (adapt_span < 0) throw std::invalid_argument("adate: adapt_span must be non-negative");
  if (!(q_floor >= 0.0)) throw std::invalid_argument("adate: q_floor must be non-negative");
  if (bridge_min_gap > 0 && bridge_after < 2)
    throw std::invalid_argument("adate: bridge_after must be at least 2");
  if (!(relinearize_tol >= 0.0)) throw std::invalid_argument("adate: relinearize_tol must be >= 0");
}

Mat10 adapt_transition_covariance(const Mat10& q, const Vec10& eps, double t_m, double tau) {
  Mat10 out = (t_m * q + tau * eps * eps.transpose()) / (t_m + tau);
  return 0.5 * (out + out.transpose());
}

ObservationAdaptation adapt_observation_covariance(const Mat3& r, const Vec3& dz, double t_m,
                                                   double tau, double outlier_factor) {
  ObservationAdaptation out{r, false, 0.0};
  Flags ignored = kNone;
  out.deviation = std::sqrt(std::max(0.0, dz.dot(regularized_inverse<3>(r, ignored) * dz)));
  if (out.deviation > outlier_factor * std::sqrt(3.0)) {
    out.outlier = true;
    const Mat3 updated = (t_m * r + tau * dz * dz.transpose()) / (t_m + tau);
    out.r = 0.5 * (updated + updated.transpose());
  }
  return out;
}

double revision_norm(const State& a, const State& b, const Vec10& psi) {
  const Vec10 d = a.vector() - b.vector();
  return std::sqrt(d.dot(psi.cwiseProduct(d)));
}

int truncation_time(std::span<const State> current, std::span<const State> previous,
                    int first_index, int previous_xi, const AdateConfig& cfg, int k) {
  const int cap = k - cfg.min_window;
  if (cap < 1) return std::max(previous_xi, 1);
  const std::size_t n = std::min(current.size(), previous.size());
  int last_stable = -1;
  for (std::size_t j = 0; j < n; ++j) {
    if (revision_norm(current[j], previous[j], cfg.psi) >= cfg.eta) break;
    last_stable = first_index + static_cast<int>(j);
  }
  if (last_stable < 0) return previous_xi;
  return std::max(previous_xi, std::min(last_stable, cap));
}

void step(TrajectoryEstimate& est, std::span<const Measurement> new_obs,
          const ModelParams& prm, const AdateConfig& cfg) {
  std::vector<Measurement> obs(new_obs.begin(), new_obs.end());
  for (auto& m : obs) {
    if (auto it = est.sensor_r.find(m.sensor); it != est.sensor_r.end()) m.r = it->second;
  }

  if (est.states.empty()) {
    if (obs.empty()) throw std::invalid_argument("adate: the first step needs an observation");
    State s;
    s.x = fused_position(obs);
    s.p = prm.beta * prm.eps_speed;
    est.states = {s};
    est.q_seq.clear();
    est.q_prior.clear();
    est.lin_cache.clear();
    est.sensor_r.clear();
    est.obs = {obs};
    est.flags = {kNone};
    est.xi_t = 1;
    est.prev_window = est.states;
    est.seeded = false;
    return;
  }

  const int k = est.k() + 1;
  const double tau = cfg.tau;
  Flags flags = kNone;

  const auto predicted = predict_state(est.states.back(), prm, tau);
  flags |= predicted.flags;
  est.states.push_back(predicted.state);
  est.obs.push_back(obs);
  est.flags.push_back(kNone);
  est.q_prior.push_back(prior_covariance(est.states[k - 2], prm, cfg, &flags));
  est.q_seq.push_back(est.q_prior.back());
  est.lin_cache.emplace_back();

  if (!est.seeded && !obs.empty()) {
    reseed(est, fused_position(obs), prm, cfg);
    flags |= predict_state(est.states[k - 2], prm, tau).flags;
  }

  if (bridge_gap(est, prm, cfg)) flags |= kBridged;

  // Linearize every window transition on the previous trajectory.
  const int xi = est.xi_t;
  const int n = k - xi + 1;
  const auto build = [&] {
    std::vector<LinearTransition<10>> trs(n - 1);
    for (int i = xi; i < k; ++i) trs[i - xi] = cached_transition(est, i - 1, prm, cfg, flags);
    return trs;
  };
  std::vector<LinearTransition<10>> transitions = build();
  std::optional<Anchor<10>> anchor;
  if (xi > 1) {
    anchor = Anchor<10>{est.states[xi - 2].vector(), cached_transition(est, xi - 2, prm, cfg, flags)};
  } else if (est.seeded) {
    // Weak prior on s_1, written as a transition from the seed with phi = I.
    Vec10 var = cfg.seed_sigma.cwiseProduct(cfg.seed_sigma);
    anchor = Anchor<10>{est.seed.vector(), {Mat10::Identity(), var.asDiagonal(), Vec10::Zero()}};
  }

  const auto attempt = [&]() -> std::vector<Vec10> {
    try {
      auto sys = assemble<10>(transitions, std::span(est.obs).subspan(xi - 1, n), anchor, xi);
      auto sol = solve(sys);
      flags |= sys.flags;
      return sol;
    } catch (const SolverError&) {
      return {};
    }
  };
  std::vector<Vec10> solution = attempt();
  if (solution.empty()) {
    // Drop the adapted covariances of the window and retry on the priors.
    flags |= kSolverFailed;
    for (int i = std::max(xi - 1, 1); i < k; ++i) est.q_seq[i - 1] = est.q_prior[i - 1];
    transitions = build();
    if (anchor && xi > 1) anchor->transition.q = (1.0 + cfg.q_floor) * est.q_prior[xi - 2];
    solution = attempt();
  }
  if (solution.empty()) {
    est.prev_window.push_back(est.states.back());
    est.flags[k - 1] = flags;
    return;
  }

  for (int i = 0; i < n; ++i) est.states[xi - 1 + i] = State::from_vector(solution[i]);

  if (cfg.adapt_q) {
    const int first = cfg.adapt_span > 0 ? std::max(xi, k - cfg.adapt_span) : xi;
    for (int i = first; i < k; ++i) {
      const auto& tr = transitions[i - xi];
      const Vec10 eps = est.states[i].vector() - tr.phi * est.states[i - 1].vector() - tr.offset;
      est.q_seq[i - 1] = adapt_transition_covariance(est.q_seq[i - 1], eps, cfg.t_m, tau);
    }
  }

  if (cfg.adapt_r) {
    for (int i = xi; i <= k; ++i) {
      for (auto& m : est.obs[i - 1]) {
        const auto a = adapt_observation_covariance(m.r, m.z - est.states[i - 1].x, cfg.t_m, tau,
                                                    cfg.outlier_factor);
        if (a.outlier) {
          m.r = a.r;
          est.flags[i - 1] |= kOutlier;
        }
        est.sensor_r[m.sensor] = m.r;
      }
    }
  }

  const std::span<const State> current(est.states.data() + (xi - 1), n);
  // Steps without observations revise nothing, which would look like
  // convergence, so the cap counts back from the latest observed step.
  int last_observed = k;
  while (last_observed > xi && est.obs[last_observed - 1].empty()) --last_observed;
  const int new_xi =
      cfg.truncate ? truncation_time(current, est.prev_window, xi, xi, cfg, last_observed) : 1;
  est.xi_t = new_xi;
  est.prev_window.assign(est.states.begin() + (new_xi - 1), est.states.end());
  est.flags[k - 1] |= flags;
}

}  // namespace adate
