#include "adate/sim.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

namespace adate {

namespace {

// Table I observation RMSE (no drift / drift) per route, m.
struct Calibration {
  double rmse;
  double rmse_drift;
};

Calibration calibration(Route r) {
  switch (r) {
    case Route::cruise: return {24.78, 58.89};
    case Route::swaying: return {23.65, 91.25};
    case Route::snake: return {14.19, 28.02};
  }
  return {};
}

double square_wave(double t, double half_period) {
  return static_cast<long>(std::floor(t / half_period)) % 2 == 0 ? 1.0 : -1.0;
}

// Scripted specific power and angular velocity at time t (s from start).
struct Controls {
  double p;
  Vec3 c;
};

Controls profile(const Scenario& scn, double t) {
  const double p0 = scn.truth.equilibrium_power(scn.speed);
  switch (scn.route) {
    case Route::cruise: {
      const bool turning = t >= 200.0 && t < 280.0;
      return {p0, Vec3(0, 0, turning ? 0.02 : 0.0)};
    }
    case Route::swaying:
      return {p0 * (1.0 + 0.5 * std::sin(2.0 * std::numbers::pi * t / 40.0)),
              Vec3(0, 0, 0.05 * square_wave(t, 30.0))};
    case Route::snake:
      return {p0, Vec3(0, 0, 0.1 * square_wave(t, 25.0))};
  }
  return {p0, Vec3::Zero()};
}

// All routes steer in the horizontal plane. A near-isotropic transverse prior
// lets the unobservable component of c_T along v wander, and it turns into a
// pitch rate as soon as the heading changes.
Mat3 yaw_dominant(double d_yaw) {
  return Vec3(1e-3 * d_yaw, 1e-3 * d_yaw, d_yaw).asDiagonal();
}

}  // namespace

std::string to_string(Route r) {
  switch (r) {
    case Route::cruise: return "cruise";
    case Route::swaying: return "swaying";
    case Route::snake: return "snake";
  }
  return "?";
}

Route route_from_string(const std::string& name) {
  if (name == "cruise") return Route::cruise;
  if (name == "swaying") return Route::swaying;
  if (name == "snake") return Route::snake;
  throw std::invalid_argument("unknown route '" + name + "' (expected cruise, swaying or snake)");
}

void Scenario::validate() const {
  if (length < 1) throw std::invalid_argument("scenario: length must be at least 1");
  if (!(tau > 0.0)) throw std::invalid_argument("scenario: tau must be positive");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("scenario: noise_sigma must be >= 0");
  if (sensors < 1) throw std::invalid_argument("scenario: need at least one sensor");
  if (!(speed > 0.0)) throw std::invalid_argument("scenario: speed must be positive");
  if (substeps < 1) throw std::invalid_argument("scenario: substeps must be positive");
  const auto check = [&](const Interval& iv, const char* what) {
    if (iv.start < 1 || iv.end > length || iv.start > iv.end)
      throw std::invalid_argument(std::string("scenario: ") + what + " interval outside [1, length]");
  };
  if (drift) {
    check(drift->span, "drift");
    for (int s : drift->sensors)
      if (s < 0 || s >= sensors) throw std::invalid_argument("scenario: drift sensor out of range");
  }
  if (missing) check(*missing, "missing");
  truth.validate();
  model.validate();
}

Scenario default_scenario(Route route, bool drift, std::uint64_t seed) {
  Scenario scn;
  scn.route = route;
  scn.seed = seed;
  const Calibration cal = calibration(route);
  scn.noise_sigma = cal.rmse / std::sqrt(3.0);
  switch (route) {
    case Route::cruise:
      scn.model.d_a = 0.1;
      scn.model.d_t = yaw_dominant(1e-5);
      break;
    case Route::swaying:
      scn.model.d_a = 5.0;
      scn.model.d_t = yaw_dominant(3e-4);
      break;
    case Route::snake:
      scn.model.d_a = 0.5;
      scn.model.d_t = yaw_dominant(1.6e-3);
      scn.missing = Interval{250, 300};
      break;
  }
  if (drift) {
    // One of two sensors drifts for the middle third. With per-axis noise
    // sigma the total RMSE^2 becomes rmse^2 + |offset|^2 / 6.
    const double magnitude =
        std::sqrt(6.0 * (cal.rmse_drift * cal.rmse_drift - cal.rmse * cal.rmse));
    const int third = scn.length / 3;
    scn.drift = Drift{{third + 1, 2 * third}, Vec3(0.6, 0.8, 0.0) * magnitude, {0}};
  }
  return scn;
}

Vec10 pls_derivative(const State& s, const ModelParams& prm) {
  Vec10 d = Vec10::Zero();
  d.segment<3>(slot::x) = s.v;
  const double sp = s.speed();
  if (sp > prm.eps_speed) {
    d.segment<3>(slot::v) =
        -prm.alpha * s.v - prm.beta * s.v / sp + s.p * s.v / (sp * sp) + s.c.cross(s.v);
  }
  return d;
}

ScenarioData generate(const Scenario& scn) {
  scn.validate();
  std::mt19937_64 rng(scn.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  ScenarioData out;
  out.truth.reserve(scn.length);
  out.obs.resize(scn.length);

  const double h = scn.tau / scn.substeps;
  const double sq_a = std::sqrt(scn.truth.d_a * h);
  const Eigen::LLT<Mat3> dt_chol(scn.truth.d_t * h);
  const Mat3 sq_t = dt_chol.info() == Eigen::Success ? Mat3(dt_chol.matrixL()) : Mat3::Zero();
  double p_walk = 0.0;
  Vec3 c_walk = Vec3::Zero();

  // Controls are held over each substep so the truth stays an exact RK4
  // solution of the deterministic dynamics between control changes.
  const auto controls_at = [&](double t) {
    Controls ctl = profile(scn, t);
    ctl.p += p_walk;
    ctl.c += c_walk;
    return ctl;
  };

  State s;
  s.v = Vec3::UnitX() * scn.speed;
  {
    const Controls ctl = controls_at(0.0);
    s.p = ctl.p;
    s.c = ctl.c;
  }
  for (int t = 1; t <= scn.length; ++t) {
    out.truth.push_back(s);
    if (t == scn.length) break;
    const double t0 = (t - 1) * scn.tau;
    for (int j = 0; j < scn.substeps; ++j) {
      const Controls ctl = controls_at(t0 + j * h);
      s.p = ctl.p;
      s.c = ctl.c;
      const Vec10 y = s.vector();
      const auto f = [&](const Vec10& v) { return pls_derivative(State::from_vector(v), scn.truth); };
      const Vec10 k1 = f(y);
      const Vec10 k2 = f(y + 0.5 * h * k1);
      const Vec10 k3 = f(y + 0.5 * h * k2);
      const Vec10 k4 = f(y + h * k3);
      s = State::from_vector(y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
      if (scn.random_controls) {
        p_walk += sq_a * normal(rng);
        c_walk += sq_t * Vec3(normal(rng), normal(rng), normal(rng));
      }
    }
    const Controls ctl = controls_at(t * scn.tau);
    s.p = ctl.p;
    s.c = ctl.c;
  }

  const Mat3 r = Mat3::Identity() * (scn.noise_sigma * scn.noise_sigma);
  for (int t = 1; t <= scn.length; ++t) {
    const bool is_missing = scn.missing && scn.missing->contains(t);
    for (int sensor = 0; sensor < scn.sensors; ++sensor) {
      Measurement m;
      m.sensor = sensor;
      m.r = r;
      m.z = out.truth[t - 1].x +
            scn.noise_sigma * Vec3(normal(rng), normal(rng), normal(rng));
      if (scn.drift && scn.drift->span.contains(t)) {
        for (int d : scn.drift->sensors)
          if (d == sensor) m.z += scn.drift->offset;
      }
      // Draw noise even for missing steps so the rest of the stream does
      // not depend on the dropout interval.
      if (!is_missing) out.obs[t - 1].push_back(m);
    }
  }
  return out;
}

EvalReport evaluate(std::span<const State> truth, std::span<const Vec3> estimate,
                    std::span<const std::vector<Measurement>> obs) {
  if (truth.size() != estimate.size() || truth.size() != obs.size())
    throw std::invalid_argument("evaluate: truth, estimate and observations must align");
  EvalReport rep;
  rep.per_step_errors.reserve(truth.size());
  double se = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double e = (estimate[i] - truth[i].x).norm();
    rep.per_step_errors.push_back(e);
    se += e * e;
  }
  double so = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (const auto& m : obs[i]) {
      so += (m.z - truth[i].x).squaredNorm();
      ++count;
    }
  }
  rep.rmse_est = truth.empty() ? 0.0 : std::sqrt(se / truth.size());
  rep.rmse_obs = count == 0 ? 0.0 : std::sqrt(so / count);
  if (rep.rmse_obs > 0.0) {
    rep.normalized = rep.rmse_est / rep.rmse_obs;
  } else {
    rep.normalized = rep.rmse_est == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  }
  return rep;
}

std::vector<Vec3> positions(std::span<const State> states) {
  std::vector<Vec3> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back(s.x);
  return out;
}

}  // namespace adate
