#include "adate/methods.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace adate {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Fused {
  Vec3 z;
  Mat3 r;
};

Fused fuse(const std::vector<Measurement>& ms) {
  Flags ignored = kNone;
  Mat3 info = Mat3::Zero();
  Vec3 acc = Vec3::Zero();
  for (const auto& m : ms) {
    const Mat3 w = regularized_inverse<3>(m.r, ignored);
    info += w;
    acc += w * m.z;
  }
  const Mat3 r = regularized_inverse<3>(info, ignored);
  return {r * acc, r};
}

// Runs a recursive filter with two-point initialization: the first observed
// step fixes the position, the second the velocity by differencing.
template <class Filter, class Init, class Step, class Out>
MethodRun run_filter(std::span<const std::vector<Measurement>> obs, double tau, Init init,
                     Step step, Out out) {
  MethodRun run;
  const int n = static_cast<int>(obs.size());
  if (n == 0) return run;
  if (obs[0].empty()) throw std::invalid_argument("the first step needs an observation");
  const Fused first = fuse(obs[0]);
  Filter f = init(first, Vec3::Zero(), Mat3::Identity() * 1e4, false);
  bool have_velocity = false;
  for (int k = 1; k <= n; ++k) {
    const auto t0 = Clock::now();
    if (k > 1) {
      if (!have_velocity && !obs[k - 1].empty()) {
        const Fused now = fuse(obs[k - 1]);
        const double dt = (k - 1) * tau;
        f = init(now, Vec3((now.z - first.z) / dt), Mat3((now.r + first.r) / (dt * dt)), true);
        have_velocity = true;
      } else if (!(f.flags & kDiverged)) {
        f = step(f, std::span<const Measurement>(obs[k - 1]));
      }
    }
    run.step_seconds.push_back(seconds_since(t0));
    run.states.push_back(out(f));
    run.flags.push_back(f.flags);
  }
  run.diverged = (f.flags & kDiverged) != 0;
  return run;
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::adate_pls: return "adate-pls";
    case Method::ekf_ca: return "ekf-ca";
    case Method::ukf_ca: return "ukf-ca";
    case Method::ukf_pls: return "ukf-pls";
    case Method::ekf_pls: return "ekf-pls";
    case Method::map_ct: return "map-ct";
  }
  return "?";
}

Method method_from_string(const std::string& name) {
  for (Method m : kAllMethods)
    if (to_string(m) == name) return m;
  throw std::invalid_argument("unknown method: " + name);
}

double line_fit_speed(std::span<const std::vector<Measurement>> obs, double tau, int steps) {
  std::vector<std::pair<double, Vec3>> pts;
  for (int k = 0; k < static_cast<int>(obs.size()) && static_cast<int>(pts.size()) < steps; ++k)
    if (!obs[k].empty()) pts.emplace_back(k * tau, fuse(obs[k]).z);
  if (pts.size() < 2) return 0.0;
  double tm = 0.0;
  Vec3 zm = Vec3::Zero();
  for (const auto& [t, z] : pts) {
    tm += t;
    zm += z;
  }
  tm /= pts.size();
  zm /= pts.size();
  double stt = 0.0;
  Vec3 stz = Vec3::Zero();
  for (const auto& [t, z] : pts) {
    stt += (t - tm) * (t - tm);
    stz += (t - tm) * (z - zm);
  }
  return stt > 0.0 ? (stz / stt).norm() : 0.0;
}

MethodRun run_method(Method m, std::span<const std::vector<Measurement>> obs,
                     const ModelParams& prm, const MethodOptions& opts) {
  const double tau = opts.adate.tau;
  const double speed =
      opts.nominal_speed > 0.0 ? opts.nominal_speed : line_fit_speed(obs, tau);
  const double q_jerk = ca_jerk_psd(prm, speed);

  switch (m) {
    case Method::adate_pls: {
      MethodRun run;
      TrajectoryEstimate est;
      for (const auto& z : obs) {
        const auto t0 = Clock::now();
        step(est, z, prm, opts.adate);
        run.step_seconds.push_back(seconds_since(t0));
      }
      run.states = est.states;
      run.flags = est.flags;
      for (const State& s : run.states) run.diverged = run.diverged || !s.finite();
      return run;
    }

    case Method::ekf_ca:
    case Method::ukf_ca: {
      const auto init = [&](const Fused& z, const Vec3& v, const Mat3& pv, bool) {
        CaFilter f;
        f.state.x = z.z;
        f.state.v = v;
        f.cov.setZero();
        f.cov.block<3, 3>(0, 0) = z.r;
        f.cov.block<3, 3>(3, 3) = pv;
        // Acceleration prior from the jerk level over a few steps.
        f.cov.block<3, 3>(6, 6) = Mat3::Identity() * std::max(q_jerk * 10.0 * tau, 1.0);
        return f;
      };
      const auto out = [](const CaFilter& f) {
        State s;
        s.x = f.state.x;
        s.v = f.state.v;
        s.p = kNan;
        s.c = Vec3::Constant(kNan);
        return s;
      };
      if (m == Method::ekf_ca)
        return run_filter<CaFilter>(
            obs, tau, init,
            [&](const CaFilter& f, std::span<const Measurement> z) {
              return ekf_ca_step(f, z, q_jerk, tau);
            },
            out);
      return run_filter<CaFilter>(
          obs, tau, init,
          [&](const CaFilter& f, std::span<const Measurement> z) {
            return ukf_ca_step(f, z, q_jerk, tau, opts.ukf);
          },
          out);
    }

    case Method::ukf_pls:
    case Method::ekf_pls: {
      const auto init = [&](const Fused& z, const Vec3& v, const Mat3& pv, bool) {
        PlsFilter f;
        f.state.x = z.z;
        f.state.v = v;
        // Axial control at the equilibrium of the current speed.
        const double sp = v.norm();
        f.state.p = prm.equilibrium_power(sp);
        f.state.c.setZero();
        f.cov.setZero();
        f.cov.block<3, 3>(0, 0) = z.r;
        f.cov.block<3, 3>(3, 3) = pv;
        const double sp_sigma = std::sqrt(pv.trace() / 3.0);
        const double dp = 2.0 * prm.alpha * sp + prm.beta;
        f.cov(6, 6) = std::max(dp * dp * sp_sigma * sp_sigma, 30.0 * 30.0);
        f.cov.block<3, 3>(7, 7) = Mat3::Identity() * 0.01;
        return f;
      };
      const auto out = [](const PlsFilter& f) { return f.state; };
      if (m == Method::ukf_pls)
        return run_filter<PlsFilter>(
            obs, tau, init,
            [&](const PlsFilter& f, std::span<const Measurement> z) {
              return ukf_pls_step(f, z, prm, tau, opts.ukf);
            },
            out);
      return run_filter<PlsFilter>(
          obs, tau, init,
          [&](const PlsFilter& f, std::span<const Measurement> z) {
            return ekf_pls_step(f, z, prm, tau);
          },
          out);
    }

    case Method::map_ct: {
      MapCtConfig cfg = opts.ct;
      cfg.tau = tau;
      // White acceleration over the fit window carries the jerk budget.
      cfg.accel_psd = q_jerk * cfg.fit_window * tau;
      const MapCtResult res = map_ct(obs, cfg);
      MethodRun run;
      run.step_seconds = res.step_seconds;
      for (std::size_t i = 0; i < res.states.size(); ++i) {
        State s;
        s.x = res.states[i].head<3>();
        s.v = res.states[i].tail<3>();
        s.p = kNan;
        s.c = Vec3(0, 0, i == 0 || res.turn_rates.empty() ? 0.0 : res.turn_rates[i - 1]);
        run.states.push_back(s);
        run.flags.push_back(res.flags);
        run.diverged = run.diverged || !res.states[i].allFinite();
      }
      return run;
    }
  }
  throw std::invalid_argument("unknown method");
}

}  // namespace adate
