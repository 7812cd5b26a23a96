#include "adate/methods.hpp"
#include "adate/sim.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace adate;

namespace {

// Textbook Kalman filter with both sensors stacked into one update.
struct Kf {
  Vec9 s;
  Mat9 p;
  void step(const Mat9& a, const Mat9& q, const std::vector<Measurement>& z) {
    s = a * s;
    p = a * p * a.transpose() + q;
    if (z.empty()) return;
    const int m = 3 * static_cast<int>(z.size());
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(m, 9), r = Eigen::MatrixXd::Zero(m, m);
    Eigen::VectorXd y(m);
    for (std::size_t j = 0; j < z.size(); ++j) {
      h.block(3 * j, 0, 3, 3).setIdentity();
      r.block(3 * j, 3 * j, 3, 3) = z[j].r;
      y.segment(3 * j, 3) = z[j].z;
    }
    const Eigen::MatrixXd sm = h * p * h.transpose() + r;
    const Eigen::MatrixXd k = p * h.transpose() * sm.inverse();
    s += k * (y - h * s);
    p = (Mat9::Identity() - k * h) * p;
  }
};

std::vector<std::vector<Measurement>> noisy_ca_track(int n, double sigma, std::mt19937_64& rng,
                                                     std::vector<Vec3>* truth = nullptr) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::vector<Measurement>> obs(n);
  Vec3 x(10, -20, 5), v(15, 3, -1), a(0.2, -0.1, 0.05);
  for (int t = 0; t < n; ++t) {
    if (truth) truth->push_back(x);
    for (int sensor = 0; sensor < 2; ++sensor) {
      Measurement m;
      m.sensor = sensor;
      m.r = Mat3::Identity() * sigma * sigma * (1 + sensor);
      m.z = x + sigma * std::sqrt(1.0 + sensor) * Vec3(g(rng), g(rng), g(rng));
      obs[t].push_back(m);
    }
    x += v + 0.5 * a;
    v += a;
    a += 0.05 * Vec3(g(rng), g(rng), g(rng));
  }
  return obs;
}

CaFilter ca_start(const Vec3& x) {
  CaFilter f;
  f.state.x = x;
  f.cov = Mat9::Identity() * 100.0;
  return f;
}

}  // namespace

TEST(CaTransition, MatchesMatrixExponential) {
  // The CA generator is nilpotent, so the exponential series ends at A^2.
  Mat9 gen = Mat9::Zero();
  gen.block<3, 3>(0, 3).setIdentity();
  gen.block<3, 3>(3, 6).setIdentity();
  for (double tau : {0.1, 1.0, 2.5}) {
    const Mat9 ref = Mat9::Identity() + tau * gen + 0.5 * tau * tau * gen * gen;
    EXPECT_LT((ca_transition(tau) - ref).norm(), 1e-14);
  }
}

TEST(CaProcessNoise, IntegratesWhiteJerk) {
  // int_0^tau e^{A r} B q B^T e^{A^T r} dr by Simpson.
  const double q = 0.7, tau = 1.3;
  const int n = 200;
  Mat9 acc = Mat9::Zero();
  for (int i = 0; i <= n; ++i) {
    const double r = tau * i / n;
    const Eigen::Matrix<double, 9, 3> g = ca_transition(r).rightCols<3>();
    const double w = (i == 0 || i == n) ? 1 : (i % 2 ? 4 : 2);
    acc += w * q * g * g.transpose();
  }
  acc *= tau / (3.0 * n);
  EXPECT_LT((ca_process_noise(q, tau) - acc).norm(), 1e-9 * acc.norm());
}

TEST(EkfCa, EqualsLinearKalmanFilter) {
  std::mt19937_64 rng(3);
  const auto obs = noisy_ca_track(80, 5.0, rng);
  const double q = 0.01, tau = 1.0;
  CaFilter f = ca_start(obs[0][0].z);
  Kf kf{f.state.vector(), f.cov};
  for (std::size_t t = 1; t < obs.size(); ++t) {
    // Drop observations now and then to cover pure prediction.
    const auto& z = t % 13 == 0 ? std::vector<Measurement>{} : obs[t];
    f = ekf_ca_step(f, z, q, tau);
    kf.step(ca_transition(tau), ca_process_noise(q, tau), z);
    ASSERT_LT((f.state.vector() - kf.s).norm(), 1e-10 * (1.0 + kf.s.norm())) << t;
  }
  EXPECT_LT((f.cov - kf.p).norm(), 1e-10 * kf.p.norm());
}

TEST(UkfCa, EqualsKalmanFilterOnLinearSystem) {
  std::mt19937_64 rng(4);
  const auto obs = noisy_ca_track(80, 5.0, rng);
  const double q = 0.01, tau = 0.5;
  for (const UkfParams ukf : {UkfParams{}, UkfParams{0.5, 2.0, 1.0}, UkfParams{1e-2, 2.0, 0.0}}) {
    CaFilter f = ca_start(obs[0][0].z);
    Kf kf{f.state.vector(), f.cov};
    for (std::size_t t = 1; t < obs.size(); ++t) {
      f = ukf_ca_step(f, obs[t], q, tau, ukf);
      kf.step(ca_transition(tau), ca_process_noise(q, tau), obs[t]);
    }
    EXPECT_LT((f.state.vector() - kf.s).norm(), 1e-8 * (1.0 + kf.s.norm())) << ukf.alpha;
    EXPECT_LT((f.cov - kf.p).norm(), 1e-8 * kf.p.norm()) << ukf.alpha;
  }
}

TEST(EkfCa, ZeroNoiseRecoversTrack) {
  std::mt19937_64 rng(5);
  std::vector<Vec3> truth;
  // sigma 0 and a frozen acceleration: an exact CA track.
  Vec3 x(1, 2, 3), v(4, -2, 1), a(0.3, 0.1, -0.2);
  std::vector<std::vector<Measurement>> obs(30);
  for (int t = 0; t < 30; ++t) {
    truth.push_back(x);
    Measurement m;
    m.z = x;
    m.r = Mat3::Identity() * 1e-12;
    obs[t].push_back(m);
    x += v + 0.5 * a;
    v += a;
  }
  CaFilter f = ca_start(obs[0][0].z);
  for (int t = 1; t < 30; ++t) {
    f = ekf_ca_step(f, obs[t], 0.0, 1.0);
    if (t >= 4) {
      EXPECT_LT((f.state.x - truth[t]).norm(), 1e-5) << t;
      EXPECT_LT((f.state.a - a).norm(), 1e-5) << t;
    }
  }
}

TEST(UkfPls, TracksZeroNoiseEquilibriumCruise) {
  // Noise-free controls: no speed compensation and no process noise.
  ModelParams prm;
  prm.d_a = 0.0;
  prm.d_t.setZero();
  State s;
  s.v = Vec3(20, 0, 0);
  s.p = prm.equilibrium_power(20.0);
  PlsFilter f;
  f.state = s;
  f.cov = Mat10::Identity() * 1e-10;
  for (int t = 1; t <= 50; ++t) {
    s.x += s.v;
    Measurement m;
    m.z = s.x;
    m.r = Mat3::Identity() * 1e-10;
    f = ukf_pls_step(f, std::span<const Measurement>(&m, 1), prm, 1.0);
    ASSERT_LT((f.state.x - s.x).norm(), 1e-6) << t;
    ASSERT_LT((f.state.v - s.v).norm(), 1e-6) << t;
  }
  EXPECT_FALSE(f.flags & kDiverged);
}

TEST(UkfPls, SigmaMeanMatchesMonteCarlo) {
  ModelParams prm;
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 3; ++trial) {
    const State mean = oracle::random_state(rng, prm, 8.0);
    Vec10 sd;
    sd << 1, 1, 1, 0.3, 0.3, 0.3, 3, 0.01, 0.01, 0.01;
    const Mat10 cov = sd.cwiseProduct(sd).asDiagonal();
    const auto f = [&](const Vec10& x) -> Vec10 {
      return predict_state(State::from_vector(x), prm, 1.0).state.vector();
    };
    Vec10 ut_mean;
    Mat10 ut_cov;
    unscented_transform<10>(mean.vector(), cov, UkfParams{}, f, ut_mean, ut_cov);

    const int n = 20000;
    Vec10 sum = Vec10::Zero(), sq = Vec10::Zero();
    for (int i = 0; i < n; ++i) {
      Vec10 x = mean.vector();
      for (int j = 0; j < 10; ++j) x(j) += sd(j) * g(rng);
      const Vec10 y = f(x);
      sum += y;
      sq += y.cwiseProduct(y);
    }
    const Vec10 mc = sum / n;
    const Vec10 se = ((sq / n - mc.cwiseProduct(mc)).cwiseMax(0.0) / n).cwiseSqrt();
    for (int j = 0; j < 10; ++j)
      EXPECT_LE(std::abs(ut_mean(j) - mc(j)), 3.0 * se(j) + 1e-9) << trial << " " << j;
  }
}

TEST(EkfPls, RunsOnEveryScenarioGroup) {
  for (Route r : {Route::cruise, Route::swaying, Route::snake}) {
    const Scenario scn = default_scenario(r, true, 1);
    const auto data = generate(scn);
    const auto run = run_method(Method::ekf_pls, data.obs, scn.model);
    ASSERT_EQ(run.states.size(), data.obs.size());
  }
}

TEST(EkfPls, FlagsDivergenceOnExplodingError) {
  // Confident in a state far from the track: innovations blow up at once.
  ModelParams prm;
  PlsFilter f;
  f.state.v = Vec3(20, 0, 0);
  f.state.p = prm.equilibrium_power(20.0);
  f.cov = Mat10::Identity() * 1e-4;
  State truth = f.state;
  truth.x = Vec3(500, 500, 0);
  EXPECT_GT(nees(f, truth), 1e6);
  Measurement m;
  m.z = truth.x;
  m.r = Mat3::Identity();
  f = ekf_pls_step(f, std::span<const Measurement>(&m, 1), prm, 1.0);
  EXPECT_TRUE(f.flags & kDiverged);
  EXPECT_GT(f.nis, kDivergenceNis);
  // Sticky.
  f = ekf_pls_step(f, {}, prm, 1.0);
  EXPECT_TRUE(f.flags & kDiverged);

  PlsFilter ok;
  ok.state = f.state;
  ok.state.x = Vec3::Zero();
  ok.state.v = Vec3(20, 0, 0);
  ok.state.p = prm.equilibrium_power(20.0);
  ok.state.c.setZero();
  ok.cov = Mat10::Identity();
  m.z = Vec3(20, 0, 0);
  EXPECT_FALSE(ekf_pls_step(ok, std::span<const Measurement>(&m, 1), prm, 1.0).flags & kDiverged);
}

TEST(CtTransition, RotatesVelocityAndIntegratesArc) {
  const double omega = 0.2, tau = 1.5, rad = 40.0;
  // Uniform circular motion about the origin, with a climb.
  const auto pos = [&](double t) {
    return Vec3(rad * std::cos(omega * t), rad * std::sin(omega * t), 0.5 * t);
  };
  const auto vel = [&](double t) {
    return Vec3(-rad * omega * std::sin(omega * t), rad * omega * std::cos(omega * t), 0.5);
  };
  Vec6 s;
  s << pos(0.3), vel(0.3);
  const Vec6 next = ct_transition(omega, tau) * s;
  EXPECT_LT((next.head<3>() - pos(0.3 + tau)).norm(), 1e-12);
  EXPECT_LT((next.tail<3>() - vel(0.3 + tau)).norm(), 1e-12);
  // Continuity at zero turn rate.
  EXPECT_LT((ct_transition(1e-9, tau) - ct_transition(0.0, tau)).norm(), 1e-8);
  Mat6 cv = Mat6::Identity();
  cv.block<3, 3>(0, 3) = tau * Mat3::Identity();
  EXPECT_LT((ct_transition(0.0, tau) - cv).norm(), 1e-15);
}

TEST(FitTurnRate, ExactOnArcsZeroOnLines) {
  std::vector<Vec3> pts;
  std::vector<double> ts;
  for (int i = 0; i < 20; ++i) {
    const double t = i * 1.0;
    pts.emplace_back(300 + 50 * std::cos(-0.08 * t), 50 * std::sin(-0.08 * t), 2 * t);
    ts.push_back(t);
  }
  EXPECT_NEAR(fit_turn_rate(pts, ts), -0.08, 1e-10);

  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(0.0, 10.0);
  int false_turns = 0;
  for (int trial = 0; trial < 50; ++trial) {
    pts.clear();
    for (int i = 0; i < 20; ++i) pts.emplace_back(20.0 * i + g(rng), 3.0 * i + g(rng), g(rng));
    false_turns += fit_turn_rate(pts, ts) != 0.0;
  }
  EXPECT_LE(false_turns, 3);
}

TEST(MapCt, ZeroNoiseCircleIsRecovered) {
  const double omega = 0.05, rad = 200.0;
  const int n = 60;
  std::vector<std::vector<Measurement>> obs(n);
  std::vector<Vec6> truth;
  for (int t = 0; t < n; ++t) {
    Measurement m;
    m.z = Vec3(rad * std::sin(omega * t), rad * (1 - std::cos(omega * t)), 0.0);
    m.r = Mat3::Identity() * 1e-10;
    obs[t].push_back(m);
    Vec6 s;
    s << m.z, rad * omega * std::cos(omega * t), rad * omega * std::sin(omega * t), 0.0;
    truth.push_back(s);
  }
  MapCtConfig cfg;
  cfg.accel_psd = 1e-6;
  const auto res = map_ct(obs, cfg);
  ASSERT_EQ(res.states.size(), static_cast<std::size_t>(n));
  for (int t = 10; t < n; ++t) {
    EXPECT_NEAR(res.turn_rates[t - 1], omega, 1e-8) << t;
    EXPECT_LT((res.states[t] - truth[t]).norm(), 1e-4) << t;
  }
}

TEST(MapCt, MatchesDenseSolveOnTwentySteps) {
  Scenario scn = default_scenario(Route::swaying, false, 2);
  scn.length = 20;
  const auto data = generate(scn);
  MapCtConfig cfg;
  cfg.fit_window = 6;
  const auto res = map_ct(data.obs, cfg);
  const int n = 20;

  // Stack whitened residuals: prior on s_1, transitions, observations.
  std::vector<Eigen::MatrixXd> rows;
  std::vector<Eigen::VectorXd> rhs;
  const auto whiten = [](const Eigen::MatrixXd& cov) {
    return Eigen::MatrixXd(Eigen::LLT<Eigen::MatrixXd>(cov).matrixL().solve(
        Eigen::MatrixXd::Identity(cov.rows(), cov.cols())));
  };
  const Vec6 var = cfg.prior_sigma.cwiseProduct(cfg.prior_sigma);
  Vec6 seed = Vec6::Zero();
  {
    Mat3 info = Mat3::Zero();
    Vec3 acc = Vec3::Zero();
    for (const auto& m : data.obs[0]) {
      info += m.r.inverse();
      acc += m.r.inverse() * m.z;
    }
    seed.head<3>() = info.inverse() * acc;
  }
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(6, 6 * n);
  j.block(0, 0, 6, 6) = whiten(Mat6(var.asDiagonal()));
  rows.push_back(j);
  rhs.push_back(j.block(0, 0, 6, 6) * seed);
  const Mat6 wq = whiten(ct_process_noise(cfg.accel_psd, cfg.tau));
  for (int i = 1; i < n; ++i) {
    j.setZero(6, 6 * n);
    j.block(0, 6 * i, 6, 6) = wq;
    j.block(0, 6 * (i - 1), 6, 6) = -wq * ct_transition(res.turn_rates[i - 1], cfg.tau);
    rows.push_back(j);
    rhs.push_back(Eigen::VectorXd::Zero(6));
  }
  for (int i = 0; i < n; ++i)
    for (const auto& m : data.obs[i]) {
      const Mat3 w = whiten(m.r);
      j.setZero(3, 6 * n);
      j.block(0, 6 * i, 3, 3) = w;
      rows.push_back(j);
      rhs.push_back(w * m.z);
    }
  int m_rows = 0;
  for (const auto& r : rows) m_rows += r.rows();
  Eigen::MatrixXd a(m_rows, 6 * n);
  Eigen::VectorXd b(m_rows);
  int at = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    a.middleRows(at, rows[i].rows()) = rows[i];
    b.segment(at, rhs[i].size()) = rhs[i];
    at += rows[i].rows();
  }
  const Eigen::VectorXd ref = oracle::dense_solve(a.transpose() * a, a.transpose() * b);
  const Eigen::VectorXd got = oracle::stack(res.states);
  EXPECT_LT((got - ref).norm(), 1e-8 * ref.norm());
}

TEST(MapCt, StepTimeGrowsWithHorizon) {
  Scenario scn = default_scenario(Route::cruise, false, 1);
  scn.length = 400;
  const auto data = generate(scn);
  const auto res = map_ct(data.obs, MapCtConfig{});
  ASSERT_EQ(res.step_seconds.size(), 400u);
  double early = 0.0, late = 0.0;
  for (int i = 0; i < 50; ++i) {
    early += res.step_seconds[50 + i];
    late += res.step_seconds[350 + i];
  }
  EXPECT_GT(late, 2.0 * early);
}

TEST(Methods, NamesRoundTripAndShapes) {
  Scenario scn = default_scenario(Route::snake, false, 1);
  scn.length = 40;
  scn.missing.reset();
  const auto data = generate(scn);
  for (Method m : kAllMethods) {
    EXPECT_EQ(method_from_string(to_string(m)), m);
    const auto run = run_method(m, data.obs, scn.model);
    EXPECT_EQ(run.states.size(), 40u) << to_string(m);
    EXPECT_EQ(run.step_seconds.size(), 40u) << to_string(m);
    EXPECT_EQ(run.flags.size(), 40u) << to_string(m);
    EXPECT_FALSE(run.diverged) << to_string(m);
  }
  EXPECT_THROW(method_from_string("pf"), std::invalid_argument);
  std::vector<std::vector<Measurement>> empty_first(3);
  EXPECT_THROW(run_method(Method::ekf_ca, empty_first, scn.model), std::invalid_argument);
}

TEST(Methods, LineFitSpeed) {
  std::vector<std::vector<Measurement>> obs(30);
  for (int t = 0; t < 30; ++t) {
    Measurement m;
    m.z = Vec3(3.0 * t, 4.0 * t, 7.0);
    obs[t].push_back(m);
  }
  obs[4].clear();
  EXPECT_NEAR(line_fit_speed(obs, 1.0), 5.0, 1e-12);
  EXPECT_NEAR(line_fit_speed(obs, 0.5), 10.0, 1e-12);
}
