#include "adate/estimator.hpp"
#include "adate/sim.hpp"

#include <gtest/gtest.h>

#include <numbers>
#include <random>

using namespace adate;

namespace {

bool symmetric_psd(const Eigen::MatrixXd& m, double tol = 1e-9) {
  if ((m - m.transpose()).norm() > tol * std::max(1.0, m.norm())) return false;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  return es.eigenvalues().minCoeff() >= -tol * std::max(1.0, m.trace());
}


// Exact trajectory of the mean dynamics, observed without noise.
std::vector<State> mean_trajectory(const ModelParams& prm, int n) {
  State s;
  s.v = Vec3(15, 5, 1);
  s.p = prm.equilibrium_power(s.v.norm());
  s.c = Vec3(0.001, -0.002, 0.03);
  s.c -= s.c.dot(s.v.normalized()) * s.v.normalized();
  std::vector<State> out{s};
  for (int i = 1; i < n; ++i) out.push_back(predict_state(out.back(), prm, 1.0).state);
  return out;
}

double run_normalized(const Scenario& scn, const ScenarioData& data, const AdateConfig& cfg) {
  TrajectoryEstimate est;
  for (int t = 0; t < scn.length; ++t) step(est, data.obs[t], scn.model, cfg);
  return evaluate(data.truth, positions(est.states), data.obs).normalized;
}

}  // namespace

TEST(AdaptTransitionCovariance, ZeroErrorShrinksUniformly) {
  Mat10 q = Mat10::Identity() * 2.0;
  q(0, 3) = q(3, 0) = 0.5;
  const Mat10 out = adapt_transition_covariance(q, Vec10::Zero(), 10.0, 1.0);
  EXPECT_LT((out - q * 10.0 / 11.0).norm(), 1e-15);
}

TEST(AdaptTransitionCovariance, InfiniteMemoryKeepsQ) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  Mat10 a;
  for (int i = 0; i < 100; ++i) a.data()[i] = n(rng);
  const Mat10 q = a * a.transpose();
  Vec10 eps;
  for (int i = 0; i < 10; ++i) eps(i) = n(rng);
  EXPECT_LT((adapt_transition_covariance(q, eps, 1e15, 1.0) - q).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(AdaptTransitionCovariance, WorkedExample) {
  Vec10 eps = Vec10::Zero();
  eps(0) = 1.0;
  const Mat10 out = adapt_transition_covariance(Mat10::Identity(), eps, 9.0, 1.0);
  Vec10 expected = Vec10::Constant(0.9);
  expected(0) = 1.0;
  EXPECT_LT((out - Mat10(expected.asDiagonal())).norm(), 1e-15);
}

TEST(AdaptObservationCovariance, ZeroBiasIsNotAnOutlier) {
  const Mat3 r = Mat3::Identity() * 4.0;
  const auto a = adapt_observation_covariance(r, Vec3::Zero(), 10.0, 1.0, 3.0);
  EXPECT_FALSE(a.outlier);
  EXPECT_EQ(a.r, r);
  EXPECT_EQ(a.deviation, 0.0);
}

TEST(AdaptObservationCovariance, LargeBiasInflatesR) {
  const Vec3 dz(10, 0, 0);
  const auto a = adapt_observation_covariance(Mat3::Identity(), dz, 10.0, 1.0, 3.0);
  EXPECT_TRUE(a.outlier);
  EXPECT_NEAR(a.deviation, 10.0, 1e-12);
  const Mat3 expected = Vec3(110.0 / 11.0, 10.0 / 11.0, 10.0 / 11.0).asDiagonal();
  EXPECT_LT((a.r - expected).norm(), 1e-12);
}

TEST(AdaptObservationCovariance, ThresholdIsThreeRootM) {
  const double limit = 3.0 * std::sqrt(3.0);
  EXPECT_FALSE(adapt_observation_covariance(Mat3::Identity(), Vec3(limit - 1e-9, 0, 0), 10, 1, 3).outlier);
  EXPECT_TRUE(adapt_observation_covariance(Mat3::Identity(), Vec3(limit + 1e-9, 0, 0), 10, 1, 3).outlier);
}

TEST(TruncationTime, IdenticalWindowsTruncateToCap) {
  AdateConfig cfg;
  std::vector<State> w(40);
  for (int i = 0; i < 40; ++i) w[i].x = Vec3(i, 0, 0);
  // Window covers time indices 11..50.
  EXPECT_EQ(truncation_time(w, w, 11, 11, cfg, 50), 40);
}

TEST(TruncationTime, AllRevisedKeepsPrevious) {
  AdateConfig cfg;
  std::vector<State> a(30), b(30);
  for (auto& s : b) s.x = Vec3(1, 0, 0);
  EXPECT_EQ(truncation_time(a, b, 5, 5, cfg, 34), 5);
}

TEST(TruncationTime, StopsBeforeFirstViolation) {
  AdateConfig cfg;
  const double eta = cfg.eta;
  std::vector<State> prev(30), cur(30);
  const double theta[] = {0.0, 0.0, eta / 2, 2 * eta, 0.0};
  for (int j = 0; j < 5; ++j) cur[j].x = Vec3(theta[j], 0, 0);
  const int t0 = 7;
  EXPECT_EQ(truncation_time(cur, prev, t0, t0, cfg, t0 + 29), t0 + 2);
  // Cap at k - min_window.
  EXPECT_EQ(truncation_time(cur, prev, t0, t0, cfg, t0 + 10), t0);
  EXPECT_EQ(truncation_time(cur, prev, t0, t0, cfg, t0 + 11), t0 + 1);
}

TEST(TruncationTime, PinnedDuringWarmUp) {
  AdateConfig cfg;
  std::vector<State> w(8);
  EXPECT_EQ(truncation_time(w, w, 1, 1, cfg, 8), 1);
}

TEST(AdateStep, FirstStepBootstrapsAtObservation) {
  ModelParams prm;
  AdateConfig cfg;
  TrajectoryEstimate est;
  Measurement m;
  m.z = Vec3(3, -4, 5);
  std::vector<Measurement> obs{m};
  step(est, obs, prm, cfg);
  ASSERT_EQ(est.k(), 1);
  EXPECT_EQ(est.states[0].x, m.z);
  EXPECT_EQ(est.states[0].v, Vec3::Zero());
  EXPECT_DOUBLE_EQ(est.states[0].p, prm.beta * prm.eps_speed);
  EXPECT_EQ(est.states[0].c, Vec3::Zero());
  EXPECT_EQ(est.xi_t, 1);
}

TEST(AdateStep, FirstStepWithoutObservationThrows) {
  TrajectoryEstimate est;
  EXPECT_THROW(step(est, {}, ModelParams{}, AdateConfig{}), std::invalid_argument);
}

TEST(AdateStep, InvalidConfigThrows) {
  AdateConfig cfg;
  cfg.eta = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = AdateConfig{};
  cfg.min_window = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = AdateConfig{};
  cfg.psi(4) = -1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(AdateStep, NoiselessMeanTrajectoryIsRecovered) {
  ModelParams prm;
  prm.d_a = 0.5;
  const int n = 100;
  const auto truth = mean_trajectory(prm, n);
  for (bool adapt : {false, true}) {
    AdateConfig cfg;
    cfg.adapt_q = cfg.adapt_r = adapt;
    TrajectoryEstimate est;
    for (int i = 0; i < n; ++i) {
      Measurement m;
      m.z = truth[i].x;
      m.r = Mat3::Identity() * 4.0;
      std::vector<Measurement> obs{m};
      step(est, obs, prm, cfg);
    }
    ASSERT_GT(est.xi_t, 1);
    double worst = 0.0;
    for (int i = est.xi_t; i <= n; ++i)
      worst = std::max(worst, (est.states[i - 1].vector() - truth[i - 1].vector()).norm());
    EXPECT_LT(worst, 1e-6) << "adapt " << adapt;
  }
}

TEST(AdateStep, MissingStepsOnlyAddTransitions) {
  ModelParams prm;
  const auto truth = mean_trajectory(prm, 40);
  AdateConfig cfg;
  TrajectoryEstimate est;
  for (int i = 0; i < 40; ++i) {
    std::vector<Measurement> obs;
    if (i < 15 || i >= 20) {
      Measurement m;
      m.z = truth[i].x;
      obs.push_back(m);
    }
    step(est, obs, prm, cfg);
    EXPECT_EQ(est.k(), i + 1);
  }
  for (int i = 15; i < 20; ++i) {
    EXPECT_TRUE(est.obs[i].empty());
    EXPECT_LT((est.states[i].x - truth[i].x).norm(), 1e-3);
  }
}

TEST(AdateStep, DriftingSensorInflatesAlongDrift) {
  const Scenario scn = default_scenario(Route::cruise, true, 5);
  const auto data = generate(scn);
  AdateConfig cfg;
  TrajectoryEstimate est;
  for (int t = 0; t < scn.drift->span.start + 49; ++t) step(est, data.obs[t], scn.model, cfg);
  ASSERT_TRUE(est.sensor_r.contains(0));
  Eigen::SelfAdjointEigenSolver<Mat3> es(est.sensor_r.at(0));
  const Vec3 axis = es.eigenvectors().col(2);
  const double angle = std::acos(std::min(1.0, std::abs(axis.dot(scn.drift->offset.normalized()))));
  EXPECT_LT(angle, 15.0 * std::numbers::pi / 180.0);
  EXPECT_GT(est.sensor_r.at(0).trace(), 3.0 * scn.noise_sigma * scn.noise_sigma);
}

TEST(AdateStep, AdaptationDoesNotHurtWellSpecifiedCase) {
  for (std::uint64_t seed : {1u, 2u}) {
    Scenario scn = default_scenario(Route::cruise, false, seed);
    scn.length = 200;
    scn.random_controls = true;
    scn.truth.d_a = 0.1;
    scn.truth.d_t = Vec3(1e-8, 1e-8, 1e-5).asDiagonal();
    scn.model = scn.truth;
    const auto data = generate(scn);
    AdateConfig plain;
    plain.adapt_q = plain.adapt_r = false;
    const double a = run_normalized(scn, data, AdateConfig{});
    const double b = run_normalized(scn, data, plain);
    EXPECT_LT(std::abs(a / b - 1.0), 0.1) << "seed " << seed << " adaptive " << a << " plain " << b;
  }
}

TEST(AdateStep, WindowReachesBoundedSteadyState) {
  const Scenario scn = default_scenario(Route::snake, false, 2);
  const auto data = generate(scn);
  TrajectoryEstimate est;
  std::vector<int> sizes;
  for (int t = 0; t < scn.length; ++t) {
    step(est, data.obs[t], scn.model, AdateConfig{});
    sizes.push_back(est.window_size());
  }
  auto sorted = sizes;
  std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
  const int median = sorted[sorted.size() / 2];
  EXPECT_LE(*std::max_element(sizes.begin(), sizes.end()), 10 * median);
  EXPECT_LT(est.window_size(), scn.length / 2);
}

// Randomized property suite over many steps: frozen prefix, monotone xi_T,
// symmetric PSD covariances and the xi_T bound.
TEST(AdateProperties, RandomizedSteps) {
  std::mt19937_64 rng(99);
  int total = 0;
  const Route routes[] = {Route::cruise, Route::swaying, Route::snake};
  for (int run = 0; run < 9; ++run) {
    Scenario scn = default_scenario(routes[run % 3], run % 2 == 1, 100 + run);
    scn.length = 120;
    if (scn.drift) scn.drift->span = {30, 80};
    if (scn.missing) scn.missing = Interval{50, 60};
    const auto data = generate(scn);
    AdateConfig cfg;
    cfg.t_m = std::uniform_real_distribution<double>(3.0, 30.0)(rng);
    cfg.eta = std::pow(10.0, std::uniform_real_distribution<double>(-6.0, -3.0)(rng));
    cfg.min_window = std::uniform_int_distribution<int>(5, 15)(rng);
    TrajectoryEstimate est;
    for (int t = 0; t < scn.length; ++t) {
      const int xi_before = est.xi_t;
      const std::vector<State> frozen(est.states.begin(),
                                      est.states.begin() + std::max(0, xi_before - 1));
      step(est, data.obs[t], scn.model, cfg);
      ++total;
      for (std::size_t i = 0; i < frozen.size(); ++i)
        ASSERT_EQ(frozen[i].vector(), est.states[i].vector()) << "run " << run << " t " << t + 1;
      ASSERT_GE(est.xi_t, xi_before);
      const int k = est.k();
      if (k > cfg.min_window) ASSERT_LE(est.xi_t, k - cfg.min_window);
      ASSERT_GE(est.xi_t, 1);
      for (const auto& q : est.q_seq) ASSERT_TRUE(symmetric_psd(q));
      for (const auto& step_obs : est.obs)
        for (const auto& m : step_obs) ASSERT_TRUE(symmetric_psd(m.r));
      for (const auto& s : est.states) ASSERT_TRUE(s.finite());
    }
  }
  EXPECT_GE(total, 1000);
}

TEST(AdaptationPsd, ArbitraryInputsStayPsd) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    Mat10 a;
    for (int i = 0; i < 100; ++i) a.data()[i] = n(rng);
    Mat10 q = a * a.transpose() * std::pow(10.0, n(rng));
    Vec10 eps;
    for (int i = 0; i < 10; ++i) eps(i) = n(rng) * 100.0;
    const Mat10 out = adapt_transition_covariance(q, eps, std::abs(n(rng)) + 0.1, 1.0);
    ASSERT_TRUE(symmetric_psd(out));
    Mat3 b;
    for (int i = 0; i < 9; ++i) b.data()[i] = n(rng);
    const Mat3 r = b * b.transpose() + Mat3::Identity() * 1e-3;
    const auto ra = adapt_observation_covariance(r, Vec3(n(rng), n(rng), n(rng)) * 50.0, 10.0, 1.0, 3.0);
    ASSERT_TRUE(symmetric_psd(ra.r));
  }
}

TEST(Linearization, JacobianReproducesPrediction) {
  ModelParams prm;
  AdateConfig cfg;
  State s;
  s.v = Vec3(12, -3, 2);
  s.p = 20.0;
  s.c = Vec3(0.0, 0.01, 0.05);
  const auto tr = linearize_transition(s, prm, cfg);
  const Vec10 pred = predict_state(s, prm, cfg.tau).state.vector();
  EXPECT_LT((tr.phi * s.vector() + tr.offset - pred).norm(), 1e-9 * pred.norm());
  cfg.linearization = Linearization::state_matrix;
  const auto fixed = linearize_transition(s, prm, cfg);
  EXPECT_EQ(fixed.offset, Vec10::Zero());
  EXPECT_LT((fixed.phi - transition_matrix(s, prm, cfg.tau)).norm(), 1e-15);
}

TEST(RevisionNorm, WeightsComponents) {
  State a, b;
  b.x = Vec3(3, 0, 0);
  b.v = Vec3(0, 10, 0);
  b.p = 100.0;
  Vec10 psi = Vec10::Zero();
  psi(0) = 1.0;
  EXPECT_DOUBLE_EQ(revision_norm(a, b, psi), 3.0);
  psi(4) = 0.1;
  psi(6) = 0.01;
  EXPECT_DOUBLE_EQ(revision_norm(a, b, psi), std::sqrt(9.0 + 10.0 + 100.0));
}
