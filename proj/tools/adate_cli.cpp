// Command-line front end: simulate, estimate, bench, navigate.
#include "adate/io.hpp"
#include "adate/methods.hpp"
#include "adate/nav.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <thread>

namespace fs = std::filesystem;
using namespace adate;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int thread_count() {
  const char* env = std::getenv("ADATE_THREADS");
  if (!env || !*env) return std::max(1u, std::thread::hardware_concurrency());
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) throw UsageError("ADATE_THREADS must be a positive integer");
  return static_cast<int>(n);
}

// Runs job(i) for i in [0, n) on up to thread_count() threads. The first
// exception is rethrown once every worker has stopped.
template <class Job>
void parallel_for(int n, Job job) {
  const int workers = std::min(n, thread_count());
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  const auto work = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        job(i);
      } catch (...) {
        const std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

struct LoadedScenario {
  Scenario scn;
  std::vector<State> truth;
  std::vector<std::vector<Measurement>> obs;
};

LoadedScenario load_scenario_dir(const fs::path& dir) {
  LoadedScenario out;
  out.scn = parse_scenario(read_text(dir / "scenario.json"));
  out.obs = parse_observations_csv(read_text(dir / "observations.csv"), out.scn.length,
                                   out.scn.noise_sigma);
  out.truth = parse_states_csv(read_text(dir / "truth.csv"));
  if (static_cast<int>(out.truth.size()) != out.scn.length)
    throw ConfigError("truth.csv: expected " + std::to_string(out.scn.length) + " rows");
  return out;
}

MethodOptions options_for(const Scenario& scn) {
  MethodOptions opts;
  opts.adate.tau = scn.tau;
  opts.ct.tau = scn.tau;
  return opts;
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create " + dir.string() + ": " + ec.message());
}

int cmd_simulate(const fs::path& config, const fs::path& out) {
  const Scenario scn = parse_scenario(read_text(config));
  const ScenarioData data = generate(scn);
  make_dir(out);
  write_text(out / "scenario.json", scenario_to_json(scn));
  write_text(out / "truth.csv", states_csv(data.truth));
  write_text(out / "observations.csv", observations_csv(data.obs));
  std::size_t rows = 0;
  for (const auto& o : data.obs) rows += o.size();
  std::cout << "simulated " << to_string(scn.route) << ": " << scn.length << " steps, " << rows
            << " observations -> " << out.string() << "\n";
  return 0;
}

int cmd_estimate(const fs::path& scenario, std::vector<std::string> names, const fs::path& out) {
  std::vector<Method> methods;
  for (const auto& n : names) {
    if (n == "all") {
      methods.assign(std::begin(kAllMethods), std::end(kAllMethods));
      continue;
    }
    try {
      methods.push_back(method_from_string(n));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  const LoadedScenario in = load_scenario_dir(scenario);
  make_dir(out);
  const MethodOptions opts = options_for(in.scn);
  std::vector<json> reports(methods.size());
  parallel_for(static_cast<int>(methods.size()), [&](int i) {
    const Method m = methods[i];
    const MethodRun run = run_method(m, in.obs, in.scn.model, opts);
    const EvalReport rep = evaluate(in.truth, positions(run.states), in.obs);
    std::vector<double> ms;
    for (double s : run.step_seconds) ms.push_back(1e3 * s);
    Flags all = kNone;
    for (Flags f : run.flags) all |= f;
    reports[i] = {{"schema", kSchemaVersion},
                  {"method", to_string(m)},
                  {"rmse_obs", rep.rmse_obs},
                  {"rmse_est", rep.rmse_est},
                  {"normalized", rep.normalized},
                  {"diverged", run.diverged},
                  {"flags", static_cast<unsigned>(all)},
                  {"step_ms", ms}};
    write_text(out / (to_string(m) + ".csv"), states_csv(run.states));
    write_text(out / (to_string(m) + ".json"), reports[i].dump(2) + "\n");
  });
  std::string table = "method,normalized,rmse_est,rmse_obs,diverged\n";
  for (const auto& r : reports) {
    std::cout << r["method"].get<std::string>() << ": normalized " << r["normalized"].get<double>()
              << (r["diverged"].get<bool>() ? " (diverged)" : "") << "\n";
    table += r["method"].get<std::string>() + ',' + r["normalized"].dump() + ',' + r["rmse_est"].dump() +
             ',' + r["rmse_obs"].dump() + ',' + (r["diverged"].get<bool>() ? "true" : "false") + '\n';
  }
  if (methods.size() > 1) write_text(out / "comparison.csv", table);
  return 0;
}

int cmd_bench(const fs::path& scenario, int steps, const fs::path& out) {
  const LoadedScenario in = load_scenario_dir(scenario);
  if (steps <= 0 || steps > in.scn.length) steps = in.scn.length;
  const std::span<const std::vector<Measurement>> obs(in.obs.data(), steps);
  const MethodOptions opts = options_for(in.scn);
  std::vector<MethodRun> runs(2);
  const Method methods[] = {Method::adate_pls, Method::map_ct};
  parallel_for(2, [&](int i) { runs[i] = run_method(methods[i], obs, in.scn.model, opts); });
  std::string csv = "step,adate_pls_ms,map_ct_ms\n";
  for (int t = 0; t < steps; ++t) {
    char row[96];
    std::snprintf(row, sizeof row, "%d,%.6f,%.6f\n", t + 1, 1e3 * runs[0].step_seconds[t],
                  1e3 * runs[1].step_seconds[t]);
    csv += row;
  }
  if (out.has_parent_path()) make_dir(out.parent_path());
  write_text(out, csv);
  std::cout << "bench: " << steps << " steps -> " << out.string() << "\n";
  return 0;
}

int cmd_navigate(const fs::path& config, const fs::path& out) {
  const NavScenario scn = parse_nav_scenario(read_text(config));
  const NavigationTrace trace = navigate(scn.start, scn.plan, scn.obstacles, scn.params, scn.cfg);
  make_dir(out);

  std::string plans = "k,t,x,y,z\n", steps = "k,iterations,max_hit\n";
  for (std::size_t k = 0; k < trace.plans.size(); ++k) {
    for (std::size_t j = 0; j < trace.plans[k].size(); ++j) {
      const Vec3& x = trace.plans[k][j].x;
      char row[128];
      std::snprintf(row, sizeof row, "%zu,%zu,%.6f,%.6f,%.6f\n", k, k + j, x.x(), x.y(), x.z());
      plans += row;
    }
    char row[64];
    std::snprintf(row, sizeof row, "%zu,%d,%.6g\n", k, trace.iterations[k], trace.max_hit[k]);
    steps += row;
  }
  write_text(out / "path.csv", states_csv(trace.path, 0));
  write_text(out / "plans.csv", plans);
  write_text(out / "iterations.csv", steps);
  const int most = trace.iterations.empty() ? 0 : *std::max_element(trace.iterations.begin(), trace.iterations.end());
  const double worst = trace.max_hit.empty() ? 0.0 : *std::max_element(trace.max_hit.begin(), trace.max_hit.end());
  const json summary = {{"schema", kSchemaVersion},
                        {"feasible", trace.feasible},
                        {"steps", trace.iterations.size()},
                        {"max_iterations", most},
                        {"first_iterations", trace.iterations.empty() ? 0 : trace.iterations.front()},
                        {"max_hit", worst},
                        {"iterations", trace.iterations}};
  write_text(out / "summary.json", summary.dump(2) + "\n");
  write_text(out / "scenario.json", nav_scenario_to_json(scn));
  std::cout << "navigate: " << trace.iterations.size() << " replans, at most " << most
            << " iterations, max P_h " << worst << (trace.feasible ? "" : ", INFEASIBLE") << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive trajectory estimation with the power-law steering model"};
  app.require_subcommand(1);

  fs::path config, out, scenario;
  std::vector<std::string> methods;
  int steps = 0;

  auto* simulate = app.add_subcommand("simulate", "Generate truth and observations from a JSON config");
  simulate->add_option("--config", config, "Scenario JSON")->required();
  simulate->add_option("--out", out, "Output directory")->required();

  auto* estimate = app.add_subcommand("estimate", "Run estimators over a simulated scenario");
  estimate->add_option("--scenario", scenario, "Directory written by simulate")->required();
  estimate->add_option("--method", methods, "adate-pls, ekf-ca, ukf-ca, ukf-pls, ekf-pls, map-ct or all")
      ->required();
  estimate->add_option("--out", out, "Output directory")->required();

  auto* bench = app.add_subcommand("bench", "Per-step wall time of adate-pls and map-ct");
  bench->add_option("--scenario", scenario, "Directory written by simulate")->required();
  bench->add_option("--steps", steps, "Steps to time (default: all)");
  bench->add_option("--out", out, "Output CSV")->required();

  auto* nav = app.add_subcommand("navigate", "Replan towards nodes around obstacles");
  nav->add_option("--config", config, "Navigation JSON")->required();
  nav->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*simulate) return cmd_simulate(config, out);
    if (*estimate) return cmd_estimate(scenario, methods, out);
    if (*bench) return cmd_bench(scenario, steps, out);
    if (*nav) return cmd_navigate(config, out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  }
  return kExitUsage;
}
