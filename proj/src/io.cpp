#include "adate/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace adate {

namespace {

using nlohmann::json;

int line_of_offset(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + offset, '\n'));
}

// Checks and converts one parsed document, reporting problems at the line of
// the offending key.
class Reader {
 public:
  explicit Reader(const std::string& text) : text_(text) {
    try {
      doc_ = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError("line " + std::to_string(line_of_offset(text, e.byte > 0 ? e.byte - 1 : 0)) +
                        ": " + e.what());
    }
    if (!doc_.is_object()) throw ConfigError("line 1: top level must be an object");
    if (doc_.contains("schema") && doc_["schema"] != kSchemaVersion)
      fail("schema", "unsupported schema (expected " + std::to_string(kSchemaVersion) + ")");
  }

  const json& doc() const { return doc_; }
  bool mentions(const std::string& key) const { return text_.find('"' + key + '"') != std::string::npos; }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    const std::size_t at = text_.find('"' + key + '"');
    const std::string where =
        at == std::string::npos ? "" : "line " + std::to_string(line_of_offset(text_, at)) + ": ";
    throw ConfigError(where + "'" + key + "': " + msg);
  }

  void only(const json& obj, const std::set<std::string>& keys, const std::string& where) const {
    if (!obj.is_object()) fail(where, "must be an object");
    for (const auto& [k, v] : obj.items())
      if (!keys.count(k)) fail(k, "unknown key in " + where);
  }

  double number(const json& obj, const std::string& key, double fallback) const {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_number()) fail(key, "must be a number");
    return obj[key].get<double>();
  }

  int integer(const json& obj, const std::string& key, int fallback) const {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_number_integer()) fail(key, "must be an integer");
    return obj[key].get<int>();
  }

  bool boolean(const json& obj, const std::string& key, bool fallback) const {
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_boolean()) fail(key, "must be true or false");
    return obj[key].get<bool>();
  }

  Vec3 vec3(const json& v, const std::string& key) const {
    if (!v.is_array() || v.size() != 3) fail(key, "must be an array of 3 numbers");
    Vec3 out;
    for (int i = 0; i < 3; ++i) {
      if (!v[i].is_number()) fail(key, "must be an array of 3 numbers");
      out(i) = v[i].get<double>();
    }
    return out;
  }

  // A diagonal [a, b, c] or a full 3x3 matrix.
  Mat3 mat3(const json& v, const std::string& key) const {
    if (v.is_array() && v.size() == 3 && v[0].is_number()) return vec3(v, key).asDiagonal();
    if (!v.is_array() || v.size() != 3) fail(key, "must be [3] or [3][3]");
    Mat3 out;
    for (int r = 0; r < 3; ++r) out.row(r) = vec3(v[r], key).transpose();
    return out;
  }

  Interval interval(const json& v, const std::string& key) const {
    only(v, {"start", "end"}, key);
    if (!v.contains("start") || !v.contains("end")) fail(key, "needs start and end");
    return {integer(v, "start", 0), integer(v, "end", 0)};
  }

  ModelParams params(const json& v, const std::string& key, ModelParams p) const {
    only(v, {"alpha", "beta", "d_a", "d_t", "eps_speed", "eps_disc"}, key);
    p.alpha = number(v, "alpha", p.alpha);
    p.beta = number(v, "beta", p.beta);
    p.d_a = number(v, "d_a", p.d_a);
    if (v.contains("d_t")) p.d_t = mat3(v["d_t"], "d_t");
    p.eps_speed = number(v, "eps_speed", p.eps_speed);
    p.eps_disc = number(v, "eps_disc", p.eps_disc);
    return p;
  }

 private:
  const std::string& text_;
  json doc_;
};

json to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

json to_json(const Mat3& m) {
  json out = json::array();
  for (int r = 0; r < 3; ++r) out.push_back(to_json(Vec3(m.row(r).transpose())));
  return out;
}

json to_json(const ModelParams& p) {
  return {{"alpha", p.alpha}, {"beta", p.beta},           {"d_a", p.d_a},
          {"d_t", to_json(p.d_t)}, {"eps_speed", p.eps_speed}, {"eps_disc", p.eps_disc}};
}

json to_json(const Interval& iv) { return {{"start", iv.start}, {"end", iv.end}}; }

// Shortest text that reads back to the same double.
std::string fmt(double v) {
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

std::vector<std::vector<double>> parse_rows(const std::string& text, std::size_t columns,
                                            const char* what) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  bool header = true;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    std::vector<double> row;
    std::istringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str()) {
        throw ConfigError(std::string(what) + " line " + std::to_string(number) + ": bad number '" +
                          cell + "'");
      }
      row.push_back(v);
    }
    if (row.size() != columns) {
      throw ConfigError(std::string(what) + " line " + std::to_string(number) + ": expected " +
                        std::to_string(columns) + " columns");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// Runs a validator and reports its complaint at the first of `keys` named
// both in the message and in the text, or at `keys.front()`.
void check_valid(const Reader& rd, std::initializer_list<const char*> keys, const auto& validate) {
  try {
    validate();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    std::string key = *keys.begin();
    for (const char* k : keys)
      if (msg.find(k) != std::string::npos && rd.mentions(k)) {
        key = k;
        break;
      }
    rd.fail(key, msg);
  }
}

}  // namespace

Scenario parse_scenario(const std::string& text) {
  const Reader rd(text);
  const json& d = rd.doc();
  rd.only(d, {"schema", "route", "seed", "length", "tau", "noise_sigma", "sensors", "speed", "substeps",
              "random_controls", "drift", "missing", "truth", "model"},
          "scenario");

  Route route = Route::cruise;
  if (d.contains("route")) {
    if (!d["route"].is_string()) rd.fail("route", "must be a string");
    try {
      route = route_from_string(d["route"].get<std::string>());
    } catch (const std::invalid_argument& e) {
      rd.fail("route", e.what());
    }
  }
  const bool calibrated_drift = d.contains("drift") && d["drift"].is_boolean() && d["drift"].get<bool>();
  std::uint64_t seed = 1;
  if (d.contains("seed")) {
    if (!d["seed"].is_number_unsigned()) rd.fail("seed", "must be a non-negative integer");
    seed = d["seed"].get<std::uint64_t>();
  }
  Scenario scn = default_scenario(route, calibrated_drift, seed);

  if (d.contains("length")) {
    scn.length = rd.integer(d, "length", scn.length);
    if (calibrated_drift) {
      const int third = scn.length / 3;
      scn.drift->span = {third + 1, 2 * third};
    }
  }
  scn.tau = rd.number(d, "tau", scn.tau);
  scn.noise_sigma = rd.number(d, "noise_sigma", scn.noise_sigma);
  scn.sensors = rd.integer(d, "sensors", scn.sensors);
  scn.speed = rd.number(d, "speed", scn.speed);
  scn.substeps = rd.integer(d, "substeps", scn.substeps);
  scn.random_controls = rd.boolean(d, "random_controls", scn.random_controls);

  if (d.contains("drift") && !d["drift"].is_boolean()) {
    const json& v = d["drift"];
    if (v.is_null()) {
      scn.drift.reset();
    } else {
      rd.only(v, {"start", "end", "offset", "sensors"}, "drift");
      Drift dr;
      if (!v.contains("start") || !v.contains("end")) rd.fail("drift", "needs start and end");
      dr.span = {rd.integer(v, "start", 0), rd.integer(v, "end", 0)};
      if (v.contains("offset")) dr.offset = rd.vec3(v["offset"], "offset");
      if (v.contains("sensors")) {
        if (!v["sensors"].is_array()) rd.fail("sensors", "must be an array of sensor indices");
        dr.sensors.clear();
        for (const auto& s : v["sensors"]) {
          if (!s.is_number_integer()) rd.fail("sensors", "must be an array of sensor indices");
          dr.sensors.push_back(s.get<int>());
        }
      }
      scn.drift = dr;
    }
  }
  if (d.contains("missing")) {
    if (d["missing"].is_null()) scn.missing.reset();
    else scn.missing = rd.interval(d["missing"], "missing");
  }
  if (d.contains("truth")) scn.truth = rd.params(d["truth"], "truth", scn.truth);
  if (d.contains("model")) scn.model = rd.params(d["model"], "model", scn.model);

  check_valid(rd, {"missing", "drift", "length", "tau", "noise_sigma", "sensors", "speed", "substeps",
                   "alpha", "beta", "d_a", "d_t"},
              [&] { scn.validate(); });
  return scn;
}

std::string scenario_to_json(const Scenario& scn) {
  json d = {{"schema", kSchemaVersion},
            {"route", to_string(scn.route)},
            {"seed", scn.seed},
            {"length", scn.length},
            {"tau", scn.tau},
            {"noise_sigma", scn.noise_sigma},
            {"sensors", scn.sensors},
            {"speed", scn.speed},
            {"substeps", scn.substeps},
            {"random_controls", scn.random_controls},
            {"truth", to_json(scn.truth)},
            {"model", to_json(scn.model)}};
  if (scn.drift) {
    d["drift"] = {{"start", scn.drift->span.start},
                  {"end", scn.drift->span.end},
                  {"offset", to_json(scn.drift->offset)},
                  {"sensors", scn.drift->sensors}};
  } else {
    d["drift"] = false;
  }
  d["missing"] = scn.missing ? to_json(*scn.missing) : json(nullptr);
  return d.dump(2) + "\n";
}

NavScenario parse_nav_scenario(const std::string& text) {
  const Reader rd(text);
  const json& d = rd.doc();
  rd.only(d, {"schema", "seed", "obstacles_random", "start", "nodes", "obstacles", "params", "nav"},
          "navigation scenario");

  std::uint64_t seed = 1;
  if (d.contains("seed")) {
    if (!d["seed"].is_number_unsigned()) rd.fail("seed", "must be a non-negative integer");
    seed = d["seed"].get<std::uint64_t>();
  }
  NavScenario scn;
  try {
    scn = random_nav_scenario(rd.integer(d, "obstacles_random", 0), seed);
  } catch (const std::invalid_argument& e) {
    rd.fail("obstacles_random", e.what());
  }
  if (d.contains("params")) scn.params = rd.params(d["params"], "params", scn.params);
  if (d.contains("start")) {
    const json& v = d["start"];
    rd.only(v, {"x", "v", "p", "c"}, "start");
    if (v.contains("x")) scn.start.x = rd.vec3(v["x"], "x");
    if (v.contains("v")) scn.start.v = rd.vec3(v["v"], "v");
    scn.start.p = rd.number(v, "p", scn.params.equilibrium_power(scn.start.speed()));
    if (v.contains("c")) scn.start.c = rd.vec3(v["c"], "c");
  }
  if (d.contains("nodes")) {
    if (!d["nodes"].is_array()) rd.fail("nodes", "must be an array");
    scn.plan.nodes.clear();
    for (const auto& v : d["nodes"]) {
      rd.only(v, {"position", "cov", "time"}, "nodes");
      if (!v.contains("position") || !v.contains("time")) rd.fail("nodes", "each node needs position and time");
      Node nd;
      nd.position = rd.vec3(v["position"], "position");
      nd.time = rd.integer(v, "time", 0);
      if (v.contains("cov")) nd.cov = rd.mat3(v["cov"], "cov");
      scn.plan.nodes.push_back(nd);
    }
  }
  if (d.contains("obstacles")) {
    if (!d["obstacles"].is_array()) rd.fail("obstacles", "must be an array");
    for (const auto& v : d["obstacles"]) {
      rd.only(v, {"center", "shape", "margin"}, "obstacles");
      if (!v.contains("center") || !v.contains("shape")) rd.fail("obstacles", "each obstacle needs center and shape");
      Obstacle o;
      o.center = rd.vec3(v["center"], "center");
      o.shape = rd.mat3(v["shape"], "shape");
      o.margin = rd.number(v, "margin", o.margin);
      scn.obstacles.push_back(o);
    }
  }
  if (d.contains("nav")) {
    const json& v = d["nav"];
    rd.only(v, {"tau", "eta", "max_iterations", "max_hit", "hinge_sigma", "horizon_nodes"}, "nav");
    scn.cfg.tau = rd.number(v, "tau", scn.cfg.tau);
    scn.cfg.eta = rd.number(v, "eta", scn.cfg.eta);
    scn.cfg.max_iterations = rd.integer(v, "max_iterations", scn.cfg.max_iterations);
    scn.cfg.max_hit = rd.number(v, "max_hit", scn.cfg.max_hit);
    scn.cfg.hinge_sigma = rd.number(v, "hinge_sigma", scn.cfg.hinge_sigma);
    scn.cfg.horizon_nodes = rd.integer(v, "horizon_nodes", scn.cfg.horizon_nodes);
  }

  check_valid(rd, {"params", "alpha", "beta", "d_a", "d_t"}, [&] { scn.params.validate(); });
  check_valid(rd, {"nav", "tau", "eta", "max_iterations", "max_hit", "hinge_sigma", "horizon_nodes"},
              [&] { scn.cfg.validate(); });
  check_valid(rd, {"nodes"}, [&] { scn.plan.validate(); });
  if (scn.plan.nodes.front().time <= 0) rd.fail("nodes", "arrival times must be after the start (t = 0)");
  for (const auto& o : scn.obstacles) check_valid(rd, {"obstacles", "shape", "margin"}, [&] { o.validate(); });
  return scn;
}

std::string nav_scenario_to_json(const NavScenario& scn) {
  json nodes = json::array(), obstacles = json::array();
  for (const Node& nd : scn.plan.nodes)
    nodes.push_back({{"position", to_json(nd.position)}, {"cov", to_json(nd.cov)}, {"time", nd.time}});
  for (const Obstacle& o : scn.obstacles)
    obstacles.push_back({{"center", to_json(o.center)}, {"shape", to_json(o.shape)}, {"margin", o.margin}});
  const json d = {
      {"schema", kSchemaVersion},
      {"start", {{"x", to_json(scn.start.x)}, {"v", to_json(scn.start.v)}, {"p", scn.start.p}, {"c", to_json(scn.start.c)}}},
      {"nodes", nodes},
      {"obstacles", obstacles},
      {"params", to_json(scn.params)},
      {"nav",
       {{"tau", scn.cfg.tau},
        {"eta", scn.cfg.eta},
        {"max_iterations", scn.cfg.max_iterations},
        {"max_hit", scn.cfg.max_hit},
        {"hinge_sigma", scn.cfg.hinge_sigma},
        {"horizon_nodes", scn.cfg.horizon_nodes}}}};
  return d.dump(2) + "\n";
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
  if (!out) throw ConfigError("write failed: " + path.string());
}

std::string observations_csv(std::span<const std::vector<Measurement>> obs) {
  std::string out = "t,sensor,zx,zy,zz\n";
  for (std::size_t t = 0; t < obs.size(); ++t)
    for (const auto& m : obs[t]) {
      out += std::to_string(t + 1) + ',' + std::to_string(m.sensor);
      for (int a = 0; a < 3; ++a) out += ',' + fmt(m.z(a));
      out += '\n';
    }
  return out;
}

std::vector<std::vector<Measurement>> parse_observations_csv(const std::string& text, int length,
                                                             double sigma) {
  std::vector<std::vector<Measurement>> obs(length);
  for (const auto& row : parse_rows(text, 5, "observations")) {
    const int t = static_cast<int>(row[0]);
    if (t < 1 || t > length || row[0] != t) {
      throw ConfigError("observations: time index " + fmt(row[0]) + " outside [1, " +
                        std::to_string(length) + "]");
    }
    Measurement m;
    m.sensor = static_cast<int>(row[1]);
    m.z = Vec3(row[2], row[3], row[4]);
    m.r = sigma * sigma * Mat3::Identity();
    obs[t - 1].push_back(m);
  }
  return obs;
}

std::string states_csv(std::span<const State> states, int first_t) {
  std::string out = "t,x_x,x_y,x_z,v_x,v_y,v_z,p,c_x,c_y,c_z\n";
  for (std::size_t i = 0; i < states.size(); ++i) {
    out += std::to_string(first_t + static_cast<int>(i));
    const Vec10 s = states[i].vector();
    for (int a = 0; a < kStateDim; ++a) out += ',' + fmt(s(a));
    out += '\n';
  }
  return out;
}

std::vector<State> parse_states_csv(const std::string& text) {
  std::vector<State> out;
  for (const auto& row : parse_rows(text, 1 + kStateDim, "states")) {
    Vec10 s;
    for (int a = 0; a < kStateDim; ++a) s(a) = row[a + 1];
    out.push_back(State::from_vector(s));
  }
  return out;
}

}  // namespace adate
