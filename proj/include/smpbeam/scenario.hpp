#pragma once

// Scenario configuration, built-in presets, the simulation driver and data
// emission: probe time histories, geometry snapshots, a run-metadata file
// recording every default in effect, and the spatial convergence study.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "smpbeam/solver.hpp"
#include "smpbeam/stents.hpp"

namespace smpbeam::scenario {

using nlohmann::json;

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Probe {
  std::string name;
  bool is_joint = false;
  int joint = 0;
  int patch = 0;
  double u = 1.0;
};

struct ScenarioConfig {
  int schema_version = 1;
  std::string name = "custom";

  // geometry
  std::string builder;  // arch | straight-beam | stent-straight | stent-curved
  double arch_radius = 1.0;      // [m]
  double arch_sweep = M_PI / 2;  // [rad]
  Vec3 beam_start = Vec3::Zero();
  Vec3 beam_end = Vec3(0, 1, 0);  // [m]
  stents::StentLayout layout;
  bool symmetry_reduced = true;  // quarter (straight) / half (curved) model

  // cross-section
  double diameter = 0.05;  // [m]
  double nu = 0.33;
  double kappa = 1.0;

  // material
  std::string material_name = "PLA-vanManen";
  material::PronySeries prony = material::pla_van_manen();

  // discretization
  int degree = 6;
  int points = 20;
  double h = 1e-3;     // [s]
  double t_total = 1;  // [s]

  // schedules: channel 0 scales tip loads, channel 1 drives joint programs
  schedule::PiecewiseLinear temperature = schedule::PiecewiseLinear::constant(70.0);
  schedule::PiecewiseLinear load_scale = schedule::PiecewiseLinear::constant(0.0);
  schedule::PiecewiseLinear ramp = schedule::PiecewiseLinear::constant(0.0);

  // beam tip loads (applied at u = 1 through the load channel)
  Vec3 tip_force = Vec3::Zero();   // [N]
  Vec3 tip_moment = Vec3::Zero();  // [N m]

  // program events
  double switch_time = -1.0;  // Dirichlet -> free Neumann; < 0 disables
  bool clamp_joint_rotations = false;
  bool axial_pins = true;  // pin leftover rigid modes at the switch
  // The constraint reactions at the switch are applied as nodal loads and
  // ramped to zero over this many steps, so the elastic snap is resolved by
  // continuation; the end state equals the abrupt-switch equilibrium.
  int release_steps = 16;

  // probes and outputs
  std::vector<Probe> probes;
  std::vector<double> snapshot_times;
  int snapshot_samples = 50;

  solver::NewtonOptions newton;

  std::vector<std::string> validate() const {
    std::vector<std::string> bad;
    if (schema_version != 1) bad.push_back("schema_version: expected 1");
    if (builder != "arch" && builder != "straight-beam" &&
        builder != "stent-straight" && builder != "stent-curved")
      bad.push_back("geometry.builder: unknown builder '" + builder + "'");
    if (degree < 2) bad.push_back("discretization.degree: require p >= 2");
    if (points < degree + 1)
      bad.push_back("discretization.points: require n >= p + 1");
    if (h <= 0.0) bad.push_back("discretization.time_step_s: require h > 0");
    if (t_total <= 0.0)
      bad.push_back("discretization.total_time_s: require positive duration");
    if (diameter <= 0.0) bad.push_back("section.diameter: must be positive");
    if (kappa <= 0.0) bad.push_back("section.kappa: must be positive");
    try {
      prony.validate();
    } catch (const std::exception& e) {
      bad.push_back(std::string("material: ") + e.what());
    }
    if (builder == "stent-straight" || builder == "stent-curved") {
      try {
        stents::StentLayout lay = layout;
        lay.degree = degree;
        lay.ctrl_n = points;
        lay.validate();
      } catch (const std::exception& e) {
        bad.push_back(std::string("geometry: ") + e.what());
      }
    }
    for (double t : snapshot_times)
      if (t < 0.0 || t > t_total)
        bad.push_back("output.snapshot_times_s: outside [0, total_time]");
    if (switch_time > t_total)
      bad.push_back("program.switch_time_s: beyond total time");
    return bad;
  }
};

// ---------------------------------------------------------------------------
// Config parsing (JSON, explicit unit suffixes, strict keys)
// ---------------------------------------------------------------------------

namespace detail {

class Reader {
 public:
  explicit Reader(std::vector<std::string>& sink) : bad_(sink) {}

  void fail(const std::string& path, const std::string& msg) {
    bad_.push_back(path + ": " + msg);
  }

  void check_keys(const json& j, const std::string& path,
                  std::initializer_list<const char*> allowed) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      bool ok = false;
      for (const char* a : allowed)
        if (it.key() == a) ok = true;
      if (!ok) fail(path + "." + it.key(), "unknown key");
    }
  }

  double number(const json& j, const std::string& path, const char* key,
                std::optional<double> fallback = std::nullopt) {
    if (!j.contains(key)) {
      if (fallback) return *fallback;
      fail(path + "." + key, "missing");
      return 0.0;
    }
    if (!j[key].is_number()) {
      fail(path + "." + key, "expected a number");
      return 0.0;
    }
    return j[key].get<double>();
  }

  // Quantity with an explicit unit suffix, e.g. radius_m / radius_mm.
  double quantity(const json& j, const std::string& path, const char* base,
                  std::initializer_list<std::pair<const char*, double>> units,
                  std::optional<double> fallback = std::nullopt) {
    std::optional<double> found;
    for (const auto& [suffix, factor] : units) {
      const std::string key = std::string(base) + "_" + suffix;
      if (j.contains(key)) {
        if (found)
          fail(path + "." + key, "duplicate unit variants for " + std::string(base));
        if (!j[key].is_number())
          fail(path + "." + key, "expected a number");
        else
          found = j[key].get<double>() * factor;
      }
    }
    if (!found) {
      if (fallback) return *fallback;
      fail(path + "." + std::string(base) + "_<unit>", "missing quantity");
      return 0.0;
    }
    return *found;
  }

  schedule::PiecewiseLinear table(const json& j, const std::string& path) {
    std::vector<double> t, v;
    if (!j.is_array()) {
      fail(path, "expected an array of [t, value] pairs");
      return schedule::PiecewiseLinear::constant(0.0);
    }
    for (const auto& row : j) {
      if (!row.is_array() || row.size() != 2 || !row[0].is_number() ||
          !row[1].is_number()) {
        fail(path, "expected [t, value] number pairs");
        return schedule::PiecewiseLinear::constant(0.0);
      }
      t.push_back(row[0].get<double>());
      v.push_back(row[1].get<double>());
    }
    if (t.empty() || !std::is_sorted(t.begin(), t.end())) {
      fail(path, "breakpoints must be nonempty and sorted");
      return schedule::PiecewiseLinear::constant(0.0);
    }
    return schedule::PiecewiseLinear(t, v);
  }

  Vec3 vec3(const json& j, const std::string& path, const char* key,
            std::optional<Vec3> fallback = std::nullopt) {
    if (!j.contains(key)) {
      if (fallback) return *fallback;
      fail(path + "." + key, "missing");
      return Vec3::Zero();
    }
    const auto& a = j[key];
    if (!a.is_array() || a.size() != 3) {
      fail(path + "." + key, "expected [x, y, z]");
      return Vec3::Zero();
    }
    return Vec3(a[0].get<double>(), a[1].get<double>(), a[2].get<double>());
  }

 private:
  std::vector<std::string>& bad_;
};

}  // namespace detail

inline ScenarioConfig preset(const std::string& name);

// Parses and validates a scenario configuration. On any violation the full
// list is thrown inside a ParseError (one message per line).
inline ScenarioConfig parse_config(const std::string& text) {
  std::vector<std::string> bad;
  json root;
  try {
    root = json::parse(text);
  } catch (const std::exception& e) {
    throw ParseError(std::string("config is not valid JSON (") + e.what() +
                     "); required blocks: schema_version, geometry, material, "
                     "section, discretization, schedule");
  }
  detail::Reader rd(bad);

  ScenarioConfig cfg;
  if (root.contains("preset")) {
    if (!root["preset"].is_string())
      throw ParseError("preset: expected a preset name");
    cfg = preset(root["preset"].get<std::string>());
    // presets may be customized by the remaining blocks below
  }
  rd.check_keys(root, "",
                {"schema_version", "preset", "name", "geometry", "material",
                 "section", "discretization", "schedule", "loads", "program",
                 "probes", "output", "solver"});
  if (!root.contains("preset")) {
    for (const char* req : {"geometry", "material", "discretization"})
      if (!root.contains(req))
        rd.fail(req, "required block missing");
  }
  if (root.contains("schema_version")) {
    if (!root["schema_version"].is_number_integer())
      rd.fail("schema_version", "expected an integer");
    else
      cfg.schema_version = root["schema_version"].get<int>();
  }
  if (root.contains("name")) cfg.name = root["name"].get<std::string>();

  if (root.contains("geometry")) {
    const auto& g = root["geometry"];
    rd.check_keys(g, "geometry",
                  {"builder", "radius_m", "radius_mm", "sweep_deg", "start_m",
                   "end_m", "crown_radius_m", "crown_radius_mm",
                   "crown_height_m", "crown_height_mm", "wire_count",
                   "crown_spacing_m", "crown_spacing_mm", "crown_count",
                   "bridge_height_m", "bridge_height_mm", "bridges_per_pair",
                   "delta_r_m", "delta_r_mm", "axis_radius_m", "axis_radius_mm",
                   "axis_center_m", "axis_sweep_deg", "symmetry_reduced"});
    if (g.contains("builder")) cfg.builder = g["builder"].get<std::string>();
    if (cfg.builder == "arch") {
      cfg.arch_radius = rd.quantity(g, "geometry", "radius",
                                    {{"m", 1.0}, {"mm", 1e-3}}, cfg.arch_radius);
      cfg.arch_sweep = rd.number(g, "geometry", "sweep_deg",
                                 cfg.arch_sweep * 180.0 / M_PI) * M_PI / 180.0;
    } else if (cfg.builder == "straight-beam") {
      cfg.beam_start = rd.vec3(g, "geometry", "start_m", cfg.beam_start);
      cfg.beam_end = rd.vec3(g, "geometry", "end_m", cfg.beam_end);
    } else {
      auto& lay = cfg.layout;
      lay.crown_radius = rd.quantity(g, "geometry", "crown_radius",
                                     {{"m", 1.0}, {"mm", 1e-3}}, lay.crown_radius);
      // crown_height is the full height 2 h_c
      lay.half_height = 0.5 * rd.quantity(g, "geometry", "crown_height",
                                          {{"m", 1.0}, {"mm", 1e-3}},
                                          2.0 * lay.half_height);
      lay.wire_count = static_cast<int>(
          rd.number(g, "geometry", "wire_count", lay.wire_count));
      lay.crown_spacing = rd.quantity(g, "geometry", "crown_spacing",
                                      {{"m", 1.0}, {"mm", 1e-3}},
                                      lay.crown_spacing);
      lay.crown_count = static_cast<int>(
          rd.number(g, "geometry", "crown_count", lay.crown_count));
      lay.bridge_height = rd.quantity(g, "geometry", "bridge_height",
                                      {{"m", 1.0}, {"mm", 1e-3}},
                                      lay.bridge_height);
      lay.bridges_per_pair = static_cast<int>(
          rd.number(g, "geometry", "bridges_per_pair", lay.bridges_per_pair));
      lay.delta_r = rd.quantity(g, "geometry", "delta_r",
                                {{"m", 1.0}, {"mm", 1e-3}}, lay.delta_r);
      lay.axis_radius = rd.quantity(g, "geometry", "axis_radius",
                                    {{"m", 1.0}, {"mm", 1e-3}}, lay.axis_radius);
      lay.axis_center = rd.vec3(g, "geometry", "axis_center_m", lay.axis_center);
      lay.axis_sweep = rd.number(g, "geometry", "axis_sweep_deg",
                                 lay.axis_sweep * 180.0 / M_PI) * M_PI / 180.0;
      if (g.contains("symmetry_reduced"))
        cfg.symmetry_reduced = g["symmetry_reduced"].get<bool>();
    }
  }

  if (root.contains("material")) {
    const auto& m = root["material"];
    rd.check_keys(m, "material",
                  {"name", "modulus_inf_MPa", "modulus_inf_Pa", "branches_MPa_s",
                   "wlf"});
    if (m.contains("name")) {
      cfg.material_name = m["name"].get<std::string>();
      try {
        cfg.prony = material::named_material(cfg.material_name);
      } catch (const std::exception& e) {
        rd.fail("material.name", e.what());
      }
    } else {
      cfg.material_name = "custom";
      material::PronySeries p;
      p.modulus_inf = rd.quantity(m, "material", "modulus_inf",
                                  {{"MPa", 1e6}, {"Pa", 1.0}});
      if (m.contains("branches_MPa_s")) {
        for (const auto& row : m["branches_MPa_s"]) {
          if (!row.is_array() || row.size() != 2) {
            rd.fail("material.branches_MPa_s", "expected [E_MPa, tau_s] pairs");
            break;
          }
          p.branches.push_back(
              {row[0].get<double>() * 1e6, row[1].get<double>()});
        }
      }
      if (m.contains("wlf")) {
        const auto& w = m["wlf"];
        rd.check_keys(w, "material.wlf", {"C1", "C2_K", "Tg_C"});
        p.wlf.c1 = rd.number(w, "material.wlf", "C1");
        p.wlf.c2 = rd.number(w, "material.wlf", "C2_K");
        p.wlf.t_g = rd.number(w, "material.wlf", "Tg_C");
      } else {
        rd.fail("material.wlf", "required for explicit Prony tables");
      }
      cfg.prony = p;
    }
  }

  if (root.contains("section")) {
    const auto& s = root["section"];
    rd.check_keys(s, "section", {"diameter_m", "diameter_mm", "nu", "kappa"});
    cfg.diameter = rd.quantity(s, "section", "diameter",
                               {{"m", 1.0}, {"mm", 1e-3}}, cfg.diameter);
    cfg.nu = rd.number(s, "section", "nu", cfg.nu);
    cfg.kappa = rd.number(s, "section", "kappa", cfg.kappa);
  }

  if (root.contains("discretization")) {
    const auto& d = root["discretization"];
    rd.check_keys(d, "discretization",
                  {"degree", "points", "time_step_s", "total_time_s"});
    cfg.degree = static_cast<int>(rd.number(d, "discretization", "degree",
                                            double(cfg.degree)));
    cfg.points = static_cast<int>(rd.number(d, "discretization", "points",
                                            double(cfg.points)));
    cfg.h = rd.number(d, "discretization", "time_step_s", cfg.h);
    cfg.t_total = rd.number(d, "discretization", "total_time_s", cfg.t_total);
  }

  if (root.contains("schedule")) {
    const auto& s = root["schedule"];
    rd.check_keys(s, "schedule", {"temperature_C", "load_scale", "ramp"});
    if (s.contains("temperature_C"))
      cfg.temperature = rd.table(s["temperature_C"], "schedule.temperature_C");
    if (s.contains("load_scale"))
      cfg.load_scale = rd.table(s["load_scale"], "schedule.load_scale");
    if (s.contains("ramp")) cfg.ramp = rd.table(s["ramp"], "schedule.ramp");
  }

  if (root.contains("loads")) {
    const auto& l = root["loads"];
    rd.check_keys(l, "loads", {"tip_force_N", "tip_moment_Nm"});
    cfg.tip_force = rd.vec3(l, "loads", "tip_force_N", cfg.tip_force);
    cfg.tip_moment = rd.vec3(l, "loads", "tip_moment_Nm", cfg.tip_moment);
  }

  if (root.contains("program")) {
    const auto& pr = root["program"];
    rd.check_keys(pr, "program",
                  {"switch_time_s", "clamp_joint_rotations", "axial_pins",
                   "release_steps"});
    cfg.switch_time = rd.number(pr, "program", "switch_time_s", cfg.switch_time);
    if (pr.contains("clamp_joint_rotations"))
      cfg.clamp_joint_rotations = pr["clamp_joint_rotations"].get<bool>();
    if (pr.contains("axial_pins"))
      cfg.axial_pins = pr["axial_pins"].get<bool>();
    cfg.release_steps = static_cast<int>(
        rd.number(pr, "program", "release_steps", double(cfg.release_steps)));
  }

  if (root.contains("probes")) {
    cfg.probes.clear();
    for (const auto& p : root["probes"]) {
      rd.check_keys(p, "probes[]", {"name", "joint", "patch", "u"});
      Probe probe;
      probe.name = p.contains("name") ? p["name"].get<std::string>() : "probe";
      if (p.contains("joint")) {
        probe.is_joint = true;
        probe.joint = p["joint"].get<int>();
      } else {
        probe.patch = p.contains("patch") ? p["patch"].get<int>() : 0;
        probe.u = p.contains("u") ? p["u"].get<double>() : 1.0;
      }
      cfg.probes.push_back(probe);
    }
  }

  if (root.contains("output")) {
    const auto& o = root["output"];
    rd.check_keys(o, "output", {"snapshot_times_s", "snapshot_samples"});
    if (o.contains("snapshot_times_s")) {
      cfg.snapshot_times.clear();
      for (const auto& t : o["snapshot_times_s"])
        cfg.snapshot_times.push_back(t.get<double>());
    }
    if (o.contains("snapshot_samples"))
      cfg.snapshot_samples = o["snapshot_samples"].get<int>();
  }

  if (root.contains("solver")) {
    const auto& s = root["solver"];
    rd.check_keys(s, "solver",
                  {"tol_residual", "tol_increment", "max_iterations",
                   "max_bisections", "stabilization"});
    cfg.newton.tol_residual =
        rd.number(s, "solver", "tol_residual", cfg.newton.tol_residual);
    cfg.newton.tol_increment =
        rd.number(s, "solver", "tol_increment", cfg.newton.tol_increment);
    cfg.newton.max_iterations = static_cast<int>(rd.number(
        s, "solver", "max_iterations", double(cfg.newton.max_iterations)));
    cfg.newton.max_bisections = static_cast<int>(rd.number(
        s, "solver", "max_bisections", double(cfg.newton.max_bisections)));
    cfg.newton.stabilization =
        rd.number(s, "solver", "stabilization", cfg.newton.stabilization);
  }

  for (const auto& v : cfg.validate()) bad.push_back(v);
  if (!bad.empty()) {
    std::ostringstream msg;
    msg << "configuration invalid:";
    for (const auto& b : bad) msg << "\n  " << b;
    throw ParseError(msg.str());
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Presets: the four experiments shipped with the solver
// ---------------------------------------------------------------------------

struct PresetInfo {
  std::string name;
  std::string summary;
  bool long_running = false;
};

inline std::vector<PresetInfo> preset_list() {
  return {
      {"arch-90",
       "90-degree circular arch, tip couples M2 = M3 ramping to 25 Nm while "
       "heating 31.5 -> 90 C over 5 s",
       false},
      {"cantilever-morph",
       "1 m cantilever shape-memory cycle: load hot, cool, unload, reheat",
       false},
      {"stent-straight-quarter",
       "six-crown straight stent, quarter model, radial contraction 15 mm, "
       "Dirichlet -> Neumann switch and thermal recovery",
       true},
      {"stent-curved-half",
       "four-crown curved stent, half model, miniaturization to the "
       "straightened configuration and thermal recovery",
       true},
  };
}

namespace detail {
// Slender-wire solver settings: tolerances scaled to the sub-newton force
// rows, a finer constraint release, and drag stabilization as a last
// resort through the release/recovery snap-throughs.
inline void stent_solver_defaults(ScenarioConfig& cfg);
}  // namespace detail
using detail::stent_solver_defaults;

inline ScenarioConfig preset(const std::string& name) {
  ScenarioConfig cfg;
  cfg.name = name;
  if (name == "arch-90") {
    cfg.builder = "arch";
    cfg.arch_radius = 1.0;
    cfg.arch_sweep = M_PI / 2.0;
    cfg.diameter = 0.05;
    cfg.degree = 6;
    cfg.points = 20;
    cfg.h = 1e-3;
    cfg.t_total = 5.0;
    cfg.temperature = schedule::PiecewiseLinear({0.0, 5.0}, {31.5, 90.0});
    cfg.load_scale = schedule::PiecewiseLinear({0.0, 5.0}, {0.0, 1.0});
    // the stated 25 Nm ramp is applied to each of M2 and M3
    cfg.tip_moment = Vec3(0.0, 25.0, 25.0);
    cfg.probes = {{"tip", false, 0, 0, 1.0}};
    return cfg;
  }
  if (name == "cantilever-morph") {
    cfg.builder = "straight-beam";
    cfg.beam_start = Vec3::Zero();
    cfg.beam_end = Vec3(0, 1.0, 0);
    cfg.diameter = 0.05;
    cfg.degree = 6;
    cfg.points = 20;
    cfg.h = 1e-3;
    cfg.t_total = 2.5;
    cfg.temperature = schedule::PiecewiseLinear(
        {0.0, 0.5, 1.0, 1.625, 2.125, 2.5}, {90.0, 90.0, 31.5, 31.5, 90.0, 90.0});
    cfg.load_scale = schedule::PiecewiseLinear({0.0, 0.5, 1.0, 1.5, 2.5},
                                               {0.0, 1.0, 1.0, 0.0, 0.0});
    // tip force F3 plus the concentrated couple applied about x3, which is
    // the choice that produces the three-dimensional deformation
    cfg.tip_force = Vec3(0.0, 0.0, 50.0);
    cfg.tip_moment = Vec3(0.0, 0.0, 10.0);
    cfg.probes = {{"tip", false, 0, 0, 1.0}};
    return cfg;
  }
  if (name == "stent-straight-quarter") {
    cfg.builder = "stent-straight";
    cfg.symmetry_reduced = true;
    cfg.layout = stents::StentLayout{};  // R 20 mm, 2h_c 10 mm, d_c 15 mm
    cfg.layout.crown_count = 6;
    cfg.layout.delta_r = 0.015;
    cfg.diameter = 0.6e-3;
    cfg.degree = 6;
    cfg.points = 20;
    cfg.h = 2.5e-3;
    cfg.t_total = 3.25;
    cfg.temperature = schedule::PiecewiseLinear({0.0, 1.0, 1.75, 2.6, 3.25},
                                                {90.0, 90.0, 45.0, 71.96, 90.0});
    cfg.ramp = schedule::PiecewiseLinear({0.0, 1.0}, {0.0, 1.0});
    cfg.switch_time = 1.75;
    stent_solver_defaults(cfg);
    return cfg;
  }
  if (name == "stent-curved-half") {
    cfg.builder = "stent-curved";
    cfg.symmetry_reduced = true;
    cfg.layout = stents::StentLayout{};
    cfg.layout.axis_radius = 0.100;
    cfg.layout.axis_center = Vec3(0, 0, -0.005);
    cfg.layout.axis_sweep = M_PI / 4.0;
    cfg.layout.delta_r = 0.015;
    cfg.diameter = 0.6e-3;
    cfg.degree = 6;
    cfg.points = 81;
    cfg.h = 1e-3;
    cfg.t_total = 4.0;
    cfg.temperature = schedule::PiecewiseLinear(
        {0.0, 1.5, 2.25, 3.0, 3.1, 3.4, 4.0},
        {90.0, 90.0, 45.0, 67.5, 72.0, 85.5, 90.0});
    cfg.ramp = schedule::PiecewiseLinear({0.0, 1.5}, {0.0, 1.0});
    cfg.switch_time = 2.25;
    stent_solver_defaults(cfg);
    return cfg;
  }
  throw ParseError("unknown preset '" + name + "'");
}

namespace detail {
inline void stent_solver_defaults(ScenarioConfig& cfg) {
  cfg.newton.tol_residual = 1e-7;
  cfg.newton.tol_increment = 1e-9;
  cfg.newton.max_iterations = 40;
  cfg.newton.stabilization = 1e-4;
  cfg.release_steps = 16;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Scenario building and running
// ---------------------------------------------------------------------------

struct BuiltScenario {
  solver::Simulation sim;
  std::vector<Probe> probes;
  std::string geometry_notes;
  double max_fit_residual = 0.0;
  // pins to activate at the program switch: (patch, end, directions)
  struct PinPlan {
    int patch;
    int end;
    std::vector<Vec3> dirs;
  };
  std::vector<PinPlan> pins;
};

inline BuiltScenario build_scenario(const ScenarioConfig& cfg) {
  BuiltScenario out;
  solver::Simulation& sim = out.sim;
  sim.options = cfg.newton;
  sim.prony = cfg.prony;
  sim.sched.temperature = cfg.temperature;
  // channel 2 becomes the constraint-release ramp at the program switch
  sim.sched.channels = {cfg.load_scale, cfg.ramp,
                        schedule::PiecewiseLinear::constant(1.0)};
  const auto section =
      material::SectionProperties::circular(cfg.diameter, cfg.nu, cfg.kappa);
  const auto tensors = material::build_section_tensors(cfg.prony, section);

  if (cfg.builder == "arch" || cfg.builder == "straight-beam") {
    solver::PatchDef def;
    def.config = (cfg.builder == "arch")
                     ? geometry::build_arch(cfg.arch_radius, cfg.arch_sweep,
                                            cfg.degree, cfg.points)
                     : geometry::build_straight_beam(cfg.beam_start, cfg.beam_end,
                                                     cfg.degree, cfg.points);
    def.tensors = tensors;
    def.bc[0].kind = solver::EndBC::Kind::Clamped;
    def.bc[1].kind = solver::EndBC::Kind::Free;
    def.bc[1].load.force = cfg.tip_force;
    def.bc[1].load.moment = cfg.tip_moment;
    def.bc[1].load.channel = 0;
    sim.add_patch(def);
    out.geometry_notes = cfg.builder + ": single clamped patch, tip loads";
  } else {
    stents::StentLayout lay = cfg.layout;
    lay.degree = cfg.degree;
    lay.ctrl_n = cfg.points;
    const stents::StentAssembly asmb =
        (cfg.builder == "stent-straight")
            ? stents::build_straight_stent(lay, cfg.symmetry_reduced)
            : stents::build_curved_stent(lay, cfg.symmetry_reduced);
    out.geometry_notes = asmb.notes;
    out.max_fit_residual = asmb.max_fit_residual;
    for (const auto& cfg_patch : asmb.patches) {
      solver::PatchDef def;
      def.config = cfg_patch;
      def.tensors = tensors;
      sim.add_patch(def);
    }
    for (const auto& se : asmb.symmetry) {
      auto& bc = sim.end_bc(se.end.patch, se.end.end);
      bc.kind = solver::EndBC::Kind::Symmetry;
      bc.normal = se.normal;
    }
    for (const auto& jt : asmb.joints) {
      solver::Joint j;
      for (const auto& e : jt.ends) j.ends.push_back({e.patch, e.end});
      j.driven = true;
      j.pos_start = jt.position;
      j.pos_target = jt.target;
      j.ramp_channel = 1;
      j.clamp_rotations = cfg.clamp_joint_rotations;
      sim.add_joint(j);
    }
    // rigid-mode pins activated at the Dirichlet -> Neumann switch
    if (cfg.axial_pins && !asmb.symmetry.empty()) {
      if (cfg.builder == "stent-straight") {
        for (const auto& se : asmb.symmetry) {
          if (se.normal.isApprox(Vec3::UnitZ())) {
            out.pins.push_back({se.end.patch, se.end.end, {Vec3::UnitX()}});
            break;
          }
        }
      } else {
        out.pins.push_back({asmb.symmetry.front().end.patch,
                            asmb.symmetry.front().end.end,
                            {Vec3::UnitX(), Vec3::UnitZ()}});
        out.pins.push_back({asmb.symmetry.back().end.patch,
                            asmb.symmetry.back().end.end,
                            {Vec3::UnitZ()}});
      }
    }
  }
  sim.initialize();

  out.probes = cfg.probes;
  if (out.probes.empty()) {
    // default probes: the beam tip, or the first few interface joints
    if (sim.num_joints() == 0) {
      out.probes.push_back({"tip", false, 0, 0, 1.0});
    } else {
      for (int j = 0; j < std::min(4, sim.num_joints()); ++j)
        out.probes.push_back({"joint" + std::to_string(j), true, j, 0, 0.0});
    }
  }
  return out;
}

struct ProbeRecord {
  double t = 0.0;
  double temperature = 0.0;
  std::vector<Vec3> displacement;  // one per probe
  double load_scale = 0.0;
  double ramp = 0.0;
};

struct RunResult {
  int status = 0;  // 0 ok, 3 solver failure
  std::string message;
  std::vector<ProbeRecord> records;
  std::vector<std::string> files;
  int total_steps = 0;
  int total_iterations = 0;
  int total_bisections = 0;
};

namespace detail {

inline void write_float(std::ostream& os, double v) {
  os << std::setprecision(17) << v;
}

inline Vec3 probe_displacement(const solver::Simulation& sim, const Probe& p) {
  if (p.is_joint) {
    const auto& e = sim.joint(p.joint).ends.front();
    return sim.displacement(e.patch, e.end == 0 ? 0.0 : 1.0);
  }
  return sim.displacement(p.patch, p.u);
}

inline std::string snapshot_name(int index, double t) {
  std::ostringstream os;
  os << "snapshot_" << std::setw(3) << std::setfill('0') << index << "_t"
     << std::fixed << std::setprecision(6) << t << ".csv";
  return os.str();
}

}  // namespace detail

// Deformed-configuration polyline: uniform parameter sampling of every patch.
inline void emit_snapshot(const solver::Simulation& sim,
                          const std::filesystem::path& path,
                          int samples_per_patch) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write snapshot " + path.string());
  os << "patch_id,sample_index,u,x1,x2,x3\n";
  for (int q = 0; q < sim.num_patches(); ++q) {
    for (int i = 0; i < samples_per_patch; ++i) {
      const double u = (samples_per_patch == 1)
                           ? 0.0
                           : double(i) / (samples_per_patch - 1);
      const Vec3 x = sim.position(q, u);
      os << q << "," << i << ",";
      detail::write_float(os, u);
      os << ",";
      detail::write_float(os, x.x());
      os << ",";
      detail::write_float(os, x.y());
      os << ",";
      detail::write_float(os, x.z());
      os << "\n";
    }
  }
}

using StepObserver =
    std::function<void(double t, const solver::Simulation& sim)>;

inline RunResult run_scenario(const ScenarioConfig& cfg,
                              const std::filesystem::path& out_dir,
                              const StepObserver& observer = {}) {
  std::filesystem::create_directories(out_dir);
  BuiltScenario built = build_scenario(cfg);
  solver::Simulation& sim = built.sim;

  RunResult result;
  std::vector<double> events;
  if (cfg.switch_time > 0.0) events.push_back(cfg.switch_time);
  for (double t : cfg.snapshot_times) events.push_back(t);
  const auto grid = schedule::step_grid(cfg.t_total, cfg.h, sim.sched, events);

  auto record_at = [&](double t) {
    ProbeRecord rec;
    rec.t = t;
    rec.temperature = sim.sched.temperature(t);
    rec.load_scale = sim.sched.channel_value(0, t);
    rec.ramp = sim.sched.channel_value(1, t);
    for (const auto& p : built.probes)
      rec.displacement.push_back(detail::probe_displacement(sim, p));
    result.records.push_back(std::move(rec));
  };

  int snapshot_index = 0;
  auto snapshot_due = [&](double t) {
    for (double ts : cfg.snapshot_times)
      if (std::abs(ts - t) < 1e-12) return true;
    return false;
  };
  auto emit = [&](double t) {
    const auto name = detail::snapshot_name(snapshot_index++, t);
    emit_snapshot(sim, out_dir / name, cfg.snapshot_samples);
    result.files.push_back((out_dir / name).string());
  };

  record_at(0.0);
  emit(0.0);
  if (observer) observer(0.0, sim);

  std::string failure;
  for (size_t k = 1; k < grid.size(); ++k) {
    const double t = grid[k];
    try {
      const auto rep = sim.advance_to(t);
      result.total_steps += rep.substeps;
      result.total_iterations += rep.iterations;
      result.total_bisections += rep.bisections;
    } catch (const std::exception& e) {
      failure = e.what();
      break;
    }
    record_at(t);
    if (observer) observer(t, sim);
    if (snapshot_due(t)) emit(t);
    if (cfg.switch_time > 0.0 && std::abs(t - cfg.switch_time) < 1e-12) {
      // Dirichlet -> free Neumann with continuation: the constraint
      // reactions become applied nodal loads ramped to zero, so the state
      // after the ramp is the abrupt-switch equilibrium.
      const double t_end =
          cfg.switch_time + std::max(1, cfg.release_steps) * cfg.h;
      sim.sched.channels[2] =
          schedule::PiecewiseLinear({cfg.switch_time, t_end}, {1.0, 0.0});
      for (int j = 0; j < sim.num_joints(); ++j) {
        auto& jt = sim.joint(j);
        const auto [f, m] = sim.joint_imbalance(j);
        jt.driven = false;
        jt.force = -f;
        jt.moment = -m;
        jt.load_channel = 2;
      }
      for (const auto& pin : built.pins) {
        auto& bc = sim.end_bc(pin.patch, pin.end);
        const Vec3 pos = sim.position(pin.patch, pin.end == 0 ? 0.0 : 1.0);
        for (const Vec3& d : pin.dirs) bc.pins.push_back({d, d.dot(pos)});
      }
    }
  }

  // probe history
  {
    std::ofstream os(out_dir / "probes.csv");
    os << "time_s,temperature_C";
    for (const auto& p : built.probes)
      os << "," << p.name << "_u1," << p.name << "_u2," << p.name << "_u3";
    os << ",load_scale,ramp\n";
    for (const auto& rec : result.records) {
      detail::write_float(os, rec.t);
      os << ",";
      detail::write_float(os, rec.temperature);
      for (const auto& d : rec.displacement) {
        for (int c = 0; c < 3; ++c) {
          os << ",";
          detail::write_float(os, d[c]);
        }
      }
      os << ",";
      detail::write_float(os, rec.load_scale);
      os << ",";
      detail::write_float(os, rec.ramp);
      os << "\n";
    }
    result.files.push_back((out_dir / "probes.csv").string());
  }

  // final snapshot for failed runs: last good state
  if (!failure.empty()) {
    const auto name = "last_good_state.csv";
    emit_snapshot(sim, out_dir / name, cfg.snapshot_samples);
    result.files.push_back((out_dir / name).string());
  }

  // run metadata: every default and convention in effect
  {
    json meta;
    meta["schema_version"] = cfg.schema_version;
    meta["scenario"] = cfg.name;
    meta["builder"] = cfg.builder;
    meta["material"] = cfg.material_name;
    meta["discretization"] = {{"degree", cfg.degree},
                              {"points", cfg.points},
                              {"time_step_s", cfg.h},
                              {"total_time_s", cfg.t_total}};
    meta["section"] = {{"diameter_m", cfg.diameter},
                       {"nu", cfg.nu},
                       {"kappa", cfg.kappa}};
    meta["solver"] = {{"tol_residual", cfg.newton.tol_residual},
                      {"tol_increment", cfg.newton.tol_increment},
                      {"max_iterations", cfg.newton.max_iterations},
                      {"max_bisections", cfg.newton.max_bisections},
                      {"drift_repair_threshold", cfg.newton.drift_repair},
                      {"linear_solver", "sparse LU with row/column equilibration"}};
    meta["conventions"] = {
        {"constitutive_diagonals",
         "C_N = diag(G kappa A, G kappa A, E A); C_M = diag(E I1, E I2, G J); "
         "local axis 3 = tangent"},
        {"frame_construction",
         "rotation-minimizing frame by double reflection, seeded from a "
         "reference direction; exact closed-form frames for arcs and lines"},
        {"s_parametrization",
         "arc length of the initial geometry; all s-derivatives use the "
         "initial Jacobian"},
        {"history_rates",
         "Psi and viscous-strain s-derivatives propagated by the "
         "differentiated trapezoidal recurrences (pointwise exact)"},
        {"rotation_update",
         "R <- R exp(dTheta~); K <- exp(-dTheta~) K + T(dTheta) dTheta,_s"},
        {"interface_coupling",
         "master-slave increment tying; master rows enforce joint force and "
         "moment balance; Dirichlet programs prescribe translations only"},
        {"dirichlet_rotations",
         cfg.clamp_joint_rotations ? "clamped at driven joints"
                                   : "moment balance at driven joints"},
        {"small_angle_threshold", so3::kSmallAngle},
        {"temperature_field", "uniform over all patches at each step"},
        {"arch_couples", "25 Nm applied to each of M2 and M3"},
        {"cantilever_couple_axis", "x3 (three-dimensional deformation)"},
        {"l2_grid", "9 interior points u = 0.1 ... 0.9"},
        {"stent_wires", "plain B-spline least-squares fits (unweighted)"},
        {"axial_pins", cfg.axial_pins},
    };
    if (!built.geometry_notes.empty())
      meta["geometry_notes"] = built.geometry_notes;
    meta["max_fit_residual_m"] = built.max_fit_residual;
    if (cfg.switch_time > 0.0) {
      meta["switch_time_s"] = cfg.switch_time;
      meta["release_steps"] = cfg.release_steps;
    }
    meta["stabilized_steps"] = sim.stabilized_steps();
    meta["stabilization_base_factor"] = cfg.newton.stabilization;
    meta["steps"] = result.total_steps;
    meta["newton_iterations"] = result.total_iterations;
    meta["step_bisections"] = result.total_bisections;
    meta["drift_repairs"] = sim.drift_repairs();
    if (!failure.empty()) {
      meta["status"] = "solver_failure";
      meta["failure"] = failure;
    } else {
      meta["status"] = "ok";
    }
    std::ofstream os(out_dir / "run_metadata.json");
    os << meta.dump(2) << "\n";
    result.files.push_back((out_dir / "run_metadata.json").string());
  }

  if (!failure.empty()) {
    result.status = 3;
    result.message = failure;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Spatial convergence study
// ---------------------------------------------------------------------------

struct ConvergenceRow {
  int p = 0;
  int n = 0;
  double err = 0.0;
  double rate = 0.0;  // observed order vs the previous n for the same p
};

// Displacement on the 9-point evaluation grid at t_eval.
inline std::vector<Vec3> displacement_grid(const ScenarioConfig& cfg,
                                           double t_eval) {
  ScenarioConfig run_cfg = cfg;
  run_cfg.t_total = t_eval;
  BuiltScenario built = build_scenario(run_cfg);
  const auto grid =
      schedule::step_grid(t_eval, run_cfg.h, built.sim.sched, {});
  for (size_t k = 1; k < grid.size(); ++k) built.sim.advance_to(grid[k]);
  std::vector<Vec3> out;
  for (int i = 1; i <= 9; ++i)
    out.push_back(built.sim.displacement(0, i / 10.0));
  return out;
}

inline std::vector<ConvergenceRow> convergence_study(
    const ScenarioConfig& base, const std::vector<int>& p_list,
    const std::vector<int>& n_list, double t_eval = 3.0, int ref_p = 8,
    int ref_n = 150) {
  ScenarioConfig ref_cfg = base;
  ref_cfg.degree = ref_p;
  ref_cfg.points = ref_n;
  const auto ref = displacement_grid(ref_cfg, t_eval);

  std::vector<ConvergenceRow> rows;
  for (int p : p_list) {
    double prev_err = 0.0;
    int prev_n = 0;
    for (int n : n_list) {
      if (n < p + 2) continue;
      ScenarioConfig cfg = base;
      cfg.degree = p;
      cfg.points = n;
      const auto field = displacement_grid(cfg, t_eval);
      ConvergenceRow row;
      row.p = p;
      row.n = n;
      row.err = solver::l2_error(field, ref);
      row.rate = (prev_n > 0 && row.err > 0.0 && prev_err > 0.0)
                     ? std::log(prev_err / row.err) / std::log(double(n) / prev_n)
                     : 0.0;
      prev_err = row.err;
      prev_n = n;
      rows.push_back(row);
    }
  }
  return rows;
}

inline void write_convergence_csv(const std::vector<ConvergenceRow>& rows,
                                  const std::filesystem::path& path) {
  std::ofstream os(path);
  os << "p,n,err_l2,rate\n";
  for (const auto& r : rows) {
    os << r.p << "," << r.n << ",";
    detail::write_float(os, r.err);
    os << ",";
    detail::write_float(os, r.rate);
    os << "\n";
  }
}

}  // namespace smpbeam::scenario
