// Command-line driver: run scenarios (built-in presets or JSON configs),
// validate configurations, list presets, and run the spatial convergence
// study. Exit codes: 0 success, 2 configuration error, 3 solver failure.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "smpbeam/scenario.hpp"

namespace {

using namespace smpbeam;

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw scenario::ParseError("cannot read config file " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

scenario::ScenarioConfig load_config(const std::string& config_path,
                                     const std::string& preset_name) {
  if (!config_path.empty() && !preset_name.empty())
    throw scenario::ParseError("use either --config or --preset, not both");
  if (!config_path.empty())
    return scenario::parse_config(read_file(config_path));
  if (!preset_name.empty()) return scenario::preset(preset_name);
  throw scenario::ParseError("one of --config or --preset is required");
}

std::vector<double> parse_times(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

std::vector<int> parse_ints(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(std::stoi(item));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"smpbeam: shape-memory polymer beam simulator"};
  app.set_help_flag("--help", "print help");  // frees --h for the step size
  app.require_subcommand(1);

  std::string config_path, preset_name, out_dir = "out", snapshot_times;
  double h_override = 0.0, t_eval = 3.0;
  int p_override = 0, n_override = 0, crown_override = 0;
  std::string p_list = "2,3,4,5,6,7,8", n_list = "10,12,16,20,24,32";
  int ref_p = 8, ref_n = 150;

  auto add_common = [&](CLI::App* cmd) {
    cmd->set_help_flag("--help", "print help");
    cmd->add_option("--config", config_path, "path to a JSON scenario config");
    cmd->add_option("--preset", preset_name, "built-in preset name");
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--h", h_override, "time step override [s]");
    cmd->add_option("--p", p_override, "basis degree override");
    cmd->add_option("--n", n_override, "collocation points override");
  };

  auto* run = app.add_subcommand("run", "run a scenario and emit data files");
  add_common(run);
  run->add_option("--snapshot-times", snapshot_times,
                  "comma-separated snapshot times [s]");
  run->add_option("--crowns", crown_override, "stent crown count override");

  auto* check = app.add_subcommand("check", "validate a configuration only");
  check->add_option("--config", config_path, "path to a JSON scenario config")
      ->required();

  auto* conv =
      app.add_subcommand("convergence", "spatial convergence study table");
  add_common(conv);
  conv->add_option("--p-list", p_list, "degrees, comma separated");
  conv->add_option("--n-list", n_list, "collocation point counts");
  conv->add_option("--t-eval", t_eval, "evaluation time [s]");
  conv->add_option("--ref-p", ref_p, "reference degree");
  conv->add_option("--ref-n", ref_n, "reference point count");

  auto* presets = app.add_subcommand("presets", "preset utilities");
  auto* presets_list = presets->add_subcommand("list", "list built-in presets");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*presets_list || *presets) {
      for (const auto& info : scenario::preset_list()) {
        std::cout << info.name << (info.long_running ? "  [long-running]" : "")
                  << "\n    " << info.summary << "\n";
      }
      return 0;
    }
    if (*check) {
      scenario::parse_config(read_file(config_path));
      std::cout << "configuration OK\n";
      return 0;
    }

    auto cfg = load_config(config_path, preset_name);
    if (h_override > 0.0) cfg.h = h_override;
    if (p_override > 0) cfg.degree = p_override;
    if (n_override > 0) cfg.points = n_override;

    if (*run) {
      if (crown_override > 0) cfg.layout.crown_count = crown_override;
      if (!snapshot_times.empty())
        cfg.snapshot_times = parse_times(snapshot_times);
      const auto bad = cfg.validate();
      if (!bad.empty()) {
        for (const auto& b : bad) std::cerr << "config: " << b << "\n";
        return 2;
      }
      const auto result = scenario::run_scenario(cfg, out_dir);
      std::cout << "steps " << result.total_steps << ", newton iterations "
                << result.total_iterations << ", bisections "
                << result.total_bisections << "\n";
      for (const auto& f : result.files) std::cout << "wrote " << f << "\n";
      if (result.status != 0) {
        std::cerr << "solver failure: " << result.message << "\n";
        return 3;
      }
      return 0;
    }
    if (*conv) {
      const auto rows = scenario::convergence_study(
          cfg, parse_ints(p_list), parse_ints(n_list), t_eval, ref_p, ref_n);
      std::filesystem::create_directories(out_dir);
      const auto path = std::filesystem::path(out_dir) / "convergence.csv";
      scenario::write_convergence_csv(rows, path);
      std::cout << "p,n,err_l2,rate\n";
      for (const auto& r : rows)
        std::cout << r.p << "," << r.n << "," << r.err << "," << r.rate << "\n";
      std::cout << "wrote " << path.string() << "\n";
      return 0;
    }
  } catch (const scenario::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const solver::SolverError& e) {
    std::cerr << "solver failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
