// Command-line front end: simulate, sweep, concentration, validate.

#include <introsim/harness.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

using namespace introsim;

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct CommonOptions {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("--seed", opts.seed, "Run seed (overrides the config file)");
  cmd->add_option("--config", opts.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--out", opts.out, "Report directory");
}

ExperimentConfig resolve_config(const CommonOptions& opts) {
  ExperimentConfig cfg = opts.config.empty() ? ExperimentConfig{} : load_experiment_config(opts.config);
  if (opts.seed) cfg.seed = *opts.seed;
  if (!opts.out.empty()) cfg.report_dir = opts.out;
  cfg.validate();
  return cfg;
}

int cmd_simulate(const CommonOptions& opts) {
  const ExperimentConfig cfg = resolve_config(opts);
  const RunReport r = run_experiment(cfg);
  std::cout << format_trials_per_hop(r);
  std::cout << "# seed " << cfg.seed << ", virtual duration " << detail::fixed(to_seconds(r.elapsed), 1) << " s, "
            << (r.fully_reconstructed() ? "all hops identified" : "attack incomplete") << "\n";
  if (!cfg.report_dir.empty()) std::cout << "# reports written to " << cfg.report_dir << "\n";
  return 0;
}

struct SweepOptions {
  std::string axis;
  std::vector<double> values;
  std::size_t seeds = 10;
  unsigned jobs = 0;
};

int cmd_sweep(const CommonOptions& opts, const SweepOptions& sw) {
  const ExperimentConfig base = resolve_config(opts);
  const auto axis = sweep_axis_from_string(sw.axis);
  if (!axis) throw UsageError("unknown sweep axis '" + sw.axis + "'");
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < sw.seeds; ++i) seeds.push_back(base.seed + i);
  const SweepReport report = run_sweep(base, *axis, sw.values, seeds, sw.jobs);
  std::cout << format_sweep_summary(report) << format_sweep_correlation(report);
  if (!base.report_dir.empty()) write_sweep_reports(report, base.report_dir);
  return 0;
}

int cmd_concentration(const CommonOptions& opts, const std::string& snapshot_path,
                      const std::vector<std::string>& set_names) {
  RelaySnapshot snapshot;
  if (!snapshot_path.empty()) {
    snapshot = parse_consensus(std::string_view(read_text_file(snapshot_path)));
  } else {
    snapshot = build_planted_network(resolve_config(opts)).snapshot;
  }
  std::vector<JurisdictionSet> sets;
  for (const auto& name : set_names) {
    auto s = JurisdictionSet::builtin(name);
    if (!s) throw UsageError("unknown jurisdiction set '" + name + "'");
    sets.push_back(*s);
  }
  std::cout << emit_set_summary(snapshot, sets);
  if (!opts.out.empty()) {
    std::filesystem::create_directories(opts.out);
    write_text_file(std::filesystem::path(opts.out) / "concentration.csv", emit_distribution_report(snapshot));
    write_text_file(std::filesystem::path(opts.out) / "concentration_sets.csv", emit_set_summary(snapshot, sets));
  }
  return 0;
}

int cmd_validate(const std::string& trace_path) {
  const auto violations = validate_trace(read_text_file(trace_path));
  if (violations.empty()) {
    std::cout << "trace ok\n";
    return 0;
  }
  for (const auto& v : violations)
    std::cerr << "violated property: " << v.property << " (line " << v.line << "): " << v.detail << "\n";
  return kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Intro-circuit intersection attack simulator"};
  app.require_subcommand(1, 1);

  CommonOptions common;

  auto* simulate = app.add_subcommand("simulate", "Run one full attack and write reports");
  add_common(simulate, common);

  SweepOptions sweep_opts;
  auto* sweep = app.add_subcommand("sweep", "Repeat the attack across an axis of values and seeds");
  add_common(sweep, common);
  sweep->add_option("--axis", sweep_opts.axis, "time_of_day | consensus_weight | intensity | mitigation_interval")
      ->required();
  sweep->add_option("--values", sweep_opts.values, "Axis values")->required()->expected(1, -1);
  sweep->add_option("--seeds", sweep_opts.seeds, "Number of consecutive seeds per value")
      ->check(CLI::PositiveNumber);
  sweep->add_option("--jobs", sweep_opts.jobs, "Concurrent runs (0 = hardware threads)");

  std::string snapshot_path;
  std::vector<std::string> set_names{"fourteen_eyes"};
  auto* concentration = app.add_subcommand("concentration", "Jurisdictional selection-probability report");
  add_common(concentration, common);
  concentration->add_option("--snapshot", snapshot_path, "Consensus snapshot (JSON)")->check(CLI::ExistingFile);
  concentration->add_option("--set", set_names, "Jurisdiction set: five_eyes | nine_eyes | fourteen_eyes");

  std::string trace_path;
  auto* validate = app.add_subcommand("validate", "Check intersection invariants over a recorded trace");
  add_common(validate, common);
  validate->add_option("--trace", trace_path, "trace.csv from a simulate run")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*simulate) return cmd_simulate(common);
    if (*sweep) return cmd_sweep(common, sweep_opts);
    if (*concentration) return cmd_concentration(common, snapshot_path, set_names);
    if (*validate) return cmd_validate(trace_path);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}
