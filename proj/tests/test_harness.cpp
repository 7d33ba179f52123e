#include "support.hpp"

#include <introsim/harness.hpp>

#include <gtest/gtest.h>

#include <filesystem>

using namespace introsim;

namespace {

std::string fixture(const std::string& name) { return std::string(INTROSIM_FIXTURE_DIR) + "/" + name; }

std::string usage_message(const nlohmann::json& doc) {
  try {
    parse_experiment_config(doc);
  } catch (const UsageError& e) {
    return e.what();
  }
  return {};
}

ExperimentConfig small_config(std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.seed = seed;
  cfg.network.relay_count = 60;
  cfg.network.circuit_population = 400;
  cfg.attack.trial_budget = 200;
  return cfg;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("introsim_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST(Config, DeskFixtureLoads) {
  const auto cfg = load_experiment_config(fixture("desk.json"));
  EXPECT_EQ(cfg.seed, 1u);
  EXPECT_EQ(cfg.network.relay_count, 300u);
  EXPECT_EQ(cfg.attack.inter_trial_delay, std::chrono::seconds(30));
  EXPECT_FALSE(cfg.attack.mitigation_rebuild_interval);
  EXPECT_EQ(cfg.report_dir, "reports");
}

TEST(Config, PartialDocumentKeepsDefaults) {
  const auto cfg = load_experiment_config(fixture("small.json"));
  EXPECT_EQ(cfg.network.relay_count, 60u);
  EXPECT_DOUBLE_EQ(cfg.network.intensity, kDefaultIntensity);
  EXPECT_EQ(cfg.attack.stages, 4);
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_NE(usage_message({{"network", {{"relay_count", 5}}}}).find("network.relay_count"), std::string::npos);
  EXPECT_NE(usage_message({{"network", {{"intensity", "high"}}}}).find("network.intensity"), std::string::npos);
  EXPECT_NE(usage_message({{"attack", {{"trial_budget", 0}}}}).find("attack.trial_budget"), std::string::npos);
  EXPECT_NE(usage_message({{"attack", {{"mitigation_rebuild_interval_s", -5}}}}).find("mitigation_rebuild_interval"),
            std::string::npos);
  EXPECT_NE(usage_message({{"scenario", {{"time_of_day_hours", 25}}}}).find("scenario.time_of_day_hours"),
            std::string::npos);
  EXPECT_NE(usage_message({{"scenario", {{"planted_weights", {{"M0", 0}}}}}}).find("planted_weights.M0"),
            std::string::npos);
  EXPECT_NE(usage_message({{"network", {{"diurnal_profile", {{"10:00", -1}}}}}}).find("diurnal_profile"),
            std::string::npos);
}

TEST(Config, UnknownKeyRejected) {
  EXPECT_NE(usage_message({{"network", {{"relays", 100}}}}).find("network.relays"), std::string::npos);
  EXPECT_NE(usage_message({{"bogus", 1}}).find("bogus"), std::string::npos);
}

TEST(Config, BadFileIsFileError) {
  EXPECT_THROW(load_experiment_config(fixture("does_not_exist.json")), FileError);
  EXPECT_THROW(load_experiment_config(fixture("trace_clean.csv")), UsageError);
  EXPECT_THROW(load_experiment_config(fixture("bad_relay_count.json")), UsageError);
}

TEST(Config, NullMitigationMeansOffAndNumberMeansOn) {
  EXPECT_FALSE(parse_experiment_config({{"attack", {{"mitigation_rebuild_interval_s", nullptr}}}})
                   .attack.mitigation_rebuild_interval);
  EXPECT_EQ(parse_experiment_config({{"attack", {{"mitigation_rebuild_interval_s", 600}}}})
                .attack.mitigation_rebuild_interval,
            std::chrono::minutes(10));
}

TEST(PlantedNetwork, PlantedHopsAreDistinctGuards) {
  ExperimentConfig cfg;
  const auto net = build_planted_network(cfg);
  EXPECT_EQ(net.snapshot.size(), cfg.network.relay_count);
  std::set<std::string> addrs;
  for (PlantedHop h : kPlantedHops) {
    const Relay& r = net.snapshot.at(net.planted[static_cast<std::size_t>(h)]);
    EXPECT_TRUE(r.flags.has(RelayFlag::Guard));
    EXPECT_GE(r.consensus_weight, kPlantedWeightMin);
    EXPECT_LE(r.consensus_weight, kPlantedWeightMax);
    addrs.insert(r.address);
  }
  EXPECT_EQ(addrs.size(), 4u);
}

TEST(PlantedNetwork, FixedWeightsAndColocation) {
  ExperimentConfig cfg;
  cfg.scenario.planted_weights = {9300, 4000, std::nullopt, std::nullopt};
  cfg.scenario.colocate_m1_m0 = true;
  const auto net = build_planted_network(cfg);
  auto at = [&](PlantedHop h) -> const Relay& { return net.snapshot.at(net.planted[static_cast<std::size_t>(h)]); };
  EXPECT_EQ(at(PlantedHop::entry_guard).consensus_weight, 9300u);
  EXPECT_EQ(at(PlantedHop::vanguard).consensus_weight, 4000u);
  EXPECT_EQ(at(PlantedHop::vanguard).address, at(PlantedHop::middle1).address);
  EXPECT_NE(at(PlantedHop::entry_guard).address, at(PlantedHop::middle1).address);
}

TEST(PlantedNetwork, FixtureSnapshotIsUsedWhenConfigured) {
  ExperimentConfig cfg;
  cfg.scenario.consensus_fixture = fixture("consensus_100.json");
  const auto net = build_planted_network(cfg);
  EXPECT_EQ(net.snapshot.size(), 104u);
  EXPECT_FALSE(net.snapshot.uses_probability_fields(Role::guard));
}

TEST(PlantedHopLabels, StageMapping) {
  EXPECT_EQ(monitored_hop(1), PlantedHop::intro_point);
  EXPECT_EQ(monitored_hop(2), PlantedHop::middle1);
  EXPECT_EQ(monitored_hop(4), PlantedHop::entry_guard);
  EXPECT_EQ(stage_of(PlantedHop::vanguard), 3);
  EXPECT_EQ(label(PlantedHop::vanguard), "M0");
  EXPECT_THROW(monitored_hop(5), UsageError);
}

TEST(Simulate, SameSeedGivesByteIdenticalReports) {
  const ExperimentConfig cfg = small_config(1);
  const auto a = simulate(cfg);
  const auto b = simulate(cfg);
  EXPECT_EQ(format_trials_per_hop(a), format_trials_per_hop(b));
  EXPECT_EQ(format_trace(a.trace()), format_trace(b.trace()));
  EXPECT_EQ(a.concentration_csv, b.concentration_csv);

  const auto dir = scratch_dir("identical");
  write_reports(a, dir / "a");
  write_reports(b, dir / "b");
  for (const char* f : {"trials_per_hop.csv", "trace.csv", "concentration.csv"})
    EXPECT_EQ(read_text_file(dir / "a" / f), read_text_file(dir / "b" / f)) << f;
  std::filesystem::remove_all(dir);
}

TEST(Simulate, NoiselessRunReportsOneTrialPerHop) {
  ExperimentConfig cfg = small_config(2);
  cfg.network.intensity = 0.0;
  const auto r = simulate(cfg);
  const std::string table = format_trials_per_hop(r);
  EXPECT_EQ(table.substr(0, table.find('\n')), "node,stage,trials,consensus_weight,status");
  const char* order[] = {"EG", "M0", "M1", "IP"};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(r.hops[i].node, kPlantedHops[i]);
    EXPECT_EQ(label(r.hops[i].node), order[i]);
    ASSERT_TRUE(r.hops[i].trials);
    EXPECT_EQ(*r.hops[i].trials, 1);
    EXPECT_EQ(r.hops[i].status, StageStatus::converged);
  }
  EXPECT_TRUE(r.fully_reconstructed());
}

TEST(Simulate, StagesThatDidNotRunAreMarked) {
  ExperimentConfig cfg = small_config(3);
  cfg.network.intensity = 0.0;
  cfg.attack.stages = 2;
  const auto r = simulate(cfg);
  const std::string table = format_trials_per_hop(r);
  EXPECT_NE(table.find("EG,4,,"), std::string::npos) << table;
  EXPECT_NE(table.find("not_run"), std::string::npos);
  EXPECT_TRUE(r.fully_reconstructed());
}

TEST(Simulate, TraceValidatesClean) {
  const auto r = simulate(small_config(4));
  EXPECT_TRUE(validate_trace(format_trace(r.trace())).empty());
  EXPECT_EQ(r.containment_violations(), 0u);
}

TEST(Simulate, RunExperimentWritesReportDirectory) {
  ExperimentConfig cfg = small_config(5);
  const auto dir = scratch_dir("reports");
  cfg.report_dir = dir.string();
  run_experiment(cfg);
  for (const char* f : {"trials_per_hop.csv", "trace.csv", "concentration.csv"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  std::filesystem::remove_all(dir);
}

TEST(ValidateTrace, CleanAndCorruptFixtures) {
  EXPECT_TRUE(validate_trace(read_text_file(fixture("trace_clean.csv"))).empty());
  const auto v = validate_trace(read_text_file(fixture("trace_corrupt.csv")));
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].property, "intersection_non_increasing");
  EXPECT_EQ(v[0].line, 4u);
}

TEST(ValidateTrace, StructuralProblems) {
  EXPECT_EQ(validate_trace("wrong,header\n").at(0).property, "header");
  const std::string head = std::string(kTraceHeader) + "\n";
  EXPECT_EQ(validate_trace(head + "1,1,3\n").at(0).property, "well_formed_row");
  EXPECT_EQ(validate_trace(head + "1,1,3,2,sideways,1.0\n").at(0).property, "well_formed_row");
  EXPECT_EQ(validate_trace(head + "1,1,3,5,running,1.0\n").at(0).property,
            "intersection_within_first_anonymity_set");
  // A new stage may start larger than the previous one ended.
  EXPECT_TRUE(validate_trace(head + "1,1,3,1,converged,1.0\n2,1,9,9,running,2.0\n").empty());
}

TEST(Statistics, MedianAndRanks) {
  EXPECT_FALSE(median({}));
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 3, 2}), 2.5);
  EXPECT_EQ(average_ranks({10, 20, 20, 5}), (std::vector<double>{2, 3.5, 3.5, 1}));
  EXPECT_NEAR(*spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0, 1e-12);
  EXPECT_NEAR(*spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0, 1e-12);
  EXPECT_FALSE(spearman({1, 1, 1}, {1, 2, 3}));
  EXPECT_FALSE(spearman({1}, {1}));
}

TEST(Sweep, AxisParsingAndApplication) {
  EXPECT_EQ(sweep_axis_from_string("intensity"), SweepAxis::intensity);
  EXPECT_FALSE(sweep_axis_from_string("weather"));
  ExperimentConfig base;
  EXPECT_EQ(apply_axis(base, SweepAxis::consensus_weight, 4000).scenario.planted_weights[2], 4000u);
  EXPECT_FALSE(apply_axis(base, SweepAxis::mitigation_interval, 0).attack.mitigation_rebuild_interval);
  EXPECT_EQ(apply_axis(base, SweepAxis::mitigation_interval, 300).attack.mitigation_rebuild_interval,
            std::chrono::minutes(5));
  EXPECT_THROW(apply_axis(base, SweepAxis::time_of_day, 30), UsageError);
  EXPECT_THROW(apply_axis(base, SweepAxis::consensus_weight, 0), UsageError);
}

TEST(Sweep, BookkeepingCoversEveryValueSeedPair) {
  ExperimentConfig base = small_config(1);
  base.network.intensity = 0.0;
  const std::vector<double> values{2, 10, 18};
  std::vector<std::uint64_t> seeds(10);
  std::iota(seeds.begin(), seeds.end(), 100);
  const auto rep = run_sweep(base, SweepAxis::time_of_day, values, seeds, 1);
  ASSERT_EQ(rep.runs.size(), 30u);
  ASSERT_EQ(rep.groups.size(), 3u);
  for (const auto& g : rep.groups) {
    EXPECT_EQ(g.runs, 10u);
    EXPECT_EQ(g.fully_reconstructed, 10u);
    EXPECT_EQ(g.median_trials_all, 1.0);
  }
  std::set<std::pair<double, std::uint64_t>> pairs;
  for (const auto& r : rep.runs) pairs.emplace(r.value, r.seed);
  EXPECT_EQ(pairs.size(), 30u);
  // Noiseless runs all take one trial, so trials carry no rank information.
  EXPECT_FALSE(rep.spearman_trials_vs_weight);
}

TEST(Sweep, BusierNetworkNeedsMoreTrials) {
  const std::vector<double> values{0.0, 3.0};
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  const auto rep = run_sweep(small_config(1), SweepAxis::intensity, values, seeds, 1);
  ASSERT_EQ(rep.groups.size(), 2u);
  ASSERT_TRUE(rep.groups[0].median_trials_all);
  ASSERT_TRUE(rep.groups[1].median_trials_all);
  EXPECT_EQ(*rep.groups[0].median_trials_all, 1.0);
  EXPECT_GT(*rep.groups[1].median_trials_all, 1.0);
}

TEST(Sweep, HeavierPlantedRelaysNeedMoreTrials) {
  ExperimentConfig base;
  std::vector<std::uint64_t> seeds(8);
  std::iota(seeds.begin(), seeds.end(), 1);
  const auto rep = run_sweep(base, SweepAxis::consensus_weight, {4000, 9300}, seeds, 1);
  ASSERT_TRUE(rep.groups[0].median_trials_all);
  ASSERT_TRUE(rep.groups[1].median_trials_all);
  EXPECT_LT(*rep.groups[0].median_trials_all, *rep.groups[1].median_trials_all);
}

TEST(Sweep, TrialsDoNotFallAsIntensityRises) {
  ExperimentConfig base;
  std::vector<std::uint64_t> seeds(6);
  std::iota(seeds.begin(), seeds.end(), 1);
  const auto rep = run_sweep(base, SweepAxis::intensity, {0.0, 1.0, 3.0, 6.0}, seeds, 1);
  for (std::size_t i = 1; i < rep.groups.size(); ++i) {
    ASSERT_TRUE(rep.groups[i].median_trials_all);
    EXPECT_GE(*rep.groups[i].median_trials_all, *rep.groups[i - 1].median_trials_all) << "value " << rep.groups[i].value;
  }
}

TEST(Sweep, ParallelAndSerialRunsAgree) {
  const std::vector<double> values{3.0};
  const std::vector<std::uint64_t> seeds{7, 8, 9};
  const auto serial = run_sweep(small_config(1), SweepAxis::intensity, values, seeds, 1);
  const auto parallel = run_sweep(small_config(1), SweepAxis::intensity, values, seeds, 3);
  EXPECT_EQ(format_sweep_runs(serial), format_sweep_runs(parallel));
}

TEST(Sweep, WritesThreeReports) {
  ExperimentConfig base = small_config(1);
  base.network.intensity = 0.0;
  const auto rep = run_sweep(base, SweepAxis::intensity, {0.0}, std::vector<std::uint64_t>{1}, 1);
  const auto dir = scratch_dir("sweep");
  write_sweep_reports(rep, dir);
  for (const char* f : {"sweep_runs.csv", "sweep_summary.csv", "sweep_correlation.csv"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  std::filesystem::remove_all(dir);
}

TEST(TrialsWeightCorrelation, PoolsConvergedHopsOnly) {
  std::array<HopRow, 4> run{};
  const std::uint64_t weights[] = {1000, 2000, 3000, 4000};
  for (std::size_t i = 0; i < 4; ++i) {
    run[i].node = kPlantedHops[i];
    run[i].consensus_weight = weights[i];
    run[i].trials = static_cast<int>(i + 2);
    run[i].status = StageStatus::converged;
  }
  run[3].status = StageStatus::budget_exhausted;
  const std::vector<std::array<HopRow, 4>> runs{run};
  std::size_t pairs = 0;
  const auto rho = trials_weight_correlation(runs, &pairs);
  EXPECT_EQ(pairs, 3u);
  ASSERT_TRUE(rho);
  EXPECT_NEAR(*rho, 1.0, 1e-12);
}
