#pragma once

// Intersection engine and stage controller. The attack sees pseudonyms only;
// ground truth reaches it solely through the ValidationChannel, which stands
// in for the out-of-band record kept by the experimenter.

#include <introsim/common.hpp>
#include <introsim/observer.hpp>

#include <algorithm>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace introsim {

enum class StageStatus : std::uint8_t {
  running,
  converged,
  empty_failure,
  budget_exhausted,
  misidentified,      // singleton reached, but not the true successor
  lifetime_exceeded,  // the intro circuit's lifetime ran out mid-attack
};

inline std::string_view to_string(StageStatus s) {
  switch (s) {
    case StageStatus::running: return "running";
    case StageStatus::converged: return "converged";
    case StageStatus::empty_failure: return "empty_failure";
    case StageStatus::budget_exhausted: return "budget_exhausted";
    case StageStatus::misidentified: return "misidentified";
    case StageStatus::lifetime_exceeded: return "lifetime_exceeded";
  }
  return "?";
}

inline std::optional<StageStatus> stage_status_from_string(std::string_view s) {
  for (auto st : {StageStatus::running, StageStatus::converged, StageStatus::empty_failure,
                  StageStatus::budget_exhausted, StageStatus::misidentified, StageStatus::lifetime_exceeded})
    if (to_string(st) == s) return st;
  return std::nullopt;
}

struct IntersectionState {
  int stage = 1;
  int trials_done = 0;
  PseudonymSet current;
  PseudonymSet excluded;  // hops already known: the intro point and earlier identifications
  StageStatus status = StageStatus::running;

  std::optional<Pseudonym> identified() const {
    if (status != StageStatus::converged || current.size() != 1) return std::nullopt;
    return *current.begin();
  }
};

// I_1 = A_1 \ excluded; I_t = I_{t-1} ∩ (A_t \ excluded).
inline IntersectionState intersect_step(IntersectionState state, const AnonymitySet& observed) {
  if (observed.stage != state.stage) throw UsageError("anonymity set belongs to a different stage");
  if (state.status != StageStatus::running) throw UsageError("intersection already terminated");
  if (state.trials_done == 0) {
    for (const auto& p : observed.members)
      if (!state.excluded.contains(p)) state.current.insert(p);
  } else {
    std::erase_if(state.current, [&](const Pseudonym& p) {
      return !observed.members.contains(p) || state.excluded.contains(p);
    });
  }
  ++state.trials_done;
  if (state.current.size() == 1) {
    state.status = StageStatus::converged;
  } else if (state.current.empty()) {
    state.status = StageStatus::empty_failure;
  }
  return state;
}

struct TrialRecord {
  int stage = 1;
  int trial = 1;
  std::size_t anonymity_set_size = 0;
  std::size_t intersection_size = 0;
  StageStatus status = StageStatus::running;
  SimTime virtual_time{};
};

struct StageResult {
  int stage = 1;
  std::optional<int> trials_to_convergence;
  std::optional<Pseudonym> identified;
  StageStatus status = StageStatus::running;
  Duration elapsed{};
  int trials_used = 0;
  int discarded_trials = 0;  // failed handshakes and empty windows
  std::vector<TrialRecord> trace;
};

struct AttackConfig {
  Duration inter_trial_delay = std::chrono::seconds(30);
  int trial_budget = 500;
  int stages = 4;
  std::optional<Duration> mitigation_rebuild_interval;
  // Bound on consecutive attempts that produce no usable window.
  int max_discarded_per_stage = 2000;

  void validate() const {
    if (inter_trial_delay <= Duration::zero()) throw UsageError("attack.inter_trial_delay must be positive");
    if (trial_budget < 1) throw UsageError("attack.trial_budget must be at least 1");
    if (stages < 1 || stages > 4) throw UsageError("attack.stages must be between 1 and 4");
    if (mitigation_rebuild_interval && *mitigation_rebuild_interval <= Duration::zero())
      throw UsageError("attack.mitigation_rebuild_interval must be positive");
  }
};

enum class ProbeStatus : std::uint8_t { ok, handshake_failed, lifetime_exceeded };

struct ProbeResult {
  ProbeStatus status = ProbeStatus::ok;
  AnonymitySet set;
};

// What the adversary can do: wait, and run one INTRODUCE1–RENDEZVOUS2 trial
// while tapping a relay it has identified.
class TrialChannel {
 public:
  virtual ~TrialChannel() = default;
  virtual SimTime now() const = 0;
  virtual void wait(Duration d) = 0;
  virtual ProbeResult probe(const Pseudonym& monitored, int stage, int trial) = 0;
};

// Out-of-band ground truth. Never consulted to steer the intersection.
class ValidationChannel {
 public:
  virtual ~ValidationChannel() = default;
  virtual bool verify(int stage, const Pseudonym& identified) = 0;
  virtual void record_trial(int /*stage*/, const AnonymitySet& /*set*/, const IntersectionState& /*state*/) {}
};

inline StageResult run_stage(int stage, const Pseudonym& monitored, const PseudonymSet& excluded,
                             const AttackConfig& config, TrialChannel& channel, ValidationChannel* validation) {
  config.validate();
  StageResult result;
  result.stage = stage;
  IntersectionState state;
  state.stage = stage;
  state.excluded = excluded;
  const SimTime start = channel.now();

  bool first = true;
  while (state.status == StageStatus::running) {
    if (state.trials_done >= config.trial_budget || result.discarded_trials >= config.max_discarded_per_stage) {
      state.status = StageStatus::budget_exhausted;
      break;
    }
    if (!first) channel.wait(config.inter_trial_delay);
    first = false;

    ProbeResult probe = channel.probe(monitored, stage, state.trials_done + 1);
    if (probe.status == ProbeStatus::lifetime_exceeded) {
      state.status = StageStatus::lifetime_exceeded;
      break;
    }
    // Only completed INTRODUCE1–RENDEZVOUS2 pairs define a window, and a
    // window that captured nothing cannot contain the successor.
    if (probe.status == ProbeStatus::handshake_failed || probe.set.members.empty()) {
      ++result.discarded_trials;
      continue;
    }
    state = intersect_step(std::move(state), probe.set);
    if (validation) validation->record_trial(stage, probe.set, state);
    result.trace.push_back(TrialRecord{stage, state.trials_done, probe.set.size(), state.current.size(),
                                       state.status, channel.now()});
  }

  result.trials_used = state.trials_done;
  if (state.status == StageStatus::converged) {
    const Pseudonym found = *state.current.begin();
    if (validation && !validation->verify(stage, found)) {
      state.status = StageStatus::misidentified;
    } else {
      result.identified = found;
      result.trials_to_convergence = state.trials_done;
    }
  }
  result.status = state.status;
  if (!result.trace.empty()) result.trace.back().status = state.status;
  result.elapsed = channel.now() - start;
  return result;
}

// Stage k taps hop k (IP, M1, M0, EG) and resolves its successor (M1, M0, EG,
// service). Each identification joins the excluded set for later stages.
inline std::vector<StageResult> run_full_attack(const Pseudonym& intro_point, const AttackConfig& config,
                                                TrialChannel& channel, ValidationChannel& validation) {
  config.validate();
  std::vector<StageResult> results;
  PseudonymSet known{intro_point};
  Pseudonym monitored = intro_point;
  for (int k = 1; k <= config.stages; ++k) {
    if (k > 1) channel.wait(config.inter_trial_delay);
    results.push_back(run_stage(k, monitored, known, config, channel, &validation));
    const StageResult& r = results.back();
    if (r.status != StageStatus::converged) break;
    monitored = *r.identified;
    known.insert(*r.identified);
  }
  return results;
}

inline bool fully_reconstructed(std::span<const StageResult> stages, int expected = 4) {
  return static_cast<int>(stages.size()) == expected &&
         std::all_of(stages.begin(), stages.end(),
                     [](const StageResult& s) { return s.status == StageStatus::converged; });
}

// Matched mitigated/unmitigated attack pairs on identical seeds.
struct AttackOutcome {
  std::vector<StageResult> stages;
  std::size_t internal_rebuilds = 0;
  Duration elapsed{};
};

struct MitigationPair {
  std::uint64_t seed = 0;
  AttackOutcome baseline;
  AttackOutcome mitigated;
};

struct MitigationReport {
  Duration rebuild_interval{};
  std::vector<MitigationPair> pairs;
  std::vector<double> baseline_stage_convergence;   // per stage, fraction of seeds
  std::vector<double> mitigated_stage_convergence;
  double baseline_full_rate = 0.0;
  double mitigated_full_rate = 0.0;
  double baseline_mean_trials = 0.0;   // trials spent per run, all stages
  double mitigated_mean_trials = 0.0;
  double builds_per_hour = 0.0;        // internal-circuit builds per intro point
  double observed_builds_per_hour = 0.0;
};

inline std::size_t internal_builds(Duration rebuild_interval, Duration horizon) {
  if (rebuild_interval <= Duration::zero()) throw UsageError("rebuild interval must be positive");
  return static_cast<std::size_t>(horizon / rebuild_interval);
}

// `runner(seed, interval)` runs one full attack; interval == nullopt means the
// unmitigated baseline.
template <typename Runner>
MitigationReport evaluate_mitigation(Duration rebuild_interval, std::span<const std::uint64_t> seeds, Runner&& runner,
                                     int stages = 4) {
  if (rebuild_interval <= Duration::zero()) throw UsageError("rebuild interval must be positive");
  MitigationReport report;
  report.rebuild_interval = rebuild_interval;
  const bool infinite = rebuild_interval == Duration::max();
  report.builds_per_hour = infinite ? 0.0 : 3600.0 / to_seconds(rebuild_interval);
  report.baseline_stage_convergence.assign(static_cast<std::size_t>(stages), 0.0);
  report.mitigated_stage_convergence.assign(static_cast<std::size_t>(stages), 0.0);

  double rebuilds = 0.0;
  double hours = 0.0;
  for (std::uint64_t seed : seeds) {
    MitigationPair pair{seed, runner(seed, std::optional<Duration>{}),
                        runner(seed, infinite ? std::optional<Duration>{} : std::optional<Duration>{rebuild_interval})};
    auto tally = [&](const AttackOutcome& o, std::vector<double>& per_stage, double& full, double& trials) {
      for (const auto& s : o.stages) {
        if (s.status == StageStatus::converged && s.stage >= 1 && s.stage <= stages)
          per_stage[static_cast<std::size_t>(s.stage - 1)] += 1.0;
        trials += s.trials_used;
      }
      if (fully_reconstructed(o.stages, stages)) full += 1.0;
    };
    tally(pair.baseline, report.baseline_stage_convergence, report.baseline_full_rate, report.baseline_mean_trials);
    tally(pair.mitigated, report.mitigated_stage_convergence, report.mitigated_full_rate,
          report.mitigated_mean_trials);
    rebuilds += static_cast<double>(pair.mitigated.internal_rebuilds);
    hours += to_seconds(pair.mitigated.elapsed) / 3600.0;
    report.pairs.push_back(std::move(pair));
  }
  const double n = seeds.empty() ? 1.0 : static_cast<double>(seeds.size());
  for (auto& v : report.baseline_stage_convergence) v /= n;
  for (auto& v : report.mitigated_stage_convergence) v /= n;
  report.baseline_full_rate /= n;
  report.mitigated_full_rate /= n;
  report.baseline_mean_trials /= n;
  report.mitigated_mean_trials /= n;
  report.observed_builds_per_hour = hours > 0.0 ? rebuilds / hours : 0.0;
  return report;
}

}  // namespace introsim
