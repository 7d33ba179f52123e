#pragma once

// Experiment orchestration: configuration, the synthetic relay network with a
// planted four-hop intro circuit, the attacker's trial channel, report files,
// parameter sweeps and trace validation.

#include <introsim/attack.hpp>
#include <introsim/common.hpp>
#include <introsim/concentration.hpp>
#include <introsim/directory.hpp>
#include <introsim/observer.hpp>
#include <introsim/pathsel.hpp>
#include <introsim/protocol.hpp>
#include <introsim/simcore.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace introsim {

class FileError : public Error {
 public:
  using Error::Error;
};

// Desk-scale defaults, calibrated so that an unmitigated attack converges in a
// few dozen trials per stage and heavier relays need more of them.
inline constexpr double kDefaultIntensity = 3.0;
inline constexpr double kDefaultPersistentFraction = 0.2;
inline constexpr double kDefaultSecondLayerFraction = 0.1;
inline constexpr std::uint64_t kPlantedWeightMin = 800;
inline constexpr std::uint64_t kPlantedWeightMax = 10000;
inline constexpr std::uint64_t kSyntheticWeightCap = 20000;

struct NetworkConfig {
  std::size_t relay_count = 300;
  std::size_t circuit_population = 3000;
  double intensity = kDefaultIntensity;  // flows per second per circuit hop
  DiurnalProfile diurnal;
  double persistent_fraction = kDefaultPersistentFraction;   // slots with a pinned guard
  double second_layer_fraction = kDefaultSecondLayerFraction;  // of those, also a pinned second hop
};

// Planted intro-circuit hops, service outward.
enum class PlantedHop : std::uint8_t { entry_guard, vanguard, middle1, intro_point };

inline constexpr std::array<PlantedHop, 4> kPlantedHops{PlantedHop::entry_guard, PlantedHop::vanguard,
                                                       PlantedHop::middle1, PlantedHop::intro_point};

inline std::string_view label(PlantedHop h) {
  switch (h) {
    case PlantedHop::entry_guard: return "EG";
    case PlantedHop::vanguard: return "M0";
    case PlantedHop::middle1: return "M1";
    case PlantedHop::intro_point: return "IP";
  }
  return "?";
}

// Stage k monitors IP, M1, M0, EG in turn.
inline PlantedHop monitored_hop(int stage) {
  switch (stage) {
    case 1: return PlantedHop::intro_point;
    case 2: return PlantedHop::middle1;
    case 3: return PlantedHop::vanguard;
    case 4: return PlantedHop::entry_guard;
  }
  throw UsageError("stage must be between 1 and 4");
}

inline int stage_of(PlantedHop h) {
  for (int k = 1; k <= 4; ++k)
    if (monitored_hop(k) == h) return k;
  return 0;
}

struct ScenarioConfig {
  double time_of_day_hours = 10.0;
  std::optional<std::string> consensus_fixture;
  bool colocate_m1_m0 = false;
  std::array<std::optional<std::uint64_t>, 4> planted_weights{};  // indexed by PlantedHop
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  NetworkConfig network;
  AttackConfig attack;
  ScenarioConfig scenario;
  std::string report_dir;

  void validate() const {
    if (network.relay_count < 8) throw UsageError("network.relay_count must be at least 8");
    if (!(network.intensity >= 0.0) || !std::isfinite(network.intensity))
      throw UsageError("network.intensity must be a finite nonnegative number");
    if (!(network.persistent_fraction >= 0.0 && network.persistent_fraction <= 1.0))
      throw UsageError("network.persistent_fraction must lie in [0,1]");
    if (!(network.second_layer_fraction >= 0.0 && network.second_layer_fraction <= 1.0))
      throw UsageError("network.second_layer_fraction must lie in [0,1]");
    try {
      network.diurnal.validate();
    } catch (const UsageError&) {
      throw UsageError("network.diurnal_profile multipliers must be positive");
    }
    if (!(scenario.time_of_day_hours >= 0.0 && scenario.time_of_day_hours < 24.0))
      throw UsageError("scenario.time_of_day_hours must lie in [0,24)");
    for (PlantedHop h : kPlantedHops) {
      const auto& w = scenario.planted_weights[static_cast<std::size_t>(h)];
      if (w && *w == 0)
        throw UsageError("scenario.planted_weights." + std::string(label(h)) + " must be positive");
    }
    attack.validate();
  }
};

namespace detail {

// Walks a JSON object, reporting type errors and unknown keys by dotted path.
class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& obj, std::string path) : obj_(&obj), path_(std::move(path)) {
    if (!obj.is_object()) throw UsageError("config field '" + where("") + "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = obj_->find(key);
    if (it == obj_->end() || it->is_null()) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) fail(key, "expected true or false");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) fail(key, "expected a string");
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!it->is_number_unsigned()) fail(key, "expected a nonnegative integer");
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_integer()) fail(key, "expected an integer");
    } else {
      if (!it->is_number()) fail(key, "expected a number");
    }
    out = it->get<T>();
  }

  template <typename T>
  void read(const char* key, std::optional<T>& out) {
    T value{};
    if (has(key)) {
      read(key, value);
      out = value;
    } else {
      seen_.insert(key);
    }
  }

  void read_seconds(const char* key, Duration& out) {
    double s = to_seconds(out);
    read(key, s);
    if (!(s > 0.0) || !std::isfinite(s)) fail(key, "must be a positive number of seconds");
    out = from_seconds(s);
  }

  void mark(const char* key) { seen_.insert(key); }

  bool has(const char* key) const {
    auto it = obj_->find(key);
    return it != obj_->end() && !it->is_null();
  }

  std::optional<ConfigReader> child(const char* key) {
    seen_.insert(key);
    if (!has(key)) return std::nullopt;
    return ConfigReader(obj_->at(key), where(key));
  }

  void finish() const {
    for (const auto& [k, v] : obj_->items())
      if (!seen_.contains(k)) throw UsageError("config field '" + where(k) + "' is not recognised");
  }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw UsageError("config field '" + where(key) + "': " + what);
  }

 private:
  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  const nlohmann::json* obj_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& doc) {
  ExperimentConfig cfg;
  detail::ConfigReader root(doc, "");
  root.read("seed", cfg.seed);

  if (auto net = root.child("network")) {
    net->read("relay_count", cfg.network.relay_count);
    net->read("circuit_population", cfg.network.circuit_population);
    net->read("intensity", cfg.network.intensity);
    net->read("persistent_fraction", cfg.network.persistent_fraction);
    net->read("second_layer_fraction", cfg.network.second_layer_fraction);
    if (auto d = net->child("diurnal_profile")) {
      d->read("02:00", cfg.network.diurnal.at_0200);
      d->read("10:00", cfg.network.diurnal.at_1000);
      d->read("18:00", cfg.network.diurnal.at_1800);
      d->finish();
    }
    net->finish();
  }

  if (auto atk = root.child("attack")) {
    atk->read_seconds("inter_trial_delay_s", cfg.attack.inter_trial_delay);
    atk->read("trial_budget", cfg.attack.trial_budget);
    atk->read("stages", cfg.attack.stages);
    atk->read("max_discarded_per_stage", cfg.attack.max_discarded_per_stage);
    if (atk->has("mitigation_rebuild_interval_s")) {
      Duration d = std::chrono::minutes(10);
      atk->read_seconds("mitigation_rebuild_interval_s", d);
      cfg.attack.mitigation_rebuild_interval = d;
    } else {
      atk->mark("mitigation_rebuild_interval_s");
    }
    atk->finish();
  }

  if (auto sc = root.child("scenario")) {
    sc->read("time_of_day_hours", cfg.scenario.time_of_day_hours);
    sc->read("consensus_fixture", cfg.scenario.consensus_fixture);
    sc->read("colocate_m1_m0", cfg.scenario.colocate_m1_m0);
    if (auto pw = sc->child("planted_weights")) {
      for (PlantedHop h : kPlantedHops) {
        const std::string key(label(h));
        pw->read(key.c_str(), cfg.scenario.planted_weights[static_cast<std::size_t>(h)]);
      }
      pw->finish();
    }
    sc->finish();
  }

  if (auto out = root.child("outputs")) {
    out->read("report_dir", cfg.report_dir);
    out->finish();
  }
  root.finish();
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot read config file " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_experiment_config(doc);
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot write " + path.string());
  out << text;
  if (!out) throw FileError("write failed for " + path.string());
}

// Independent, reproducible random streams derived from the run seed, so
// that changing one knob (say, intensity) leaves the network itself intact.
enum class Stream : std::uint64_t { network = 1, planted = 2, population = 3, simulation = 4 };

inline Rng make_stream(std::uint64_t seed, Stream s) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(s)};
  return Rng(seq);
}

inline constexpr const char* kServiceAddress = "203.0.113.7";
inline constexpr const char* kServiceOnion = "introsimtarget.onion";
inline constexpr const char* kAttackerClientAddress = "192.0.2.1";

namespace detail {

struct CountryShare {
  const char* code;
  double share;
};

// Rough shape of the public relay population by hosting country.
inline constexpr std::array<CountryShare, 16> kCountryMix{{{"DE", 0.28}, {"US", 0.19}, {"NL", 0.09}, {"FR", 0.08},
                                                           {"GB", 0.03}, {"SE", 0.03}, {"CA", 0.02}, {"CH", 0.05},
                                                           {"FI", 0.04}, {"RO", 0.03}, {"AT", 0.03}, {"PL", 0.02},
                                                           {"RU", 0.03}, {"LU", 0.03}, {"NO", 0.02}, {"IT", 0.03}}};

inline std::string synthetic_address(std::size_t i) {
  return "10." + std::to_string((i >> 16) & 0xff) + "." + std::to_string((i >> 8) & 0xff) + "." +
         std::to_string(i & 0xff);
}

}  // namespace detail

// Log-normal consensus weights (capped), a fixed country mix, ~40% guard-flagged.
inline std::vector<Relay> synthetic_relays(std::size_t count, Rng& rng) {
  std::lognormal_distribution<double> weight(std::log(2500.0), 0.8);
  std::vector<double> shares;
  for (const auto& c : detail::kCountryMix) shares.push_back(c.share);
  std::discrete_distribution<std::size_t> country(shares.begin(), shares.end());
  std::bernoulli_distribution guard(0.4);
  std::bernoulli_distribution exit(0.2);

  std::vector<Relay> relays;
  relays.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Relay r;
    r.id = "relay" + std::to_string(i);
    r.address = detail::synthetic_address(i + 1);
    r.country = detail::kCountryMix[country(rng)].code;
    r.consensus_weight = std::clamp<std::uint64_t>(static_cast<std::uint64_t>(std::llround(weight(rng))), 1, kSyntheticWeightCap);
    r.flags = {RelayFlag::Running, RelayFlag::Valid, RelayFlag::Fast, RelayFlag::V2Dir};
    if (guard(rng)) {
      r.flags.insert(RelayFlag::Guard);
      r.flags.insert(RelayFlag::Stable);
    }
    if (exit(rng)) r.flags.insert(RelayFlag::Exit);
    relays.push_back(std::move(r));
  }
  return relays;
}

inline std::uint64_t log_uniform_weight(Rng& rng, std::uint64_t lo, std::uint64_t hi) {
  const double x = uniform_real(rng, std::log(static_cast<double>(lo)), std::log(static_cast<double>(hi)));
  return static_cast<std::uint64_t>(std::llround(std::exp(x)));
}

// Builds the run's snapshot: synthetic or fixture relays plus the four
// planted relays. Selection always follows consensus weights here, so
// precomputed probability fields from a fixture are dropped.
struct PlantedNetwork {
  RelaySnapshot snapshot;
  std::array<RelayIndex, 4> planted{};  // indexed by PlantedHop
};

inline PlantedNetwork build_planted_network(const ExperimentConfig& cfg) {
  std::vector<Relay> relays;
  if (cfg.scenario.consensus_fixture) {
    const RelaySnapshot fixture = parse_consensus(std::string_view(read_text_file(*cfg.scenario.consensus_fixture)));
    relays.assign(fixture.relays().begin(), fixture.relays().end());
    for (Relay& r : relays) {
      r.guard_probability.reset();
      r.middle_probability.reset();
    }
  } else {
    Rng rng = make_stream(cfg.seed, Stream::network);
    relays = synthetic_relays(cfg.network.relay_count - 4, rng);
  }

  Rng prng = make_stream(cfg.seed, Stream::planted);
  PlantedNetwork out;
  for (PlantedHop h : kPlantedHops) {
    const auto slot = static_cast<std::size_t>(h);
    const std::uint64_t drawn = log_uniform_weight(prng, kPlantedWeightMin, kPlantedWeightMax);
    Relay r;
    r.id = "planted-" + std::string(label(h));
    r.address = "198.51.100." + std::to_string(slot + 1);
    r.country = "DE";
    r.consensus_weight = cfg.scenario.planted_weights[slot].value_or(drawn);
    r.flags = {RelayFlag::Running, RelayFlag::Valid, RelayFlag::Fast, RelayFlag::Stable, RelayFlag::Guard,
               RelayFlag::V2Dir};
    out.planted[slot] = RelayIndex{static_cast<std::uint32_t>(relays.size())};
    relays.push_back(std::move(r));
  }
  if (cfg.scenario.colocate_m1_m0) {
    const std::string shared = "198.51.100.20";
    relays[out.planted[static_cast<std::size_t>(PlantedHop::vanguard)].value].address = shared;
    relays[out.planted[static_cast<std::size_t>(PlantedHop::middle1)].value].address = shared;
  }
  out.snapshot = RelaySnapshot(std::move(relays));
  return out;
}

// Background client circuits with staggered ages, so expiries spread evenly
// over the stream-circuit lifetime.
inline std::vector<PopulationSlot> build_population(const NetworkConfig& net, PathSelector& selector, Rng& rng,
                                                    SimTime now) {
  std::bernoulli_distribution persistent(net.persistent_fraction);
  std::bernoulli_distribution second_layer(net.second_layer_fraction);
  std::bernoulli_distribution rendezvous(0.1);
  std::vector<PopulationSlot> slots;
  slots.reserve(net.circuit_population);
  for (std::size_t i = 0; i < net.circuit_population; ++i) {
    PopulationSlot slot;
    if (persistent(rng)) {
      slot.pins.guard = selector.distribution(Role::guard).sample(rng);
      if (second_layer(rng)) {
        const RelayIndex taken[] = {*slot.pins.guard};
        slot.pins.second_layer = selector.draw(Role::middle, taken, rng);
      }
    }
    const CircuitSpec spec = rendezvous(rng) ? CircuitSpec::rendezvous() : CircuitSpec::general_stream();
    const auto age = Duration(static_cast<Duration::rep>(
        uniform_real(rng, 0.0, 1.0) * static_cast<double>(kStreamCircuitLifetime.count())));
    slot.circuit = sample_for_slot(selector, spec, slot.pins, rng, now - age);
    slots.push_back(std::move(slot));
  }
  return slots;
}

struct ContainmentCheck {
  int stage = 0;
  int trial = 0;
  bool in_anonymity_set = false;
  bool in_intersection = false;
};

// One simulated world: the network, its background population, the tap and
// the attacker's view of it. Not copyable or movable: the protocol engine
// holds pointers into it.
class AttackWorld final : public TrialChannel, public ValidationChannel {
 public:
  AttackWorld(const ExperimentConfig& cfg, std::optional<Duration> mitigation)
      : cfg_(cfg),
        network_(build_planted_network(cfg)),
        selector_(network_.snapshot),
        rng_(make_stream(cfg.seed, Stream::simulation)),
        key_(PseudonymKey::generate()),
        tap_(key_),
        intensity_(diurnal_intensity(cfg.network.intensity, cfg.scenario.time_of_day_hours, cfg.network.diurnal)) {
    ProtocolConfig pc;
    pc.trace_auxiliary_cells = intensity_ > 0.0;
    net_ = std::make_unique<OnionNetwork>(network_.snapshot, selector_, rng_, pc);
    net_->set_sink(&tap_);

    // Clock starts on day two at the configured hour, leaving room for the
    // background population's staggered creation times.
    const SimTime start = kEpoch + std::chrono::hours(24) + from_seconds(cfg.scenario.time_of_day_hours * 3600.0);
    net_->advance_to(start);
    Rng pop_rng = make_stream(cfg.seed, Stream::population);
    population_ = build_population(cfg.network, selector_, pop_rng, start);

    const IntroPins pins{hop(PlantedHop::entry_guard), hop(PlantedHop::vanguard), hop(PlantedHop::middle1),
                         hop(PlantedHop::intro_point)};
    const Circuit intro = selector_.build_intro_circuit(pins, rng_, start);
    deadline_ = intro.expires_at;
    net_->establish_intro(OnionService{kServiceOnion, kServiceAddress}, intro);
    if (mitigation) net_->enable_internal_rebuild(kServiceOnion, *mitigation);

    ip_pseudonym_ = pseudonymize(network_.snapshot.at(hop(PlantedHop::intro_point)).address, key_);
    taps_.emplace(ip_pseudonym_, hop(PlantedHop::intro_point));
  }

  AttackWorld(const AttackWorld&) = delete;
  AttackWorld& operator=(const AttackWorld&) = delete;

  const RelaySnapshot& snapshot() const { return network_.snapshot; }
  RelayIndex hop(PlantedHop h) const { return network_.planted[static_cast<std::size_t>(h)]; }
  const Pseudonym& intro_point_pseudonym() const { return ip_pseudonym_; }
  SimTime deadline() const { return deadline_; }
  double effective_intensity() const { return intensity_; }
  std::size_t internal_rebuilds() const { return net_->rebuild_count(); }
  const std::vector<ContainmentCheck>& containment() const { return containment_; }
  const std::vector<HandshakeTranscript>& transcripts() const { return transcripts_; }
  // Exposed so report audits can check that no key bytes leak into outputs.
  const PseudonymKey& key() const { return key_; }

  // TrialChannel
  SimTime now() const override { return net_->now(); }
  void wait(Duration d) override { net_->advance_to(net_->now() + d); }

  ProbeResult probe(const Pseudonym& monitored, int stage, int trial) override {
    if (now() >= deadline_) return ProbeResult{ProbeStatus::lifetime_exceeded, {}};
    auto tap_it = taps_.find(monitored);
    if (tap_it == taps_.end()) throw UsageError("no tap granted for the requested relay");
    const RelayIndex relay = tap_it->second;

    expire_and_replace(population_, now(), selector_, rng_);

    std::optional<CaptureHandle> handle;
    std::optional<AnonymitySet> captured;
    ConnectHooks hooks;
    hooks.before_introduce1 = [&](SimTime t) { handle = tap_.start_window(relay, stage, trial, t); };
    hooks.on_rendezvous2 = [&](SimTime t) {
      const TimeWindow window{tap_.window_start(*handle), t};
      emit_background_traffic(network_.snapshot, population_, intensity_, window, tap_, rng_,
                              &PopulationSlot::circuit);
      captured = tap_.stop_window(*handle, t);
      handle.reset();
    };
    hooks.on_failure = [&](SimTime) {
      if (handle) tap_.cancel_window(*handle);
      handle.reset();
    };
    const HandshakeTranscript tr = net_->client_connect(Client{kAttackerClientAddress}, kServiceOnion, hooks,
                                                        hop(PlantedHop::intro_point));
    transcripts_.push_back(tr);
    if (!tr.success || !captured) return ProbeResult{ProbeStatus::handshake_failed, {}};
    return ProbeResult{ProbeStatus::ok, std::move(*captured)};
  }

  // ValidationChannel
  bool verify(int stage, const Pseudonym& identified) override {
    const auto [addr, relay] = true_successor(stage);
    if (pseudonymize(addr, key_) != identified) return false;
    if (relay) taps_.emplace(identified, *relay);
    return true;
  }

  void record_trial(int stage, const AnonymitySet& set, const IntersectionState& state) override {
    const Pseudonym truth = pseudonymize(true_successor(stage).first, key_);
    containment_.push_back(
        ContainmentCheck{stage, state.trials_done, set.members.contains(truth), state.current.contains(truth)});
  }

 private:
  // Address (and relay, unless it is the service host) that stage k should
  // identify, read from the live intro circuit.
  std::pair<std::string, std::optional<RelayIndex>> true_successor(int stage) const {
    const Circuit& c = net_->current_intro_circuit(kServiceOnion, hop(PlantedHop::intro_point));
    std::optional<RelayIndex> r;
    switch (stage) {
      case 1: r = c.hops[intro_hop::middle1]; break;
      case 2: r = c.hops[intro_hop::vanguard]; break;
      case 3: r = c.hops[intro_hop::entry_guard]; break;
      case 4: return {kServiceAddress, std::nullopt};
      default: throw UsageError("stage must be between 1 and 4");
    }
    return {network_.snapshot.at(*r).address, r};
  }

  ExperimentConfig cfg_;
  PlantedNetwork network_;
  PathSelector selector_;
  Rng rng_;
  PseudonymKey key_;
  RelayTap tap_;
  double intensity_;
  std::unique_ptr<OnionNetwork> net_;
  std::vector<PopulationSlot> population_;
  SimTime deadline_{};
  Pseudonym ip_pseudonym_;
  std::map<Pseudonym, RelayIndex> taps_;
  std::vector<ContainmentCheck> containment_;
  std::vector<HandshakeTranscript> transcripts_;
};

struct HopRow {
  PlantedHop node = PlantedHop::entry_guard;
  int stage = 0;
  std::optional<int> trials;  // trials spent at this hop, if its stage ran
  std::uint64_t consensus_weight = 0;
  std::optional<StageStatus> status;
};

struct RunReport {
  ExperimentConfig config;
  std::vector<StageResult> stages;
  std::array<HopRow, 4> hops{};  // circuit order EG, M0, M1, IP
  std::vector<ContainmentCheck> containment;
  std::size_t internal_rebuilds = 0;
  Duration elapsed{};
  double effective_intensity = 0.0;
  std::string concentration_csv;

  bool fully_reconstructed() const { return introsim::fully_reconstructed(stages, config.attack.stages); }

  std::size_t containment_violations() const {
    std::size_t n = 0;
    for (const auto& c : containment) n += (c.in_anonymity_set && c.in_intersection) ? 0 : 1;
    return n;
  }

  std::vector<TrialRecord> trace() const {
    std::vector<TrialRecord> out;
    for (const auto& s : stages) out.insert(out.end(), s.trace.begin(), s.trace.end());
    return out;
  }
};

// Runs the attack on a world the caller built from `cfg`.
inline RunReport simulate(const ExperimentConfig& cfg, AttackWorld& world) {
  cfg.validate();
  const SimTime start = world.now();
  RunReport report;
  report.config = cfg;
  report.stages = run_full_attack(world.intro_point_pseudonym(), cfg.attack, world, world);
  report.containment = world.containment();
  report.internal_rebuilds = world.internal_rebuilds();
  report.elapsed = world.now() - start;
  report.effective_intensity = world.effective_intensity();
  report.concentration_csv = emit_distribution_report(world.snapshot());

  const std::array<PlantedHop, 4> order{PlantedHop::entry_guard, PlantedHop::vanguard, PlantedHop::middle1,
                                        PlantedHop::intro_point};
  for (std::size_t i = 0; i < order.size(); ++i) {
    HopRow& row = report.hops[i];
    row.node = order[i];
    row.stage = stage_of(order[i]);
    row.consensus_weight = world.snapshot().at(world.hop(order[i])).consensus_weight;
    for (const auto& s : report.stages) {
      if (s.stage != row.stage) continue;
      row.trials = s.trials_used;
      row.status = s.status;
    }
  }
  return report;
}

inline RunReport simulate(const ExperimentConfig& cfg) {
  cfg.validate();
  AttackWorld world(cfg, cfg.attack.mitigation_rebuild_interval);
  return simulate(cfg, world);
}

inline std::string format_trials_per_hop(const RunReport& r) {
  std::ostringstream out;
  out << "node,stage,trials,consensus_weight,status\n";
  for (const HopRow& row : r.hops) {
    out << label(row.node) << "," << row.stage << ",";
    if (row.trials) out << *row.trials;
    out << "," << row.consensus_weight << "," << (row.status ? to_string(*row.status) : "not_run") << "\n";
  }
  return out.str();
}

inline std::string format_trace(std::span<const TrialRecord> trace) {
  std::ostringstream out;
  out << "stage,trial,anonymity_set_size,intersection_size,status,virtual_time\n";
  for (const auto& t : trace)
    out << t.stage << "," << t.trial << "," << t.anonymity_set_size << "," << t.intersection_size << ","
        << to_string(t.status) << "," << detail::fixed(to_seconds(t.virtual_time)) << "\n";
  return out.str();
}

inline void write_reports(const RunReport& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FileError("cannot create report directory " + dir.string() + ": " + ec.message());
  write_text_file(dir / "trials_per_hop.csv", format_trials_per_hop(r));
  write_text_file(dir / "trace.csv", format_trace(r.trace()));
  write_text_file(dir / "concentration.csv", r.concentration_csv);
}

inline RunReport run_experiment(const ExperimentConfig& cfg) {
  RunReport r = simulate(cfg);
  if (!cfg.report_dir.empty()) write_reports(r, cfg.report_dir);
  return r;
}

// Adapter for evaluate_mitigation: one full attack per (seed, interval).
inline AttackOutcome attack_outcome(ExperimentConfig cfg, std::uint64_t seed, std::optional<Duration> interval) {
  cfg.seed = seed;
  cfg.attack.mitigation_rebuild_interval = interval;
  const RunReport r = simulate(cfg);
  return AttackOutcome{r.stages, r.internal_rebuilds, r.elapsed};
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis : std::uint8_t { time_of_day, consensus_weight, intensity, mitigation_interval };

inline std::string_view to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::time_of_day: return "time_of_day";
    case SweepAxis::consensus_weight: return "consensus_weight";
    case SweepAxis::intensity: return "intensity";
    case SweepAxis::mitigation_interval: return "mitigation_interval";
  }
  return "?";
}

inline std::optional<SweepAxis> sweep_axis_from_string(std::string_view s) {
  for (auto a : {SweepAxis::time_of_day, SweepAxis::consensus_weight, SweepAxis::intensity,
                 SweepAxis::mitigation_interval})
    if (to_string(a) == s) return a;
  return std::nullopt;
}

// consensus_weight sets every planted relay's weight; mitigation_interval is
// in seconds, with 0 meaning no mitigation.
inline ExperimentConfig apply_axis(ExperimentConfig cfg, SweepAxis axis, double value) {
  switch (axis) {
    case SweepAxis::time_of_day: cfg.scenario.time_of_day_hours = value; break;
    case SweepAxis::consensus_weight:
      if (!(value >= 1.0)) throw UsageError("consensus_weight sweep values must be at least 1");
      for (auto& w : cfg.scenario.planted_weights) w = static_cast<std::uint64_t>(std::llround(value));
      break;
    case SweepAxis::intensity: cfg.network.intensity = value; break;
    case SweepAxis::mitigation_interval:
      if (value < 0.0) throw UsageError("mitigation_interval sweep values must be nonnegative");
      if (value == 0.0) {
        cfg.attack.mitigation_rebuild_interval.reset();
      } else {
        cfg.attack.mitigation_rebuild_interval = from_seconds(value);
      }
      break;
  }
  cfg.validate();
  return cfg;
}

struct SweepRun {
  double value = 0.0;
  std::uint64_t seed = 0;
  std::array<HopRow, 4> hops{};
  bool fully_reconstructed = false;
};

struct SweepGroup {
  double value = 0.0;
  std::size_t runs = 0;
  std::size_t fully_reconstructed = 0;
  std::array<std::optional<double>, 4> median_trials{};  // converged stages only, EG..IP
  std::optional<double> median_trials_all;
};

struct SweepReport {
  SweepAxis axis = SweepAxis::intensity;
  std::vector<SweepRun> runs;
  std::vector<SweepGroup> groups;
  std::optional<double> spearman_trials_vs_weight;  // pooled over converged hops
  std::size_t correlation_pairs = 0;
};

inline std::optional<double> median(std::vector<double> v) {
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// 1-based ranks; ties share the average of the ranks they span.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

inline std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) return std::nullopt;
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

// Pools (trials, weight) over converged hop rows.
inline std::optional<double> trials_weight_correlation(std::span<const std::array<HopRow, 4>> runs,
                                                       std::size_t* pairs = nullptr) {
  std::vector<double> trials, weights;
  for (const auto& hops : runs)
    for (const HopRow& h : hops)
      if (h.status == StageStatus::converged && h.trials) {
        trials.push_back(*h.trials);
        weights.push_back(static_cast<double>(h.consensus_weight));
      }
  if (pairs) *pairs = trials.size();
  return spearman(weights, trials);
}

inline SweepReport run_sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<double>& values,
                             const std::vector<std::uint64_t>& seeds, unsigned max_parallel = 0) {
  if (values.empty()) throw UsageError("sweep needs at least one axis value");
  if (seeds.empty()) throw UsageError("sweep needs at least one seed");
  std::vector<ExperimentConfig> configs;
  for (double v : values)
    for (std::uint64_t s : seeds) {
      ExperimentConfig c = apply_axis(base, axis, v);
      c.seed = s;
      c.report_dir.clear();
      configs.push_back(std::move(c));
    }

  if (max_parallel == 0) max_parallel = std::max(1u, std::thread::hardware_concurrency());
  SweepReport report;
  report.axis = axis;
  report.runs.resize(configs.size());
  for (std::size_t begin = 0; begin < configs.size(); begin += max_parallel) {
    const std::size_t end = std::min(configs.size(), begin + max_parallel);
    std::vector<std::future<RunReport>> batch;
    for (std::size_t i = begin; i < end; ++i)
      batch.push_back(std::async(std::launch::async, [&configs, i] { return simulate(configs[i]); }));
    for (std::size_t i = begin; i < end; ++i) {
      const RunReport r = batch[i - begin].get();
      report.runs[i] = SweepRun{values[i / seeds.size()], configs[i].seed, r.hops, r.fully_reconstructed()};
    }
  }

  for (std::size_t vi = 0; vi < values.size(); ++vi) {
    SweepGroup g;
    g.value = values[vi];
    std::array<std::vector<double>, 4> per_hop;
    std::vector<double> all;
    for (std::size_t si = 0; si < seeds.size(); ++si) {
      const SweepRun& run = report.runs[vi * seeds.size() + si];
      ++g.runs;
      if (run.fully_reconstructed) ++g.fully_reconstructed;
      for (std::size_t h = 0; h < 4; ++h)
        if (run.hops[h].status == StageStatus::converged && run.hops[h].trials) {
          per_hop[h].push_back(*run.hops[h].trials);
          all.push_back(*run.hops[h].trials);
        }
    }
    for (std::size_t h = 0; h < 4; ++h) g.median_trials[h] = median(per_hop[h]);
    g.median_trials_all = median(all);
    report.groups.push_back(g);
  }

  std::vector<std::array<HopRow, 4>> hops;
  for (const auto& r : report.runs) hops.push_back(r.hops);
  report.spearman_trials_vs_weight = trials_weight_correlation(hops, &report.correlation_pairs);
  return report;
}

inline std::string format_sweep_runs(const SweepReport& s) {
  std::ostringstream out;
  out << "axis,value,seed,node,stage,trials,consensus_weight,status\n";
  for (const auto& run : s.runs)
    for (const HopRow& row : run.hops) {
      out << to_string(s.axis) << "," << detail::fixed(run.value, 3) << "," << run.seed << "," << label(row.node)
          << "," << row.stage << ",";
      if (row.trials) out << *row.trials;
      out << "," << row.consensus_weight << "," << (row.status ? to_string(*row.status) : "not_run") << "\n";
    }
  return out.str();
}

inline std::string format_sweep_summary(const SweepReport& s) {
  auto opt = [](const std::optional<double>& v) { return v ? detail::fixed(*v, 1) : std::string(); };
  std::ostringstream out;
  out << "axis,value,runs,fully_reconstructed,median_trials_EG,median_trials_M0,median_trials_M1,"
         "median_trials_IP,median_trials_all\n";
  for (const auto& g : s.groups) {
    out << to_string(s.axis) << "," << detail::fixed(g.value, 3) << "," << g.runs << "," << g.fully_reconstructed;
    for (const auto& m : g.median_trials) out << "," << opt(m);
    out << "," << opt(g.median_trials_all) << "\n";
  }
  return out.str();
}

inline std::string format_sweep_correlation(const SweepReport& s) {
  std::ostringstream out;
  out << "spearman_trials_vs_weight,pairs\n";
  if (s.spearman_trials_vs_weight) out << detail::fixed(*s.spearman_trials_vs_weight, 4);
  out << "," << s.correlation_pairs << "\n";
  return out.str();
}

inline void write_sweep_reports(const SweepReport& s, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FileError("cannot create report directory " + dir.string() + ": " + ec.message());
  write_text_file(dir / "sweep_runs.csv", format_sweep_runs(s));
  write_text_file(dir / "sweep_summary.csv", format_sweep_summary(s));
  write_text_file(dir / "sweep_correlation.csv", format_sweep_correlation(s));
}

// ---------------------------------------------------------------------------
// Trace validation

struct TraceViolation {
  std::string property;
  std::size_t line = 0;
  std::string detail;
};

inline constexpr const char* kTraceHeader = "stage,trial,anonymity_set_size,intersection_size,status,virtual_time";

// Checks a trace.csv: intersection never exceeds the first anonymity set and
// never grows within a stage.
inline std::vector<TraceViolation> validate_trace(std::string_view csv) {
  std::vector<TraceViolation> out;
  std::istringstream in{std::string(csv)};
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line) || (++lineno, line != kTraceHeader)) {
    out.push_back({"header", 1, "expected '" + std::string(kTraceHeader) + "'"});
    return out;
  }
  std::map<int, std::size_t> last_size;
  std::map<int, int> last_trial;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ls(line);
    for (std::string f; std::getline(ls, f, ',');) fields.push_back(f);
    int stage = 0, trial = 0;
    unsigned long long a = 0, i = 0;
    try {
      if (fields.size() != 6) throw std::invalid_argument("field count");
      stage = std::stoi(fields[0]);
      trial = std::stoi(fields[1]);
      a = std::stoull(fields[2]);
      i = std::stoull(fields[3]);
      if (!stage_status_from_string(fields[4])) throw std::invalid_argument("status");
    } catch (const std::exception&) {
      out.push_back({"well_formed_row", lineno, "cannot parse '" + line + "'"});
      continue;
    }
    if (trial == 1 && i > a)
      out.push_back({"intersection_within_first_anonymity_set", lineno,
                     "intersection " + std::to_string(i) + " exceeds anonymity set " + std::to_string(a)});
    if (auto it = last_size.find(stage); it != last_size.end() && trial > last_trial[stage] && i > it->second)
      out.push_back({"intersection_non_increasing", lineno,
                     "stage " + std::to_string(stage) + " intersection grew from " + std::to_string(it->second) +
                         " to " + std::to_string(i)});
    last_size[stage] = i;
    last_trial[stage] = trial;
  }
  return out;
}

}  // namespace introsim
