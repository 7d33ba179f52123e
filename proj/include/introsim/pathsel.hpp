#pragma once

// Weighted relay path selection: short-lived stream/rendezvous circuits and
// the four-hop Vanguard-Lite introduction circuit.

#include <introsim/common.hpp>
#include <introsim/directory.hpp>

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

namespace introsim {

enum class CircuitPurpose : std::uint8_t { intro_service_side, rendezvous, general_stream };

inline std::string_view to_string(CircuitPurpose p) {
  switch (p) {
    case CircuitPurpose::intro_service_side: return "intro_service_side";
    case CircuitPurpose::rendezvous: return "rendezvous";
    case CircuitPurpose::general_stream: return "general_stream";
  }
  return "?";
}

enum class HopRole : std::uint8_t { guard, middle, intro_point, rendezvous_point };

inline Role selection_role(HopRole r) { return r == HopRole::guard ? Role::guard : Role::middle; }

inline constexpr Duration kStreamCircuitLifetime = std::chrono::minutes(10);
inline constexpr Duration kIntroLifetimeMin = std::chrono::hours(18);
inline constexpr Duration kIntroLifetimeMax = std::chrono::hours(24);

struct CircuitSpec {
  CircuitPurpose purpose = CircuitPurpose::general_stream;
  std::vector<HopRole> role_pattern;
  Duration lifetime{};

  static CircuitSpec make(CircuitPurpose purpose, std::vector<HopRole> pattern, Duration lifetime) {
    const std::size_t expected = purpose == CircuitPurpose::intro_service_side ? 4 : 3;
    if (pattern.size() != expected)
      throw ConstructionError(std::string(to_string(purpose)) + " circuits need " +
                              std::to_string(expected) + " hops");
    if (lifetime <= Duration::zero()) throw ConstructionError("circuit lifetime must be positive");
    return CircuitSpec{purpose, std::move(pattern), lifetime};
  }

  // Viewed from the service outward: EG, M0 (vanguard), M1, IP.
  static CircuitSpec intro_service_side(Duration lifetime) {
    return make(CircuitPurpose::intro_service_side,
                {HopRole::guard, HopRole::middle, HopRole::middle, HopRole::intro_point}, lifetime);
  }
  static CircuitSpec general_stream(Duration lifetime = kStreamCircuitLifetime) {
    return make(CircuitPurpose::general_stream, {HopRole::guard, HopRole::middle, HopRole::middle},
                lifetime);
  }
  static CircuitSpec rendezvous(Duration lifetime = kStreamCircuitLifetime) {
    return make(CircuitPurpose::rendezvous,
                {HopRole::guard, HopRole::middle, HopRole::rendezvous_point}, lifetime);
  }
};

struct Circuit {
  CircuitId id = 0;
  std::vector<RelayIndex> hops;
  CircuitSpec spec;
  SimTime created_at{};
  SimTime expires_at{};

  bool alive_at(SimTime t) const { return created_at <= t && t < expires_at; }
  bool contains(RelayIndex r) const { return std::find(hops.begin(), hops.end(), r) != hops.end(); }
};

// Hop positions in an intro circuit, service outward.
namespace intro_hop {
inline constexpr std::size_t entry_guard = 0;
inline constexpr std::size_t vanguard = 1;
inline constexpr std::size_t middle1 = 2;
inline constexpr std::size_t intro_point = 3;
}  // namespace intro_hop

struct IntroPins {
  RelayIndex guard;
  RelayIndex vanguard;
  std::optional<RelayIndex> middle1;
  std::optional<RelayIndex> intro_point;
};

struct LifetimeRange {
  Duration min = kIntroLifetimeMin;
  Duration max = kIntroLifetimeMax;
};

// Holds the per-position distributions for one snapshot and hands out
// circuit ids. Single-owner per simulation run.
class PathSelector {
 public:
  explicit PathSelector(const RelaySnapshot& snapshot)
      : snapshot_(&snapshot),
        guard_(try_distribution(snapshot, Role::guard)),
        middle_(try_distribution(snapshot, Role::middle)) {}

  const RelaySnapshot& snapshot() const { return *snapshot_; }

  const SelectionDistribution& distribution(Role role) const {
    const auto& d = role == Role::guard ? guard_ : middle_;
    if (!d) throw ConstructionError("no relay eligible for the " + std::string(to_string(role)) + " position");
    return *d;
  }

  CircuitId next_id() { return next_id_++; }

  // Draws from the role distribution, rejecting relays already in `taken`.
  RelayIndex draw(Role role, std::span<const RelayIndex> taken, Rng& rng) const {
    const auto& dist = distribution(role);
    std::size_t available = 0;
    for (RelayIndex r : dist.support())
      if (std::find(taken.begin(), taken.end(), r) == taken.end()) ++available;
    if (available == 0)
      throw ConstructionError("not enough distinct " + std::string(to_string(role)) + "-eligible relays");
    for (;;) {
      RelayIndex r = dist.sample(rng);
      if (std::find(taken.begin(), taken.end(), r) == taken.end()) return r;
    }
  }

  // Pinned hops are honoured position by position; unpinned positions are
  // sampled in pattern order with rejection of duplicates.
  Circuit sample_circuit(const CircuitSpec& spec, Rng& rng, SimTime now,
                         std::span<const std::optional<RelayIndex>> pins = {}) {
    for (HopRole role : spec.role_pattern) {
      if (distribution(selection_role(role)).size() < spec.role_pattern.size())
        throw ConstructionError("not enough " + std::string(to_string(selection_role(role))) +
                                "-eligible relays for a " + std::to_string(spec.role_pattern.size()) +
                                "-hop circuit");
    }
    std::vector<RelayIndex> hops;
    hops.reserve(spec.role_pattern.size());
    for (std::size_t i = 0; i < spec.role_pattern.size(); ++i) {
      if (i < pins.size() && pins[i]) {
        if (std::find(hops.begin(), hops.end(), *pins[i]) != hops.end())
          throw ConstructionError("relay pinned at two positions of one circuit");
        hops.push_back(*pins[i]);
      } else {
        std::vector<RelayIndex> taken = hops;
        for (std::size_t j = i + 1; j < pins.size(); ++j)
          if (pins[j]) taken.push_back(*pins[j]);
        hops.push_back(draw(selection_role(spec.role_pattern[i]), taken, rng));
      }
    }
    Circuit c;
    c.id = next_id();
    c.hops = std::move(hops);
    c.spec = spec;
    c.created_at = now;
    c.expires_at = now + spec.lifetime;
    return c;
  }

  Circuit build_intro_circuit(const IntroPins& pins, Rng& rng, SimTime now, LifetimeRange range = {}) {
    check_eligible(pins.guard, Role::guard, "service guard");
    check_eligible(pins.vanguard, Role::middle, "vanguard");
    if (pins.middle1) check_eligible(*pins.middle1, Role::middle, "middle 1");
    if (pins.intro_point) check_eligible(*pins.intro_point, Role::middle, "introduction point");
    if (range.max < range.min || range.min <= Duration::zero())
      throw ConstructionError("invalid intro-circuit lifetime range");
    const Duration lifetime =
        range.min + Duration(static_cast<Duration::rep>(
                        uniform_real(rng, 0.0, 1.0) * static_cast<double>((range.max - range.min).count())));
    const std::optional<RelayIndex> fixed[] = {pins.guard, pins.vanguard, pins.middle1, pins.intro_point};
    return sample_circuit(CircuitSpec::intro_service_side(lifetime), rng, now, fixed);
  }

 private:
  static std::optional<SelectionDistribution> try_distribution(const RelaySnapshot& s, Role role) {
    if (eligible_relays(s, role).empty()) return std::nullopt;
    return normalize_selection_distribution(s, role);
  }

  void check_eligible(RelayIndex r, Role role, const char* what) const {
    if (r.value >= snapshot_->size() || snapshot_->role_weight(r, role) <= 0.0)
      throw ConstructionError(std::string(what) + " is not " + std::string(to_string(role)) + "-eligible");
  }

  const RelaySnapshot* snapshot_;
  std::optional<SelectionDistribution> guard_;
  std::optional<SelectionDistribution> middle_;
  CircuitId next_id_ = 1;
};

// Pins held by a background client across circuit rebuilds. A pinned guard and
// second-layer guard produce a relay-to-relay edge that survives churn.
struct ClientPins {
  std::optional<RelayIndex> guard;
  std::optional<RelayIndex> second_layer;
};

struct PopulationSlot {
  Circuit circuit;
  ClientPins pins;
};

inline Circuit sample_for_slot(PathSelector& selector, const CircuitSpec& spec, const ClientPins& pins,
                               Rng& rng, SimTime now) {
  const std::optional<RelayIndex> fixed[] = {pins.guard, pins.second_layer};
  return selector.sample_circuit(spec, rng, now, fixed);
}

// Removes circuits with expires_at <= now and samples a replacement for each
// stream/rendezvous circuit, preserving the slot's pins. Intro circuits are
// rebuilt on natural expiry with their guard, vanguard and intro point kept.
// Returns the number of circuits replaced.
inline std::size_t expire_and_replace(std::vector<PopulationSlot>& active, SimTime now,
                                      PathSelector& selector, Rng& rng) {
  std::size_t replaced = 0;
  for (auto& slot : active) {
    if (slot.circuit.expires_at > now) continue;
    const Circuit& old = slot.circuit;
    if (old.spec.purpose == CircuitPurpose::intro_service_side) {
      IntroPins pins{old.hops[intro_hop::entry_guard], old.hops[intro_hop::vanguard], std::nullopt,
                     old.hops[intro_hop::intro_point]};
      slot.circuit = selector.build_intro_circuit(pins, rng, now);
    } else {
      slot.circuit = sample_for_slot(selector, old.spec, slot.pins, rng, now);
    }
    ++replaced;
  }
  return replaced;
}

}  // namespace introsim
