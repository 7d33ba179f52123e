#pragma once

// Shared builders and generators for the test suite. Property tests use plain
// seeded loops over these generators.

#include <introsim/directory.hpp>
#include <introsim/observer.hpp>
#include <introsim/simcore.hpp>

#include <string>
#include <vector>

namespace introsim::testing {

inline Relay make_relay(std::string id, std::uint64_t weight, bool guard = true, std::string country = "DE") {
  Relay r;
  r.address = "10.9." + std::to_string(std::hash<std::string>{}(id) % 250) + "." + std::to_string(id.size());
  r.address += "/" + id;  // keeps addresses unique per id
  r.id = std::move(id);
  r.country = std::move(country);
  r.consensus_weight = weight;
  r.flags = {RelayFlag::Running, RelayFlag::Valid, RelayFlag::Fast};
  if (guard) r.flags.insert(RelayFlag::Guard);
  return r;
}

// n guard-flagged relays of equal weight: uniform for both positions.
inline RelaySnapshot uniform_snapshot(std::size_t n, std::uint64_t weight = 1000) {
  std::vector<Relay> relays;
  for (std::size_t i = 0; i < n; ++i) relays.push_back(make_relay("U" + std::to_string(i), weight));
  return RelaySnapshot(std::move(relays));
}

// Random valid snapshot, with or without probability fields.
inline RelaySnapshot random_snapshot(Rng& rng, std::size_t max_relays = 40) {
  static const char* kCountries[] = {"US", "DE", "NL", "RU", "FR", "SE", "CH", "??"};
  const std::size_t n = 1 + rng() % max_relays;
  const bool with_probs = rng() % 2 == 0;
  std::vector<Relay> relays;
  std::vector<double> graw, mraw;
  for (std::size_t i = 0; i < n; ++i) {
    Relay r = make_relay("X" + std::to_string(i) + "_" + std::to_string(rng() % 100000), 1 + rng() % 20000,
                         rng() % 3 != 0, kCountries[rng() % 8]);
    if (rng() % 4 == 0) r.flags.insert(RelayFlag::Exit);
    if (rng() % 5 == 0) r.flags.insert(RelayFlag::Stable);
    relays.push_back(std::move(r));
    graw.push_back(uniform_real(rng, 0.0, 1.0));
    mraw.push_back(uniform_real(rng, 0.0, 1.0));
  }
  if (with_probs) {
    double gs = 0, ms = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (relays[i].flags.has(RelayFlag::Guard)) gs += graw[i];
      ms += mraw[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
      // Dyadic-ish rounding keeps the JSON round trip exact.
      auto q = [](double v) { return std::floor(v * 1024.0) / 1024.0; };
      relays[i].guard_probability = relays[i].flags.has(RelayFlag::Guard) && gs > 0 ? q(graw[i] / gs) : 0.0;
      relays[i].middle_probability = q(mraw[i] / ms);
    }
  }
  return RelaySnapshot(std::move(relays));
}

// Collects every observation at the relays it is told to watch.
class RecordingSink final : public ObservationSink {
 public:
  explicit RecordingSink(std::vector<RelayIndex> watched = {}, bool all = false)
      : watched_(std::move(watched)), all_(all) {}
  bool monitors(RelayIndex r) const override {
    return all_ || std::find(watched_.begin(), watched_.end(), r) != watched_.end();
  }
  void observe(const FlowObservation& obs) override { seen.push_back(obs); }
  std::vector<FlowObservation> seen;

 private:
  std::vector<RelayIndex> watched_;
  bool all_;
};

inline PseudonymKey fixed_key(std::uint8_t fill) {
  std::array<std::uint8_t, PseudonymKey::kSize> m{};
  m.fill(fill);
  return PseudonymKey::from_bytes(m);
}

}  // namespace introsim::testing
