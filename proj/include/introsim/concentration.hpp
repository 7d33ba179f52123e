#pragma once

// Jurisdictional concentration of guard/middle selection probability and the
// all-hops exposure of a Vanguard-Lite intro circuit (one guard, three
// middles).

#include <introsim/common.hpp>
#include <introsim/directory.hpp>
#include <introsim/pathsel.hpp>

#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace introsim {

struct JurisdictionSet {
  std::string name;
  std::set<std::string> countries;

  bool contains(const std::string& country) const {
    return country != kUnknownCountry && countries.contains(country);
  }

  static JurisdictionSet five_eyes() { return {"five_eyes", {"US", "GB", "CA", "AU", "NZ"}}; }

  static JurisdictionSet nine_eyes() {
    JurisdictionSet s = five_eyes();
    s.name = "nine_eyes";
    s.countries.insert({"DK", "FR", "NL", "NO"});
    return s;
  }

  static JurisdictionSet fourteen_eyes() {
    JurisdictionSet s = nine_eyes();
    s.name = "fourteen_eyes";
    s.countries.insert({"DE", "BE", "IT", "ES", "SE"});
    return s;
  }

  static std::optional<JurisdictionSet> builtin(const std::string& name) {
    if (name == "five_eyes") return five_eyes();
    if (name == "nine_eyes") return nine_eyes();
    if (name == "fourteen_eyes") return fourteen_eyes();
    return std::nullopt;
  }
};

// Sum of the role's selection probability over in-set relays. Uses the
// snapshot's probability fields; weight-only snapshots are normalized first.
inline double jurisdiction_mass(const RelaySnapshot& snapshot, const JurisdictionSet& set, Role role) {
  double in_set = 0.0;
  double total = 0.0;
  for (std::uint32_t i = 0; i < snapshot.size(); ++i) {
    const double w = snapshot.role_weight(RelayIndex{i}, role);
    total += w;
    if (set.contains(snapshot.at(RelayIndex{i}).country)) in_set += w;
  }
  if (snapshot.uses_probability_fields(role)) return in_set;
  return total > 0.0 ? in_set / total : 0.0;
}

// Independent-with-replacement approximation: p_guard * p_middle^3.
inline double all_hops_intro_probability(double p_guard, double p_middle) {
  if (!(p_guard >= 0.0 && p_guard <= 1.0) || !(p_middle >= 0.0 && p_middle <= 1.0))
    throw ValidationError("probabilities must lie in [0,1]");
  return p_guard * p_middle * p_middle * p_middle;
}

struct ConcentrationReport {
  std::string set_name;
  double p_guard = 0.0;
  double p_middle = 0.0;
  double p_all_hops_intro = 0.0;
  std::size_t relays_inside = 0;
  std::size_t relays_outside = 0;
  SimTime snapshot_timestamp{};
};

inline ConcentrationReport concentration_report(const RelaySnapshot& snapshot, const JurisdictionSet& set) {
  ConcentrationReport r;
  r.set_name = set.name;
  r.p_guard = std::min(1.0, jurisdiction_mass(snapshot, set, Role::guard));
  r.p_middle = std::min(1.0, jurisdiction_mass(snapshot, set, Role::middle));
  r.p_all_hops_intro = all_hops_intro_probability(r.p_guard, r.p_middle);
  for (const Relay& relay : snapshot.relays()) (set.contains(relay.country) ? r.relays_inside : r.relays_outside)++;
  r.snapshot_timestamp = snapshot.timestamp();
  return r;
}

// Exact without-replacement estimate by sampling intro circuits with the
// path selector: fraction whose four hops all sit inside the set.
inline double sampled_all_hops_intro_probability(const RelaySnapshot& snapshot, const JurisdictionSet& set,
                                                 std::size_t samples, Rng& rng) {
  PathSelector selector(snapshot);
  const CircuitSpec spec = CircuitSpec::intro_service_side(kIntroLifetimeMin);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < samples; ++i) {
    const Circuit c = selector.sample_circuit(spec, rng, kEpoch);
    bool all = true;
    for (RelayIndex r : c.hops) all = all && set.contains(snapshot.at(r).country);
    if (all) ++hits;
  }
  return samples ? static_cast<double>(hits) / static_cast<double>(samples) : 0.0;
}

namespace detail {
inline std::string fixed(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}
}  // namespace detail

// Per-country rows: country,relay_count,guard_mass,middle_mass,in_fourteen_eyes
inline std::string emit_distribution_report(const RelaySnapshot& snapshot) {
  struct Row {
    std::size_t count = 0;
    double guard = 0.0;
    double middle = 0.0;
  };
  std::map<std::string, Row> rows;
  double guard_total = 0.0;
  double middle_total = 0.0;
  for (std::uint32_t i = 0; i < snapshot.size(); ++i) {
    const Relay& relay = snapshot.at(RelayIndex{i});
    Row& row = rows[relay.country];
    ++row.count;
    const double g = snapshot.role_weight(RelayIndex{i}, Role::guard);
    const double m = snapshot.role_weight(RelayIndex{i}, Role::middle);
    row.guard += g;
    row.middle += m;
    guard_total += g;
    middle_total += m;
  }
  const bool guard_fields = snapshot.uses_probability_fields(Role::guard);
  const bool middle_fields = snapshot.uses_probability_fields(Role::middle);
  const JurisdictionSet fourteen = JurisdictionSet::fourteen_eyes();

  std::ostringstream out;
  out << "country,relay_count,guard_mass,middle_mass,in_fourteen_eyes\n";
  for (const auto& [country, row] : rows) {
    const double g = guard_fields ? row.guard : (guard_total > 0 ? row.guard / guard_total : 0.0);
    const double m = middle_fields ? row.middle : (middle_total > 0 ? row.middle / middle_total : 0.0);
    out << country << "," << row.count << "," << detail::fixed(g) << "," << detail::fixed(m) << ","
        << (fourteen.contains(country) ? 1 : 0) << "\n";
  }
  return out.str();
}

// Per-set summary: set,p_guard,p_middle,p_all_hops_intro,relays_inside,relays_outside
inline std::string emit_set_summary(const RelaySnapshot& snapshot, const std::vector<JurisdictionSet>& sets) {
  std::ostringstream out;
  out << "set,p_guard,p_middle,p_all_hops_intro,relays_inside,relays_outside\n";
  for (const auto& s : sets) {
    const auto r = concentration_report(snapshot, s);
    out << r.set_name << "," << detail::fixed(r.p_guard) << "," << detail::fixed(r.p_middle) << ","
        << detail::fixed(r.p_all_hops_intro) << "," << r.relays_inside << "," << r.relays_outside << "\n";
  }
  return out.str();
}

}  // namespace introsim
