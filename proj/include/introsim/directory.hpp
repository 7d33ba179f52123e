#pragma once

// Consensus view of the relay network: relay inventory, flags, weights,
// countries and per-position selection probabilities. Ingests Onionoo-style
// relay lists (a JSON array of relay records).

#include <introsim/common.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace introsim {

enum class RelayFlag : std::uint8_t { Running, Valid, Stable, Fast, Guard, V2Dir, Exit };

inline constexpr std::array<std::pair<RelayFlag, std::string_view>, 7> kFlagNames{{
    {RelayFlag::Running, "Running"},
    {RelayFlag::Valid, "Valid"},
    {RelayFlag::Stable, "Stable"},
    {RelayFlag::Fast, "Fast"},
    {RelayFlag::Guard, "Guard"},
    {RelayFlag::V2Dir, "V2Dir"},
    {RelayFlag::Exit, "Exit"},
}};

inline std::optional<RelayFlag> flag_from_string(std::string_view name) {
  for (const auto& [flag, text] : kFlagNames)
    if (text == name) return flag;
  return std::nullopt;
}

inline std::string_view to_string(RelayFlag flag) {
  return kFlagNames[static_cast<std::size_t>(flag)].second;
}

class FlagSet {
 public:
  FlagSet() = default;
  FlagSet(std::initializer_list<RelayFlag> flags) {
    for (auto f : flags) insert(f);
  }
  void insert(RelayFlag f) { bits_ |= bit(f); }
  void erase(RelayFlag f) { bits_ &= static_cast<std::uint8_t>(~bit(f)); }
  bool has(RelayFlag f) const { return (bits_ & bit(f)) != 0; }
  friend bool operator==(const FlagSet&, const FlagSet&) = default;

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [flag, text] : kFlagNames)
      if (has(flag)) out.emplace_back(text);
    return out;
  }

 private:
  static std::uint8_t bit(RelayFlag f) {
    return static_cast<std::uint8_t>(1U << static_cast<unsigned>(f));
  }
  std::uint8_t bits_ = 0;
};

enum class Role : std::uint8_t { guard, middle };

inline std::string_view to_string(Role r) { return r == Role::guard ? "guard" : "middle"; }

inline constexpr std::string_view kUnknownCountry = "??";

struct Relay {
  std::string id;
  std::string address;
  std::string country{kUnknownCountry};
  std::uint64_t consensus_weight = 0;
  FlagSet flags;
  std::optional<double> guard_probability;
  std::optional<double> middle_probability;

  friend bool operator==(const Relay&, const Relay&) = default;
};

// Immutable after construction; the constructor enforces the snapshot invariants.
class RelaySnapshot {
 public:
  RelaySnapshot() = default;

  explicit RelaySnapshot(std::vector<Relay> relays, SimTime timestamp = kEpoch)
      : timestamp_(timestamp), relays_(std::move(relays)) {
    validate();
    guard_uses_probability_ = std::any_of(relays_.begin(), relays_.end(),
                                          [](const Relay& r) { return r.guard_probability.has_value(); });
    middle_uses_probability_ = std::any_of(relays_.begin(), relays_.end(),
                                           [](const Relay& r) { return r.middle_probability.has_value(); });
    for (std::size_t i = 0; i < relays_.size(); ++i) {
      by_id_.emplace(relays_[i].id, RelayIndex{static_cast<std::uint32_t>(i)});
      if (role_weight(RelayIndex{static_cast<std::uint32_t>(i)}, Role::guard) > 0) ++guard_count_;
      if (role_weight(RelayIndex{static_cast<std::uint32_t>(i)}, Role::middle) > 0) ++middle_count_;
    }
  }

  SimTime timestamp() const { return timestamp_; }
  std::span<const Relay> relays() const { return relays_; }
  std::size_t size() const { return relays_.size(); }
  const Relay& at(RelayIndex i) const { return relays_.at(i.value); }

  std::optional<RelayIndex> find(std::string_view id) const {
    auto it = by_id_.find(std::string(id));
    if (it == by_id_.end()) return std::nullopt;
    return it->second;
  }

  RelayIndex index_of(std::string_view id) const {
    if (auto i = find(id)) return *i;
    throw ValidationError("unknown relay id '" + std::string(id) + "'");
  }

  std::size_t total_guard_count() const { return guard_count_; }
  std::size_t total_middle_count() const { return middle_count_; }

  // Unnormalized selection weight for a position. Precomputed probability
  // fields win whenever any relay in the snapshot carries them; otherwise the
  // consensus weight of flag-eligible relays is used.
  double role_weight(RelayIndex i, Role role) const {
    const Relay& r = relays_.at(i.value);
    if (role == Role::guard) {
      if (guard_uses_probability_) return r.guard_probability.value_or(0.0);
      return r.flags.has(RelayFlag::Guard) ? static_cast<double>(r.consensus_weight) : 0.0;
    }
    if (middle_uses_probability_) return r.middle_probability.value_or(0.0);
    return static_cast<double>(r.consensus_weight);
  }

  bool uses_probability_fields(Role role) const {
    return role == Role::guard ? guard_uses_probability_ : middle_uses_probability_;
  }

 private:
  void validate() const {
    std::unordered_set<std::string_view> ids;
    double guard_sum = 0.0;
    double middle_sum = 0.0;
    for (std::size_t i = 0; i < relays_.size(); ++i) {
      const Relay& r = relays_[i];
      const std::string where = "relay " + std::to_string(i) + " ('" + r.id + "')";
      if (r.id.empty()) throw ValidationError(where + ": empty id");
      if (r.address.empty()) throw ValidationError(where + ": empty address");
      if (!ids.insert(r.id).second) throw ValidationError(where + ": duplicate relay id");
      const double gp = r.guard_probability.value_or(0.0);
      const double mp = r.middle_probability.value_or(0.0);
      if (gp < 0.0 || gp > 1.0 || mp < 0.0 || mp > 1.0)
        throw ValidationError(where + ": probability outside [0,1]");
      if (gp > 0.0 && !r.flags.has(RelayFlag::Guard))
        throw ValidationError(where + ": guard_probability > 0 without Guard flag");
      if (r.consensus_weight == 0 && (gp > 0.0 || mp > 0.0))
        throw ValidationError(where + ": zero consensus weight with non-zero probability");
      guard_sum += gp;
      middle_sum += mp;
    }
    if (guard_sum > 1.0 + 1e-9) throw ValidationError("guard_probability sums to more than 1");
    if (middle_sum > 1.0 + 1e-9) throw ValidationError("middle_probability sums to more than 1");
  }

  SimTime timestamp_{};
  std::vector<Relay> relays_;
  std::unordered_map<std::string, RelayIndex> by_id_;
  bool guard_uses_probability_ = false;
  bool middle_uses_probability_ = false;
  std::size_t guard_count_ = 0;
  std::size_t middle_count_ = 0;
};

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& rec, std::size_t idx, const char* key) {
  auto it = rec.find(key);
  if (it == rec.end()) throw ParseError(idx, std::string("missing field '") + key + "'");
  return *it;
}

inline std::optional<double> read_probability(const nlohmann::json& rec, std::size_t idx,
                                              const char* key) {
  auto it = rec.find(key);
  if (it == rec.end() || it->is_null()) return std::nullopt;
  if (!it->is_number()) throw ParseError(idx, std::string("'") + key + "' is not a number");
  const double v = it->get<double>();
  if (!std::isfinite(v)) throw ParseError(idx, std::string("'") + key + "' is not finite");
  return std::clamp(v, 0.0, 1.0);
}

inline Relay parse_relay(const nlohmann::json& rec, std::size_t idx) {
  if (!rec.is_object()) throw ParseError(idx, "record is not an object");
  Relay r;
  const auto& id = require(rec, idx, "id");
  if (!id.is_string()) throw ParseError(idx, "'id' is not a string");
  r.id = id.get<std::string>();

  const auto& address = require(rec, idx, "address");
  if (!address.is_string()) throw ParseError(idx, "'address' is not a string");
  r.address = address.get<std::string>();

  if (auto it = rec.find("country"); it != rec.end() && !it->is_null()) {
    if (!it->is_string() || it->get_ref<const std::string&>().size() != 2)
      throw ParseError(idx, "'country' is not a 2-character code");
    r.country = it->get<std::string>();
    std::transform(r.country.begin(), r.country.end(), r.country.begin(),
                   [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  }

  const auto& weight = require(rec, idx, "consensus_weight");
  if (!weight.is_number_integer() || weight.get<std::int64_t>() < 0)
    throw ParseError(idx, "'consensus_weight' is not a nonnegative integer");
  r.consensus_weight = weight.get<std::uint64_t>();

  const auto& flags = require(rec, idx, "flags");
  if (!flags.is_array()) throw ParseError(idx, "'flags' is not an array");
  for (const auto& f : flags) {
    if (!f.is_string()) throw ParseError(idx, "flag is not a string");
    // Flags outside the modelled set (HSDir, Authority, ...) are dropped.
    if (auto flag = flag_from_string(f.get_ref<const std::string&>())) r.flags.insert(*flag);
  }

  r.guard_probability = read_probability(rec, idx, "guard_probability");
  r.middle_probability = read_probability(rec, idx, "middle_probability");
  return r;
}

}  // namespace detail

inline RelaySnapshot parse_consensus(const nlohmann::json& document, SimTime timestamp = kEpoch) {
  if (!document.is_array()) throw ParseError(0, "document is not an array of relay records");
  std::vector<Relay> relays;
  relays.reserve(document.size());
  for (std::size_t i = 0; i < document.size(); ++i) relays.push_back(detail::parse_relay(document[i], i));
  return RelaySnapshot(std::move(relays), timestamp);
}

inline RelaySnapshot parse_consensus(std::string_view text, SimTime timestamp = kEpoch) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(0, std::string("malformed JSON: ") + e.what());
  }
  return parse_consensus(doc, timestamp);
}

inline nlohmann::json serialize(const RelaySnapshot& snapshot) {
  auto doc = nlohmann::json::array();
  for (const Relay& r : snapshot.relays()) {
    nlohmann::json rec{{"id", r.id},
                       {"address", r.address},
                       {"consensus_weight", r.consensus_weight},
                       {"flags", r.flags.names()}};
    if (r.country != kUnknownCountry) rec["country"] = r.country;
    if (r.guard_probability) rec["guard_probability"] = *r.guard_probability;
    if (r.middle_probability) rec["middle_probability"] = *r.middle_probability;
    doc.push_back(std::move(rec));
  }
  return doc;
}

inline std::vector<RelayIndex> eligible_relays(const RelaySnapshot& snapshot, Role role) {
  std::vector<RelayIndex> out;
  for (std::uint32_t i = 0; i < snapshot.size(); ++i)
    if (snapshot.role_weight(RelayIndex{i}, role) > 0.0) out.push_back(RelayIndex{i});
  return out;
}

// Sampling distribution over the relays eligible for one position.
class SelectionDistribution {
 public:
  SelectionDistribution(std::vector<RelayIndex> support, std::vector<double> probabilities)
      : support_(std::move(support)), probabilities_(std::move(probabilities)) {
    cumulative_.reserve(probabilities_.size());
    double acc = 0.0;
    for (double p : probabilities_) cumulative_.push_back(acc += p);
  }

  std::span<const RelayIndex> support() const { return support_; }
  std::span<const double> probabilities() const { return probabilities_; }
  std::size_t size() const { return support_.size(); }

  double probability(RelayIndex r) const {
    for (std::size_t i = 0; i < support_.size(); ++i)
      if (support_[i] == r) return probabilities_[i];
    return 0.0;
  }

  RelayIndex sample(Rng& rng) const {
    const double u = uniform_real(rng, 0.0, cumulative_.back());
    auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    if (it == cumulative_.end()) --it;
    return support_[static_cast<std::size_t>(it - cumulative_.begin())];
  }

 private:
  std::vector<RelayIndex> support_;
  std::vector<double> probabilities_;
  std::vector<double> cumulative_;
};

inline SelectionDistribution normalize_selection_distribution(const RelaySnapshot& snapshot, Role role) {
  std::vector<RelayIndex> support = eligible_relays(snapshot, role);
  if (support.empty())
    throw DistributionError("no relay eligible for the " + std::string(to_string(role)) + " position");
  std::vector<double> weights;
  weights.reserve(support.size());
  double total = 0.0;
  for (RelayIndex r : support) {
    weights.push_back(snapshot.role_weight(r, role));
    total += weights.back();
  }
  for (double& w : weights) w /= total;
  return SelectionDistribution(std::move(support), std::move(weights));
}

}  // namespace introsim
