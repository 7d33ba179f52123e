#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>

namespace introsim {

// Virtual clock with integer microsecond resolution. Integer ticks keep event
// ordering exact and runs reproducible across platforms.
struct VirtualClock {
  using rep = std::int64_t;
  using period = std::micro;
  using duration = std::chrono::duration<rep, period>;
  using time_point = std::chrono::time_point<VirtualClock>;
  static constexpr bool is_steady = true;
};

using Duration = VirtualClock::duration;
using SimTime = VirtualClock::time_point;

inline constexpr SimTime kEpoch{};

inline double to_seconds(Duration d) {
  return std::chrono::duration<double>(d).count();
}
inline double to_seconds(SimTime t) { return to_seconds(t.time_since_epoch()); }

inline Duration from_seconds(double s) {
  return std::chrono::round<Duration>(std::chrono::duration<double>(s));
}
inline SimTime at_seconds(double s) { return kEpoch + from_seconds(s); }

using Rng = std::mt19937_64;

inline double uniform_real(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Index of a relay inside a RelaySnapshot.
struct RelayIndex {
  std::uint32_t value = 0;
  friend auto operator<=>(const RelayIndex&, const RelayIndex&) = default;
};

using CircuitId = std::uint64_t;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t record, const std::string& what)
      : Error("record " + std::to_string(record) + ": " + what), record_(record) {}
  std::size_t record() const { return record_; }

 private:
  std::size_t record_;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class DistributionError : public Error {
 public:
  using Error::Error;
};

class ConstructionError : public Error {
 public:
  using Error::Error;
};

class SchedulingError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

}  // namespace introsim

template <>
struct std::hash<introsim::RelayIndex> {
  std::size_t operator()(const introsim::RelayIndex& r) const noexcept {
    return std::hash<std::uint32_t>{}(r.value);
  }
};
