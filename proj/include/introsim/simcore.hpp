#pragma once

// Deterministic discrete-event engine and background-traffic generation.

#include <introsim/common.hpp>
#include <introsim/directory.hpp>
#include <introsim/pathsel.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <queue>
#include <ranges>
#include <string>
#include <utility>
#include <vector>

namespace introsim {

enum class EventKind : std::uint8_t {
  cell_delivery,
  circuit_expiry,
  trial_start,
  trial_timeout,
  background_flow_tick,
};

template <typename Payload>
struct Event {
  SimTime at{};
  std::uint64_t seq = 0;
  EventKind kind = EventKind::cell_delivery;
  Payload payload{};
};

// Min-heap on (at, seq): equal timestamps dispatch in insertion order.
template <typename Payload>
class EventQueue {
 public:
  using event_type = Event<Payload>;

  SimTime now() const { return now_; }
  bool empty() const { return heap_.empty(); }
  std::size_t size() const { return heap_.size(); }
  std::optional<SimTime> next_time() const {
    if (heap_.empty()) return std::nullopt;
    return heap_.top().at;
  }

  std::uint64_t schedule(SimTime at, EventKind kind, Payload payload) {
    if (at < now_)
      throw SchedulingError("event scheduled at " + std::to_string(to_seconds(at)) +
                            "s is before the clock (" + std::to_string(to_seconds(now_)) + "s)");
    const std::uint64_t seq = next_seq_++;
    heap_.push(event_type{at, seq, kind, std::move(payload)});
    return seq;
  }

  // Dispatches the earliest event, advancing the clock to it.
  template <typename Handler>
  bool step(Handler&& handler) {
    if (heap_.empty()) return false;
    event_type ev = heap_.top();
    heap_.pop();
    now_ = ev.at;
    handler(ev);
    return true;
  }

  template <typename Handler>
  std::size_t run_until(SimTime t, Handler&& handler) {
    if (t < now_) throw SchedulingError("run_until target is before the clock");
    std::size_t dispatched = 0;
    while (!heap_.empty() && heap_.top().at <= t) {
      step(handler);
      ++dispatched;
    }
    now_ = t;
    return dispatched;
  }

 private:
  struct Later {
    bool operator()(const event_type& a, const event_type& b) const {
      if (a.at != b.at) return a.at > b.at;
      return a.seq > b.seq;
    }
  };

  SimTime now_{};
  std::uint64_t next_seq_ = 0;
  std::priority_queue<event_type, std::vector<event_type>, Later> heap_;
};

struct FlowObservation {
  RelayIndex at_relay;
  std::string src;
  std::string dst;
  SimTime at{};
};

// Receives flow observations. `monitors` lets producers skip relays nobody
// is watching; it must not change the observable output.
struct ObservationSink {
  virtual ~ObservationSink() = default;
  virtual bool monitors(RelayIndex relay) const = 0;
  virtual void observe(const FlowObservation& obs) = 0;
};

struct TimeWindow {
  SimTime start{};
  SimTime stop{};
};

// Each hop of each circuit overlapping the window emits flows as a Poisson
// process with rate `intensity` (flows/s); each flow goes to a uniformly chosen
// adjacent hop. Randomness is drawn only for monitored hops.
template <std::ranges::input_range R, typename Proj = std::identity>
void emit_background_traffic(const RelaySnapshot& snapshot, R&& circuits, double intensity, TimeWindow window,
                             ObservationSink& sink, Rng& rng, Proj proj = {}) {
  if (intensity < 0.0) throw UsageError("background intensity must be nonnegative");
  if (window.stop <= window.start) throw UsageError("background window must have positive length");
  if (intensity == 0.0) return;
  for (const auto& item : circuits) {
    const Circuit& c = std::invoke(proj, item);
    const SimTime from = std::max(c.created_at, window.start);
    const SimTime to = std::min(c.expires_at, window.stop);
    if (to <= from) continue;
    const double mean = intensity * to_seconds(to - from);
    const std::size_t n = c.hops.size();
    for (std::size_t i = 0; i < n; ++i) {
      const RelayIndex here = c.hops[i];
      if (!sink.monitors(here)) continue;
      const int flows = std::poisson_distribution<int>(mean)(rng);
      for (int f = 0; f < flows; ++f) {
        std::size_t next;
        if (i == 0) {
          next = 1;
        } else if (i + 1 == n) {
          next = i - 1;
        } else {
          next = std::bernoulli_distribution(0.5)(rng) ? i + 1 : i - 1;
        }
        const auto offset = static_cast<Duration::rep>(uniform_real(rng, 0.0, 1.0) *
                                                       static_cast<double>((to - from).count()));
        sink.observe(FlowObservation{here, snapshot.at(here).address, snapshot.at(c.hops[next]).address,
                                     from + Duration(offset)});
      }
    }
  }
}

// Load multipliers anchored at 02:00, 10:00 and 18:00, held constant until the
// next anchor (wrapping at midnight).
struct DiurnalProfile {
  double at_0200 = 1.0;
  double at_1000 = 1.0;
  double at_1800 = 1.0;

  void validate() const {
    if (!(at_0200 > 0.0 && at_1000 > 0.0 && at_1800 > 0.0))
      throw UsageError("diurnal multipliers must be positive");
  }
};

inline double diurnal_intensity(double base, double time_of_day_hours, const DiurnalProfile& profile) {
  profile.validate();
  double h = std::fmod(time_of_day_hours, 24.0);
  if (h < 0.0) h += 24.0;
  double multiplier;
  if (h >= 2.0 && h < 10.0) {
    multiplier = profile.at_0200;
  } else if (h >= 10.0 && h < 18.0) {
    multiplier = profile.at_1000;
  } else {
    multiplier = profile.at_1800;
  }
  return base * multiplier;
}

}  // namespace introsim
