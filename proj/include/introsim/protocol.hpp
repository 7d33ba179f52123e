#pragma once

// Onion-service introduction and rendezvous at cell granularity. Handshake
// material (cookies, g^x, g^y) is carried as opaque tokens compared by
// equality; no cryptography is performed.

#include <introsim/common.hpp>
#include <introsim/directory.hpp>
#include <introsim/pathsel.hpp>
#include <introsim/simcore.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace introsim {

enum class CellKind : std::uint8_t {
  ESTABLISH_INTRO,
  INTRO_ESTABLISHED,
  ESTABLISH_RENDEZVOUS,
  RENDEZVOUS_ESTABLISHED,
  INTRODUCE1,
  INTRODUCE2,
  INTRODUCE_ACK,
  RENDEZVOUS1,
  RENDEZVOUS2,
  BEGIN,
};

struct CellPayload {
  std::optional<RelayIndex> rendezvous_point;
  std::string cookie;
  std::string handshake;  // g^x on the way in, g^y on the way out
  std::string onion_address;
};

struct Cell {
  CellKind kind = CellKind::BEGIN;
  CircuitId circuit_id = 0;
  CellPayload payload;
};

struct HandshakeTranscript {
  SimTime t_introduce1{};
  SimTime t_rendezvous2{};
  CircuitId intro_circuit_id = 0;
  CircuitId rendezvous_circuit_id = 0;
  bool success = false;
  std::string failure;

  Duration delta() const { return t_rendezvous2 - t_introduce1; }
};

struct OnionService {
  std::string onion_address;
  std::string address;  // network location of the hidden service host
};

struct Client {
  std::string address;
};

struct ProtocolConfig {
  Duration min_hop_latency = std::chrono::milliseconds(20);
  Duration max_hop_latency = std::chrono::milliseconds(150);
  Duration delta_min = std::chrono::milliseconds(500);
  Duration delta_max = std::chrono::milliseconds(1500);
  Duration handshake_timeout = std::chrono::seconds(30);
  bool corrupt_cookie = false;  // fault injection: the service echoes a wrong cookie
  // When false, only INTRODUCE2 forwarding along the intro circuit is visible
  // to taps; the client and rendezvous legs stay dark.
  bool trace_auxiliary_cells = true;
};

// A node on a cell route; relays carry their snapshot index.
struct Endpoint {
  std::optional<RelayIndex> relay;
  std::string address;
};

inline Endpoint relay_endpoint(const RelaySnapshot& s, RelayIndex r) { return Endpoint{r, s.at(r).address}; }

// Sends a cell along `route`; every relay that forwards it produces one
// observation towards the next node at its send time. Returns the arrival time.
inline SimTime relay_along(std::span<const Endpoint> route, SimTime start, std::span<const Duration> latencies,
                           ObservationSink* sink) {
  if (route.size() < 2 || latencies.size() != route.size() - 1)
    throw UsageError("route and latency count disagree");
  SimTime t = start;
  for (std::size_t i = 0; i + 1 < route.size(); ++i) {
    if (sink && route[i].relay && sink->monitors(*route[i].relay))
      sink->observe(FlowObservation{*route[i].relay, route[i].address, route[i + 1].address, t});
    t += latencies[i];
  }
  return t;
}

struct Introduce2Forward {
  std::vector<FlowObservation> observations;
  bool delivered = false;
  SimTime arrival{};
};

// Forwards INTRODUCE2 from the intro point down IP -> M1 -> M0 -> EG -> service,
// one observation per hop pair. Stops at the first link sent after the
// circuit has expired.
inline Introduce2Forward forward_introduce2(const RelaySnapshot& snapshot, const Circuit& intro_circuit,
                                            const std::string& service_address, SimTime start,
                                            std::span<const Duration> latencies) {
  if (intro_circuit.spec.purpose != CircuitPurpose::intro_service_side || intro_circuit.hops.size() != 4)
    throw UsageError("not a service-side introduction circuit");
  if (latencies.size() != 4) throw UsageError("INTRODUCE2 forwarding needs four link latencies");
  Introduce2Forward out;
  SimTime t = start;
  for (std::size_t k = 0; k < 4; ++k) {
    const std::size_t pos = intro_hop::intro_point - k;
    if (!intro_circuit.alive_at(t)) return out;
    const RelayIndex here = intro_circuit.hops[pos];
    const std::string& dst = pos == 0 ? service_address : snapshot.at(intro_circuit.hops[pos - 1]).address;
    out.observations.push_back(FlowObservation{here, snapshot.at(here).address, dst, t});
    t += latencies[k];
  }
  out.delivered = true;
  out.arrival = t;
  return out;
}

// Samples per-link latencies, then rescales the critical path so it sums
// exactly to a Δt drawn uniformly from the configured envelope.
struct WindowLatencies {
  std::vector<Duration> critical;  // INTRODUCE1(3) INTRODUCE2(4) RENDEZVOUS1(4) RENDEZVOUS2(3)
  std::vector<Duration> ack;       // INTRODUCE_ACK(3)
  Duration total{};
};

inline constexpr std::size_t kCriticalLinks = 14;
inline constexpr std::size_t kAckLinks = 3;

inline Duration sample_link_latency(const ProtocolConfig& cfg, Rng& rng) {
  return Duration(static_cast<Duration::rep>(uniform_real(rng, static_cast<double>(cfg.min_hop_latency.count()),
                                                          static_cast<double>(cfg.max_hop_latency.count()))));
}

inline WindowLatencies sample_window_latencies(const ProtocolConfig& cfg, Rng& rng) {
  std::vector<double> raw(kCriticalLinks + kAckLinks);
  for (double& x : raw) x = static_cast<double>(sample_link_latency(cfg, rng).count());
  const auto target = static_cast<Duration::rep>(uniform_real(rng, static_cast<double>(cfg.delta_min.count()),
                                                              static_cast<double>(cfg.delta_max.count())));
  const double critical_sum = std::accumulate(raw.begin(), raw.begin() + kCriticalLinks, 0.0);
  const double scale = static_cast<double>(target) / critical_sum;

  WindowLatencies out;
  Duration::rep assigned = 0;
  for (std::size_t i = 0; i < kCriticalLinks; ++i) {
    Duration::rep v = i + 1 == kCriticalLinks ? target - assigned
                                              : static_cast<Duration::rep>(std::floor(raw[i] * scale));
    assigned += v;
    out.critical.emplace_back(v);
  }
  for (std::size_t i = kCriticalLinks; i < raw.size(); ++i)
    out.ack.emplace_back(static_cast<Duration::rep>(std::floor(raw[i] * scale)));
  out.total = Duration(target);
  return out;
}

struct ConnectHooks {
  std::function<void(SimTime)> before_introduce1;  // START
  std::function<void(SimTime)> on_rendezvous2;     // STOP
  std::function<void(SimTime)> on_failure;
};

struct IntroRegistration {
  RelayIndex intro_point;
  CircuitId circuit = 0;
};

// Single-threaded network of relays, services and clients driven by one
// event queue. Background circuits live elsewhere; this class carries only
// protocol traffic.
class OnionNetwork {
 public:
  OnionNetwork(const RelaySnapshot& snapshot, PathSelector& selector, Rng& rng, ProtocolConfig config = {})
      : snapshot_(&snapshot), selector_(&selector), rng_(&rng), config_(config) {}

  SimTime now() const { return queue_.now(); }
  const ProtocolConfig& config() const { return config_; }
  ProtocolConfig& config() { return config_; }
  void set_sink(ObservationSink* sink) { sink_ = sink; }

  void advance_to(SimTime t) {
    queue_.run_until(t, [this](const auto& ev) { dispatch(ev); });
  }

  void add_service(const OnionService& service) {
    services_.try_emplace(service.onion_address, ServiceRecord{service, {}});
  }

  Cell establish_intro(const OnionService& service, const Circuit& circuit) {
    if (circuit.spec.purpose != CircuitPurpose::intro_service_side)
      throw ProtocolError("ESTABLISH_INTRO on a circuit that is not a service-side intro circuit");
    if (!circuit.alive_at(now())) throw ProtocolError("ESTABLISH_INTRO on a dead circuit");
    add_service(service);
    auto& rec = services_.at(service.onion_address);
    const RelayIndex ip = circuit.hops[intro_hop::intro_point];
    circuits_[circuit.id] = circuit;
    auto it = std::find_if(rec.intro_points.begin(), rec.intro_points.end(),
                           [&](const IntroRegistration& r) { return r.intro_point == ip; });
    if (it != rec.intro_points.end()) {
      circuits_.erase(it->circuit);
      it->circuit = circuit.id;
    } else {
      rec.intro_points.push_back(IntroRegistration{ip, circuit.id});
    }
    queue_.schedule(circuit.expires_at, EventKind::circuit_expiry,
                    NetEvent{NetEvent::intro_expiry, 0, service.onion_address, circuit.id, {}});
    return Cell{CellKind::INTRO_ESTABLISHED, circuit.id, {std::nullopt, {}, {}, service.onion_address}};
  }

  std::span<const IntroRegistration> intro_points(const std::string& onion_address) const {
    auto it = services_.find(onion_address);
    if (it == services_.end()) return {};
    return it->second.intro_points;
  }

  const Circuit* circuit(CircuitId id) const {
    auto it = circuits_.find(id);
    return it == circuits_.end() ? nullptr : &it->second;
  }

  const Circuit& current_intro_circuit(const std::string& onion_address, RelayIndex intro_point) const {
    for (const auto& reg : intro_points(onion_address))
      if (reg.intro_point == intro_point) return circuits_.at(reg.circuit);
    throw ProtocolError("intro point not registered for " + onion_address);
  }

  // Rebuilds the internal hops (M1, M0, EG) of every intro circuit of the
  // service at a fixed interval, keeping the introduction point.
  void enable_internal_rebuild(const std::string& onion_address, Duration interval) {
    if (interval <= Duration::zero()) throw UsageError("rebuild interval must be positive");
    rebuild_interval_[onion_address] = interval;
    queue_.schedule(now() + interval, EventKind::circuit_expiry,
                    NetEvent{NetEvent::intro_rebuild, 0, onion_address, 0, {}});
  }

  std::size_t rebuild_count() const { return rebuilds_; }

  HandshakeTranscript client_connect(const Client& client, const std::string& onion_address,
                                     const ConnectHooks& hooks = {},
                                     std::optional<RelayIndex> intro_point = std::nullopt) {
    auto svc = services_.find(onion_address);
    if (svc == services_.end() || svc->second.intro_points.empty())
      throw ProtocolError("no introduction point registered for " + onion_address);
    const IntroRegistration* reg = &svc->second.intro_points.front();
    if (intro_point) {
      auto it = std::find_if(svc->second.intro_points.begin(), svc->second.intro_points.end(),
                             [&](const IntroRegistration& r) { return r.intro_point == *intro_point; });
      if (it == svc->second.intro_points.end()) throw ProtocolError("intro point not registered");
      reg = &*it;
    }

    const std::uint64_t id = ++connect_serial_;
    Connect& c = connects_[id];
    c.client = client;
    c.onion_address = onion_address;
    c.intro_point = reg->intro_point;
    c.hooks = hooks;
    c.cookie = token("cookie");
    c.gx = token("gx");

    const CircuitSpec rend_spec = CircuitSpec::rendezvous();
    c.rend_circuit = selector_->sample_circuit(rend_spec, *rng_, now());
    c.transcript.rendezvous_circuit_id = c.rend_circuit.id;
    const std::optional<RelayIndex> ip_pin[] = {std::nullopt, std::nullopt, reg->intro_point};
    c.intro_client_circuit = selector_->sample_circuit(CircuitSpec::general_stream(), *rng_, now(), ip_pin);

    std::vector<Duration> out_links(3), back_links(3);
    for (auto& d : out_links) d = sample_link_latency(config_, *rng_);
    for (auto& d : back_links) d = sample_link_latency(config_, *rng_);
    const auto route = client_route(c, c.rend_circuit);
    const SimTime at_rp = relay_along(route, now(), out_links, aux_sink());
    send(at_rp, id, NetEvent::est_rend_at_rp,
         Cell{CellKind::ESTABLISH_RENDEZVOUS, c.rend_circuit.id, {std::nullopt, c.cookie, {}, {}}});
    c.back_links = std::move(back_links);

    while (!connects_.at(id).done) {
      if (!queue_.step([this](const auto& ev) { dispatch(ev); }))
        throw ProtocolError("event queue drained before the handshake completed");
    }
    HandshakeTranscript out = connects_.at(id).transcript;
    connects_.erase(id);
    return out;
  }

 private:
  struct NetEvent {
    enum What : std::uint8_t {
      est_rend_at_rp,
      rend_established_at_client,
      introduce1_at_ip,
      introduce2_at_service,
      ack_at_client,
      rendezvous1_at_rp,
      rendezvous2_at_client,
      timeout,
      intro_expiry,
      intro_rebuild,
    };
    What what = timeout;
    std::uint64_t connect = 0;
    std::string onion_address;
    CircuitId circuit = 0;
    Cell cell;
  };

  struct Connect {
    Client client;
    std::string onion_address;
    RelayIndex intro_point;
    ConnectHooks hooks;
    std::string cookie;
    std::string gx;
    std::string gy;
    Circuit rend_circuit;
    Circuit intro_client_circuit;
    Circuit service_rend_circuit;
    std::vector<Duration> back_links;
    WindowLatencies window;
    CircuitId intro_circuit = 0;
    HandshakeTranscript transcript;
    bool done = false;
  };

  struct ServiceRecord {
    OnionService service;
    std::vector<IntroRegistration> intro_points;
  };

  std::string token(const char* tag) {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out = std::string(tag) + ":";
    for (int i = 0; i < 20; ++i) out.push_back(kDigits[(*rng_)() & 0x0f]);
    return out;
  }

  std::vector<Endpoint> client_route(const Connect& c, const Circuit& circ) const {
    std::vector<Endpoint> route{Endpoint{std::nullopt, c.client.address}};
    for (RelayIndex r : circ.hops) route.push_back(relay_endpoint(*snapshot_, r));
    return route;
  }

  ObservationSink* aux_sink() const { return config_.trace_auxiliary_cells ? sink_ : nullptr; }

  void send(SimTime at, std::uint64_t connect, NetEvent::What what, Cell cell) {
    queue_.schedule(at, EventKind::cell_delivery, NetEvent{what, connect, {}, cell.circuit_id, std::move(cell)});
  }

  void finish(Connect& c, bool success, std::string failure = {}) {
    if (c.done) return;
    c.done = true;
    c.transcript.success = success;
    c.transcript.failure = std::move(failure);
    if (success) {
      c.transcript.t_rendezvous2 = now();
      if (c.hooks.on_rendezvous2) c.hooks.on_rendezvous2(now());
    } else if (c.hooks.on_failure) {
      c.hooks.on_failure(now());
    }
  }

  void dispatch(const Event<NetEvent>& ev) {
    const NetEvent& e = ev.payload;
    switch (e.what) {
      case NetEvent::intro_expiry: on_intro_expiry(e); return;
      case NetEvent::intro_rebuild: on_intro_rebuild(e); return;
      default: break;
    }
    auto it = connects_.find(e.connect);
    if (it == connects_.end() || it->second.done) return;
    Connect& c = it->second;
    switch (e.what) {
      case NetEvent::est_rend_at_rp: {
        std::vector<Endpoint> route = client_route(c, c.rend_circuit);
        std::reverse(route.begin(), route.end());
        const SimTime at = relay_along(route, now(), c.back_links, aux_sink());
        send(at, e.connect, NetEvent::rend_established_at_client,
             Cell{CellKind::RENDEZVOUS_ESTABLISHED, c.rend_circuit.id, {}});
        return;
      }
      case NetEvent::rend_established_at_client: {
        if (c.hooks.before_introduce1) c.hooks.before_introduce1(now());
        c.transcript.t_introduce1 = now();
        c.window = sample_window_latencies(config_, *rng_);
        queue_.schedule(now() + config_.handshake_timeout, EventKind::trial_timeout,
                        NetEvent{NetEvent::timeout, e.connect, {}, 0, {}});
        const auto route = client_route(c, c.intro_client_circuit);
        const SimTime at = relay_along(route, now(), std::span(c.window.critical).subspan(0, 3), aux_sink());
        send(at, e.connect, NetEvent::introduce1_at_ip,
             Cell{CellKind::INTRODUCE1, c.intro_client_circuit.id,
                  {c.rend_circuit.hops.back(), c.cookie, c.gx, c.onion_address}});
        return;
      }
      case NetEvent::introduce1_at_ip: {
        const auto& reg_list = services_.at(c.onion_address).intro_points;
        auto reg = std::find_if(reg_list.begin(), reg_list.end(),
                                [&](const IntroRegistration& r) { return r.intro_point == c.intro_point; });
        if (reg == reg_list.end() || !circuits_.contains(reg->circuit)) {
          finish(c, false, "intro point has no live circuit for the service");
          return;
        }
        const Circuit& intro = circuits_.at(reg->circuit);
        c.intro_circuit = intro.id;
        c.transcript.intro_circuit_id = intro.id;
        const auto& svc = services_.at(c.onion_address).service;
        auto fwd = forward_introduce2(*snapshot_, intro, svc.address, now(),
                                      std::span(c.window.critical).subspan(3, 4));
        if (sink_)
          for (const auto& obs : fwd.observations)
            if (sink_->monitors(obs.at_relay)) sink_->observe(obs);
        // INTRODUCE_ACK back to the client; the client then tears down its
        // intro-point circuit.
        std::vector<Endpoint> back = client_route(c, c.intro_client_circuit);
        std::reverse(back.begin(), back.end());
        const SimTime ack_at = relay_along(back, now(), c.window.ack, aux_sink());
        send(ack_at, e.connect, NetEvent::ack_at_client, Cell{CellKind::INTRODUCE_ACK, c.intro_client_circuit.id, {}});
        if (!fwd.delivered) {
          finish(c, false, "introduction circuit expired while forwarding INTRODUCE2");
          return;
        }
        send(fwd.arrival, e.connect, NetEvent::introduce2_at_service,
             Cell{CellKind::INTRODUCE2, intro.id, e.cell.payload});
        return;
      }
      case NetEvent::ack_at_client:
        c.intro_client_circuit.expires_at = now();
        return;
      case NetEvent::introduce2_at_service: {
        auto ci = circuits_.find(c.intro_circuit);
        if (ci == circuits_.end() || !ci->second.alive_at(now())) {
          finish(c, false, "introduction circuit torn down before INTRODUCE2 arrived");
          return;
        }
        const Circuit& intro = ci->second;
        const RelayIndex rp = *e.cell.payload.rendezvous_point;
        const RelayIndex guard = intro.hops[intro_hop::entry_guard];
        const RelayIndex vanguard = intro.hops[intro_hop::vanguard];
        if (rp == guard || rp == vanguard) {
          finish(c, false, "rendezvous point collides with the service's guard layer");
          return;
        }
        // Vanguard-Lite: the service reaches the rendezvous point through its
        // guard and vanguard plus one fresh middle.
        const RelayIndex taken[] = {guard, vanguard, rp};
        const RelayIndex middle = selector_->draw(Role::middle, taken, *rng_);
        const auto& svc = services_.at(c.onion_address).service;
        std::vector<Endpoint> route{Endpoint{std::nullopt, svc.address}, relay_endpoint(*snapshot_, guard),
                                    relay_endpoint(*snapshot_, vanguard), relay_endpoint(*snapshot_, middle),
                                    relay_endpoint(*snapshot_, rp)};
        c.gy = token("gy");
        const std::string cookie = config_.corrupt_cookie ? token("cookie") : e.cell.payload.cookie;
        const SimTime at = relay_along(route, now(), std::span(c.window.critical).subspan(7, 4), aux_sink());
        send(at, e.connect, NetEvent::rendezvous1_at_rp,
             Cell{CellKind::RENDEZVOUS1, 0, {std::nullopt, cookie, c.gy, {}}});
        return;
      }
      case NetEvent::rendezvous1_at_rp: {
        if (e.cell.payload.cookie != c.cookie) {
          finish(c, false, "rendezvous cookie mismatch");
          return;
        }
        c.cookie.clear();  // the rendezvous point removes the cookie once used
        std::vector<Endpoint> route = client_route(c, c.rend_circuit);
        std::reverse(route.begin(), route.end());
        const SimTime at = relay_along(route, now(), std::span(c.window.critical).subspan(11, 3), aux_sink());
        send(at, e.connect, NetEvent::rendezvous2_at_client,
             Cell{CellKind::RENDEZVOUS2, c.rend_circuit.id, {std::nullopt, {}, e.cell.payload.handshake, {}}});
        return;
      }
      case NetEvent::rendezvous2_at_client:
        if (e.cell.payload.handshake != c.gy) {
          finish(c, false, "handshake confirmation mismatch");
          return;
        }
        finish(c, true);
        return;
      case NetEvent::timeout:
        finish(c, false, "handshake timed out");
        return;
      default:
        return;
    }
  }

  void replace_intro_circuit(const std::string& onion_address, CircuitId old_id, bool keep_guard_layer) {
    auto& rec = services_.at(onion_address);
    auto reg = std::find_if(rec.intro_points.begin(), rec.intro_points.end(),
                            [&](const IntroRegistration& r) { return r.circuit == old_id; });
    if (reg == rec.intro_points.end()) return;
    const Circuit old = circuits_.at(old_id);
    circuits_.erase(old_id);
    Circuit next;
    if (keep_guard_layer) {
      IntroPins pins{old.hops[intro_hop::entry_guard], old.hops[intro_hop::vanguard], std::nullopt,
                     old.hops[intro_hop::intro_point]};
      next = selector_->build_intro_circuit(pins, *rng_, now());
    } else {
      const Duration remaining = old.expires_at - now();
      const std::optional<RelayIndex> pins[] = {std::nullopt, std::nullopt, std::nullopt,
                                                old.hops[intro_hop::intro_point]};
      next = selector_->sample_circuit(CircuitSpec::intro_service_side(remaining), *rng_, now(), pins);
    }
    reg->circuit = next.id;
    circuits_[next.id] = next;
    queue_.schedule(next.expires_at, EventKind::circuit_expiry,
                      NetEvent{NetEvent::intro_expiry, 0, onion_address, next.id, {}});
  }

  void on_intro_expiry(const NetEvent& e) {
    if (!circuits_.contains(e.circuit)) return;  // already replaced
    replace_intro_circuit(e.onion_address, e.circuit, true);
  }

  void on_intro_rebuild(const NetEvent& e) {
    auto& rec = services_.at(e.onion_address);
    std::vector<CircuitId> ids;
    for (const auto& reg : rec.intro_points) ids.push_back(reg.circuit);
    for (CircuitId id : ids) {
      const Circuit& c = circuits_.at(id);
      if (c.expires_at <= now()) continue;  // natural expiry handles it
      replace_intro_circuit(e.onion_address, id, false);
      ++rebuilds_;
    }
    queue_.schedule(now() + rebuild_interval_.at(e.onion_address), EventKind::circuit_expiry,
                    NetEvent{NetEvent::intro_rebuild, 0, e.onion_address, 0, {}});
  }

  const RelaySnapshot* snapshot_;
  PathSelector* selector_;
  Rng* rng_;
  ProtocolConfig config_;
  ObservationSink* sink_ = nullptr;
  EventQueue<NetEvent> queue_;
  std::map<std::string, ServiceRecord> services_;
  std::map<CircuitId, Circuit> circuits_;
  std::map<std::string, Duration> rebuild_interval_;
  std::map<std::uint64_t, Connect> connects_;
  std::uint64_t connect_serial_ = 0;
  std::size_t rebuilds_ = 0;
};

}  // namespace introsim
