#pragma once

// Monitored-relay tap: START/STOP windowed capture of outbound destination
// addresses, pseudonymized on arrival. Only pseudonyms are kept; no
// timestamps, counts or source addresses.

#include <introsim/common.hpp>
#include <introsim/simcore.hpp>

#include <nlohmann/json.hpp>
#include <openssl/crypto.h>
#include <openssl/evp.h>
#include <openssl/hmac.h>
#include <openssl/rand.h>

#include <array>
#include <cstring>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace introsim {

class Pseudonym {
 public:
  static constexpr std::size_t kSize = 32;
  using Bytes = std::array<std::uint8_t, kSize>;

  Pseudonym() = default;
  explicit Pseudonym(const Bytes& bytes) : bytes_(bytes) {}

  const Bytes& bytes() const { return bytes_; }

  std::string hex() const {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out;
    out.reserve(kSize * 2);
    for (std::uint8_t b : bytes_) {
      out.push_back(kDigits[b >> 4]);
      out.push_back(kDigits[b & 0x0f]);
    }
    return out;
  }

  friend auto operator<=>(const Pseudonym&, const Pseudonym&) = default;

 private:
  Bytes bytes_{};
};

}  // namespace introsim

template <>
struct std::hash<introsim::Pseudonym> {
  std::size_t operator()(const introsim::Pseudonym& p) const noexcept {
    std::size_t h;
    std::memcpy(&h, p.bytes().data(), sizeof h);
    return h;
  }
};

namespace introsim {

using PseudonymSet = std::unordered_set<Pseudonym>;

// Ephemeral per-run key. Move-only, wiped on destruction, never serialized.
class PseudonymKey {
 public:
  static constexpr std::size_t kSize = 32;

  static PseudonymKey generate() {
    PseudonymKey k;
    if (RAND_bytes(k.material_.data(), static_cast<int>(kSize)) != 1)
      throw Error("failed to generate pseudonymization key");
    return k;
  }

  // Test hook: fixed key material for reproducible digests.
  static PseudonymKey from_bytes(std::span<const std::uint8_t, kSize> material) {
    PseudonymKey k;
    std::memcpy(k.material_.data(), material.data(), kSize);
    return k;
  }

  PseudonymKey(PseudonymKey&& other) noexcept : material_(other.material_) { other.wipe(); }
  PseudonymKey& operator=(PseudonymKey&& other) noexcept {
    if (this != &other) {
      material_ = other.material_;
      other.wipe();
    }
    return *this;
  }
  PseudonymKey(const PseudonymKey&) = delete;
  PseudonymKey& operator=(const PseudonymKey&) = delete;
  ~PseudonymKey() { wipe(); }

  std::span<const std::uint8_t, kSize> material() const { return material_; }

 private:
  PseudonymKey() = default;
  void wipe() { OPENSSL_cleanse(material_.data(), kSize); }

  std::array<std::uint8_t, kSize> material_{};
};

// Keyed one-way digest: HMAC-SHA256(key, address).
inline Pseudonym pseudonymize(std::string_view address, const PseudonymKey& key) {
  Pseudonym::Bytes out{};
  unsigned int len = 0;
  const auto material = key.material();
  if (HMAC(EVP_sha256(), material.data(), static_cast<int>(material.size()),
           reinterpret_cast<const unsigned char*>(address.data()), address.size(), out.data(), &len) == nullptr ||
      len != Pseudonym::kSize)
    throw Error("HMAC-SHA256 failed");
  return Pseudonym(out);
}

struct AnonymitySet {
  int stage = 1;
  int trial = 1;
  PseudonymSet members;
  TimeWindow window;

  bool contains(const Pseudonym& p) const { return members.contains(p); }
  std::size_t size() const { return members.size(); }
};

// Debug serialization: stage, trial, window bounds and digests, nothing else.
inline nlohmann::json to_json(const AnonymitySet& set) {
  std::vector<std::string> members;
  members.reserve(set.members.size());
  for (const auto& p : set.members) members.push_back(p.hex());
  std::sort(members.begin(), members.end());
  return nlohmann::json{{"stage", set.stage},
                        {"trial", set.trial},
                        {"window", {to_seconds(set.window.start), to_seconds(set.window.stop)}},
                        {"members", members}};
}

struct CaptureHandle {
  RelayIndex relay;
  std::uint64_t serial = 0;
};

class RelayTap final : public ObservationSink {
 public:
  explicit RelayTap(const PseudonymKey& key) : key_(&key) {}

  CaptureHandle start_window(RelayIndex relay, int stage, int trial, SimTime now) {
    if (open_.contains(relay)) throw UsageError("capture window already open at this relay");
    if (stage < 1 || trial < 1) throw UsageError("stage and trial are 1-based");
    const std::uint64_t serial = ++serial_;
    Capture cap;
    cap.serial = serial;
    cap.set.stage = stage;
    cap.set.trial = trial;
    cap.set.window.start = now;
    open_.emplace(relay, std::move(cap));
    return CaptureHandle{relay, serial};
  }

  AnonymitySet stop_window(const CaptureHandle& handle, SimTime now) {
    auto it = open_.find(handle.relay);
    if (it == open_.end() || it->second.serial != handle.serial)
      throw UsageError("no open capture window for this handle");
    if (now <= it->second.set.window.start) throw UsageError("capture window must have positive length");
    AnonymitySet out = std::move(it->second.set);
    out.window.stop = now;
    open_.erase(it);
    return out;
  }

  SimTime window_start(const CaptureHandle& handle) const { return open_capture(handle).set.window.start; }

  // Drops an open window without producing a set (failed handshake).
  void cancel_window(const CaptureHandle& handle) {
    open_capture(handle);
    open_.erase(handle.relay);
  }

  bool monitors(RelayIndex relay) const override { return open_.contains(relay); }

  void observe(const FlowObservation& obs) override {
    auto it = open_.find(obs.at_relay);
    if (it == open_.end()) return;
    it->second.set.members.insert(pseudonymize(obs.dst, *key_));
  }

  bool any_open() const { return !open_.empty(); }

 private:
  struct Capture {
    std::uint64_t serial = 0;
    AnonymitySet set;
  };

  const Capture& open_capture(const CaptureHandle& handle) const {
    auto it = open_.find(handle.relay);
    if (it == open_.end() || it->second.serial != handle.serial)
      throw UsageError("no open capture window for this handle");
    return it->second;
  }

  const PseudonymKey* key_;
  std::map<RelayIndex, Capture> open_;
  std::uint64_t serial_ = 0;
};

}  // namespace introsim
