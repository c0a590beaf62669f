#pragma once

#include <cstdint>
#include <stdexcept>

namespace iaxkad {

/// Simulated time in milliseconds.
using SimTime = std::int64_t;

constexpr SimTime kMillisecond = 1;
constexpr SimTime kSecond = 1000;
constexpr SimTime kMinute = 60 * kSecond;
constexpr SimTime kHour = 60 * kMinute;

/// Overlay tuning knobs shared by every node in a network.
struct KademliaParams {
  int alpha = 3;        // parallel query fan-out
  int bits = 160;       // key width B
  int k = 20;           // bucket capacity
  SimTime offline_expiry_ms = 24 * kHour;
  SimTime purge_interval_ms = 60 * kSecond;

  void validate() const {
    if (alpha < 1) throw std::invalid_argument("alpha must be >= 1");
    if (k < 1) throw std::invalid_argument("k must be >= 1");
    if (bits < 8 || bits > 256)
      throw std::invalid_argument("bits must be in [8, 256]");
    if (offline_expiry_ms <= 0)
      throw std::invalid_argument("offline_expiry_ms must be positive");
    if (purge_interval_ms <= 0)
      throw std::invalid_argument("purge_interval_ms must be positive");
  }
};

}  // namespace iaxkad
