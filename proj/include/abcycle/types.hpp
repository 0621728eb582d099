#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace abcycle {

using cycle_index = std::uint64_t;
using slot_position = std::uint64_t;
using service_id = std::uint32_t;
using asset_id = std::uint32_t;
using nanos = std::chrono::nanoseconds;
using micros = std::chrono::microseconds;

// Reserved stamp for slots that were never claimed; no valid read can observe it.
inline constexpr cycle_index never_written = std::numeric_limits<cycle_index>::max();
inline constexpr service_id no_service = 0;

enum class stage_id : std::uint8_t { input = 1, control = 2, output = 3, async = 4 };

inline constexpr int to_int(stage_id s) noexcept { return static_cast<int>(s); }

inline stage_id stage_from_int(int s) {
  if (s < 1 || s > 4) throw std::invalid_argument("stage out of range: " + std::to_string(s));
  return static_cast<stage_id>(s);
}

enum class priority_class : std::uint8_t { p1 = 1, p2 = 2 };

inline const char* to_string(priority_class p) noexcept { return p == priority_class::p1 ? "P1" : "P2"; }

// Invalid static configuration (capacity, graph shape, duplicate ids, ...).
class config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operation invoked out of order or from the wrong context.
class protocol_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// signal_frame: one cycle's worth of operation data carried through the ring.
// Fixed layout, trivially copyable, so it can be moved through the seqlock
// word storage without constructors.
// ---------------------------------------------------------------------------
inline constexpr std::size_t max_assets = 4;
inline constexpr std::size_t max_services = 8;

namespace frame_flags {
inline constexpr std::uint32_t held = 1u << 0;        // applied output re-used from the previous cycle
inline constexpr std::uint32_t fault = 1u << 1;       // designated service produced no usable output
inline constexpr std::uint32_t overrun = 1u << 2;     // forwarding started after the cycle deadline
inline constexpr std::uint32_t late = 1u << 3;        // service output arrived after the stage-2 window
}  // namespace frame_flags

struct service_output {
  service_id service = no_service;
  asset_id asset = 0;
  double value = 0.0;
  std::uint32_t flags = 0;
  std::uint32_t reserved = 0;
};

struct applied_output {
  double value = 0.0;
  service_id source = no_service;
  std::uint32_t flags = 0;
};

struct signal_frame {
  cycle_index cycle = 0;
  std::uint32_t asset_count = 0;
  std::uint32_t output_count = 0;
  std::array<double, max_assets> measurement{};  // sensed value per asset (y)
  std::array<double, max_assets> plant_state{};  // true plant state (x), simulation only
  std::array<service_output, max_services> outputs{};
  std::array<applied_output, max_assets> applied{};
  std::uint64_t flags = 0;

  const service_output* output_of(service_id id) const noexcept {
    for (std::uint32_t i = 0; i < output_count; ++i)
      if (outputs[i].service == id) return &outputs[i];
    return nullptr;
  }
};

static_assert(std::is_trivially_copyable_v<signal_frame>);

}  // namespace abcycle
