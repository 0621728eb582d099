#pragma once

#include <array>
#include <atomic>
#include <bit>
#include <cstdint>
#include <cstring>
#include <memory>
#include <optional>
#include <type_traits>

#include "abcycle/types.hpp"

namespace abcycle {

// Single-producer history ring with seqlock reads. Entry i is stamped with i;
// push never waits for readers, readers detect being lapped.
template <typename T>
class stamped_ring {
  static_assert(std::is_trivially_copyable_v<T>);
  static constexpr std::size_t words = (sizeof(T) + 7) / 8;

  struct alignas(64) entry {
    std::atomic<std::uint64_t> stamp{never_written};
    std::array<std::atomic<std::uint64_t>, words> data{};
  };

 public:
  explicit stamped_ring(std::size_t capacity) : capacity_(capacity), mask_(capacity - 1) {
    if (capacity < 2 || !std::has_single_bit(capacity)) throw config_error("stamped_ring capacity must be a power of two");
    entries_ = std::make_unique<entry[]>(capacity);
  }

  // index must be last_index() + 1
  void push(std::uint64_t index, const T& value) noexcept {
    auto& e = entries_[index & mask_];
    e.stamp.store(index, std::memory_order_release);
    std::atomic_thread_fence(std::memory_order_release);
    std::array<std::uint64_t, words> buf{};
    std::memcpy(buf.data(), &value, sizeof(T));
    for (std::size_t i = 0; i < words; ++i) e.data[i].store(buf[i], std::memory_order_relaxed);
    last_.store(index, std::memory_order_release);
  }

  std::uint64_t last_index() const noexcept { return last_.load(std::memory_order_acquire); }

  std::optional<T> try_read(std::uint64_t index) const noexcept {
    if (index == 0 || index > last_index()) return std::nullopt;
    const auto& e = entries_[index & mask_];
    const auto before = e.stamp.load(std::memory_order_acquire);
    if (before != index) return std::nullopt;
    std::array<std::uint64_t, words> buf;
    for (std::size_t i = 0; i < words; ++i) buf[i] = e.data[i].load(std::memory_order_relaxed);
    std::atomic_thread_fence(std::memory_order_acquire);
    if (e.stamp.load(std::memory_order_relaxed) != before) return std::nullopt;
    T out;
    std::memcpy(static_cast<void*>(&out), buf.data(), sizeof(T));
    return out;
  }

  std::size_t capacity() const noexcept { return capacity_; }

 private:
  std::size_t capacity_;
  std::size_t mask_;
  std::unique_ptr<entry[]> entries_;
  std::atomic<std::uint64_t> last_{0};
};

}  // namespace abcycle
