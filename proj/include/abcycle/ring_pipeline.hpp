// -----------------------------------------------------------------------------
// ring_pipeline: bounded shared ring of per-cycle frames with per-stage
// sequence barriers.
//
// Stages 1..3 are synchronous and advance strictly in barrier order
// (completed[s] <= completed[s-1] <= produced). Stage 4 consumers never hold
// the producer back: they read slots transactionally and detect when the
// producer re-claimed the slot underneath them.
//
// Slot protocol (one-sided seqlock):
//   claim(c):   stamp <- c (store-release + release fence), then frame words
//               are written by stages 1 and 2.
//   reader:     s1 <- stamp (acquire); bound <- completed[3] (acquire);
//               copy words (relaxed); acquire fence; s2 <- stamp.
//               valid iff s1 == s2 && s1 <= bound.
// A stamp is only trusted once stage 3 published it, so a valid read always
// sees a fully written frame of exactly one cycle.
//
// Notes:
//   - capacity must be a power of two >= 2
//   - single producer (the stage-1 input task)
//   - claim() is wait-free: a fixed number of atomic steps, no loops
// -----------------------------------------------------------------------------
#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <bit>
#include <cstdint>
#include <cstring>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "abcycle/types.hpp"

namespace abcycle {

enum class access_mode : std::uint8_t { read_only, read_write };

struct task_handle {
  std::string id;
  stage_id stage = stage_id::async;
  access_mode access = access_mode::read_only;
  bool producer = false;
};

struct stage_graph {
  std::vector<stage_id> stages{stage_id::input, stage_id::control, stage_id::output, stage_id::async};
  std::vector<task_handle> tasks;

  // Four canonical stages with a single input producer.
  static stage_graph canonical(std::string producer_id = "input") {
    stage_graph g;
    g.tasks.push_back({std::move(producer_id), stage_id::input, access_mode::read_write, true});
    return g;
  }

  const task_handle* find(std::string_view id) const noexcept {
    for (const auto& t : tasks)
      if (t.id == id) return &t;
    return nullptr;
  }

  std::vector<const task_handle*> tasks_in(stage_id s) const {
    std::vector<const task_handle*> out;
    for (const auto& t : tasks)
      if (t.stage == s) out.push_back(&t);
    return out;
  }

  void validate() const {
    const std::vector<stage_id> expected{stage_id::input, stage_id::control, stage_id::output, stage_id::async};
    if (stages != expected) throw config_error("stage graph must contain exactly the four canonical stages");
    std::size_t producers = 0;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      const auto& t = tasks[i];
      if (t.id.empty()) throw config_error("task id must not be empty");
      for (std::size_t j = i + 1; j < tasks.size(); ++j)
        if (tasks[j].id == t.id) throw config_error("duplicate task id '" + t.id + "'");
      if (t.producer) {
        if (t.stage != stage_id::input) throw config_error("producer task '" + t.id + "' must be in stage 1");
        ++producers;
      } else if (t.stage == stage_id::input) {
        throw config_error("stage 1 holds only the producer; '" + t.id + "' is not one");
      }
      if (to_int(t.stage) >= 3 && t.access != access_mode::read_only)
        throw config_error("task '" + t.id + "' in stage " + std::to_string(to_int(t.stage)) + " must be read-only");
    }
    if (producers != 1) throw config_error("stage graph needs exactly one producer task, found " + std::to_string(producers));
  }
};

struct graph_delta {
  std::vector<task_handle> add;
  std::vector<std::string> remove;

  bool empty() const noexcept { return add.empty() && remove.empty(); }
};

struct sequence_set {
  cycle_index produced = 0;
  std::array<cycle_index, 5> completed{};  // index 1..4; [0] unused

  bool monotone() const noexcept {
    return completed[1] <= produced && completed[2] <= completed[1] && completed[3] <= completed[2] &&
           completed[4] <= completed[3];
  }
};

template <typename Frame>
class ring_pipeline {
  static_assert(std::is_trivially_copyable_v<Frame>, "frames travel through word storage");

  static constexpr std::size_t cache_line = 64;
  static constexpr std::size_t frame_words = (sizeof(Frame) + sizeof(std::uint64_t) - 1) / sizeof(std::uint64_t);
  // last word holds the integrity checksum of the frame
  static constexpr std::size_t slot_words = frame_words + 1;

  struct alignas(cache_line) slot {
    std::atomic<cycle_index> stamp{never_written};
    std::array<std::atomic<std::uint64_t>, slot_words> words{};
  };

  struct alignas(cache_line) padded_counter {
    std::atomic<cycle_index> value{0};
  };

 public:
  struct read_txn {
    slot_position position = 0;
    cycle_index observed_stamp = never_written;
    cycle_index readable_bound = 0;
  };

  struct frame_copy {
    Frame frame{};
    std::uint64_t checksum = 0;
    bool checksum_ok = false;
  };

  class frame_writer {
   public:
    const std::string& task() const noexcept { return task_; }
    stage_id stage() const noexcept { return stage_; }

   private:
    friend class ring_pipeline;
    frame_writer(std::string task, stage_id stage) : task_(std::move(task)), stage_(stage) {}
    std::string task_;
    stage_id stage_;
  };

  ring_pipeline(std::size_t capacity, stage_graph graph)
      : capacity_(checked_capacity(capacity)), mask_(capacity - 1), graph_(std::move(graph)) {
    graph_.validate();
    slots_ = std::make_unique<slot[]>(capacity_);
  }

  ring_pipeline(const ring_pipeline&) = delete;
  ring_pipeline& operator=(const ring_pipeline&) = delete;

  std::size_t capacity() const noexcept { return capacity_; }
  slot_position position_of(cycle_index c) const noexcept { return c & mask_; }
  const stage_graph& graph() const noexcept { return graph_; }

  // Reserve the slot for `cycle`. Never looks at stage-4 readers.
  slot_position claim(cycle_index cycle) {
    std::uint64_t steps = 0;
    const cycle_index produced = produced_.value.load(std::memory_order_relaxed);
    ++steps;
    if (cycle != produced + 1)
      throw protocol_error("claim out of order: cycle " + std::to_string(cycle) + " after " + std::to_string(produced));
    const cycle_index done = completed_[3].value.load(std::memory_order_acquire);
    ++steps;
    if (cycle > capacity_ && done < cycle - capacity_)
      throw protocol_error("claim would overwrite cycle " + std::to_string(cycle - capacity_) +
                           " before synchronous stages finished it");
    auto& s = slots_[cycle & mask_];
    s.stamp.store(cycle, std::memory_order_release);
    std::atomic_thread_fence(std::memory_order_release);
    ++steps;
    produced_.value.store(cycle, std::memory_order_release);
    ++steps;
    last_claim_steps_.store(steps, std::memory_order_relaxed);
    return cycle & mask_;
  }

  void publish_stage(stage_id stage, cycle_index cycle) {
    const int s = to_int(stage);
    auto& mine = completed_[s].value;
    const cycle_index current = mine.load(std::memory_order_relaxed);
    if (cycle != current + 1)
      throw protocol_error("stage " + std::to_string(s) + " publishes cycle " + std::to_string(cycle) +
                           " but last completed " + std::to_string(current));
    const cycle_index upstream =
        s == 1 ? produced_.value.load(std::memory_order_acquire) : completed_[s - 1].value.load(std::memory_order_acquire);
    if (cycle > upstream)
      throw protocol_error("stage " + std::to_string(s) + " cannot publish cycle " + std::to_string(cycle) +
                           " ahead of its upstream (" + std::to_string(upstream) + ")");
    mine.store(cycle, std::memory_order_release);
  }

  cycle_index produced() const noexcept { return produced_.value.load(std::memory_order_acquire); }
  cycle_index completed(stage_id s) const noexcept { return completed_[to_int(s)].value.load(std::memory_order_acquire); }

  sequence_set sequences() const noexcept {
    // Read downstream first so the snapshot never shows a stage ahead of its upstream.
    sequence_set out;
    for (int s = 4; s >= 1; --s) out.completed[s] = completed_[s].value.load(std::memory_order_acquire);
    out.produced = produced_.value.load(std::memory_order_acquire);
    return out;
  }

  std::uint64_t last_claim_steps() const noexcept { return last_claim_steps_.load(std::memory_order_relaxed); }

  // --- synchronous stage access ---------------------------------------------

  frame_writer writer(std::string_view task_id) const {
    const task_handle* t = graph_.find(task_id);
    if (!t) throw config_error("unknown task '" + std::string(task_id) + "'");
    if (t->access != access_mode::read_write || to_int(t->stage) > 2)
      throw protocol_error("task '" + t->id + "' has no write permission");
    return frame_writer(t->id, t->stage);
  }

  void store(const frame_writer& w, cycle_index cycle, const Frame& frame) {
    const task_handle* t = graph_.find(w.task_);
    if (!t || t->access != access_mode::read_write)
      throw protocol_error("writer '" + w.task_ + "' no longer holds write permission");
    auto& s = slots_[cycle & mask_];
    if (s.stamp.load(std::memory_order_relaxed) != cycle)
      throw protocol_error("store to cycle " + std::to_string(cycle) + " which is not claimed");
    if (completed_[to_int(w.stage_)].value.load(std::memory_order_relaxed) >= cycle)
      throw protocol_error("stage " + std::to_string(to_int(w.stage_)) + " already published cycle " +
                           std::to_string(cycle));
    std::array<std::uint64_t, slot_words> buf{};
    std::memcpy(buf.data(), &frame, sizeof(Frame));
    buf[frame_words] = checksum_of(frame);
    for (std::size_t i = 0; i < slot_words; ++i) s.words[i].store(buf[i], std::memory_order_relaxed);
    writes_[to_int(w.stage_)].fetch_add(1, std::memory_order_relaxed);
  }

  // Direct load for synchronous stages; ordering comes from the stage barriers.
  Frame load(cycle_index cycle) const {
    const auto& s = slots_[cycle & mask_];
    if (s.stamp.load(std::memory_order_acquire) != cycle)
      throw protocol_error("load of cycle " + std::to_string(cycle) + " which the slot no longer holds");
    return copy_words(s).frame;
  }

  std::uint64_t writes_by_stage(stage_id s) const noexcept { return writes_[to_int(s)].load(std::memory_order_relaxed); }

  // --- transactional reads ---------------------------------------------------

  read_txn begin_read(slot_position position) const noexcept {
    const auto& s = slots_[position & mask_];
    read_txn txn;
    txn.position = position & mask_;
    txn.observed_stamp = s.stamp.load(std::memory_order_acquire);
    txn.readable_bound = completed_[3].value.load(std::memory_order_acquire);
    return txn;
  }

  frame_copy read(const read_txn& txn) const noexcept { return copy_words(slots_[txn.position]); }

  bool end_read(const read_txn& txn) const noexcept {
    std::atomic_thread_fence(std::memory_order_acquire);
    const cycle_index again = slots_[txn.position].stamp.load(std::memory_order_relaxed);
    return again == txn.observed_stamp && txn.observed_stamp != never_written &&
           txn.observed_stamp <= txn.readable_bound;
  }

  // Convenience: read one specific cycle; nullopt if it is gone or not finished.
  std::optional<Frame> try_read(cycle_index cycle) const noexcept {
    const auto txn = begin_read(position_of(cycle));
    if (txn.observed_stamp != cycle) return std::nullopt;
    auto copy = read(txn);
    if (!end_read(txn)) return std::nullopt;
    return copy.frame;
  }

  // --- reconfiguration (preparation window only) ----------------------------

  void reconfigure(const graph_delta& delta) {
    if (delta.empty()) return;
    if (completed_[3].value.load(std::memory_order_acquire) != produced_.value.load(std::memory_order_acquire))
      throw protocol_error("reconfigure while a synchronous stage is mid-cycle");
    stage_graph next = graph_;
    for (const auto& id : delta.remove) {
      auto it = std::find_if(next.tasks.begin(), next.tasks.end(), [&](const task_handle& t) { return t.id == id; });
      if (it == next.tasks.end()) throw config_error("cannot remove unknown task '" + id + "'");
      if (it->producer) throw config_error("cannot remove the producer task '" + id + "'");
      next.tasks.erase(it);
    }
    for (const auto& t : delta.add) next.tasks.push_back(t);
    next.validate();
    graph_ = std::move(next);
  }

  static std::uint64_t checksum_of(const Frame& frame) noexcept {
    // FNV-1a over the object representation
    std::array<unsigned char, sizeof(Frame)> bytes;
    std::memcpy(bytes.data(), &frame, sizeof(Frame));
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 1099511628211ull;
    }
    return h;
  }

  // Diagnostic slot table.
  std::string dump() const {
    const auto seq = sequences();
    std::ostringstream os;
    os << "ring_pipeline capacity=" << capacity_ << " produced=" << seq.produced;
    for (int s = 1; s <= 4; ++s) os << " stage" << s << "=" << seq.completed[s];
    os << "\n";
    os << "tasks:";
    for (const auto& t : graph_.tasks)
      os << " " << t.id << "@" << to_int(t.stage) << (t.access == access_mode::read_write ? "(rw)" : "(ro)");
    os << "\nslot stamp\n";
    for (std::size_t i = 0; i < capacity_; ++i) {
      const auto st = slots_[i].stamp.load(std::memory_order_acquire);
      os << i << " ";
      if (st == never_written)
        os << "-";
      else
        os << st;
      os << "\n";
    }
    return os.str();
  }

 private:
  static std::size_t checked_capacity(std::size_t capacity) {
    if (capacity < 2 || !std::has_single_bit(capacity))
      throw config_error("ring capacity must be a power of two >= 2, got " + std::to_string(capacity));
    return capacity;
  }

  frame_copy copy_words(const slot& s) const noexcept {
    std::array<std::uint64_t, slot_words> buf;
    for (std::size_t i = 0; i < slot_words; ++i) buf[i] = s.words[i].load(std::memory_order_relaxed);
    frame_copy out;
    std::memcpy(static_cast<void*>(&out.frame), buf.data(), sizeof(Frame));
    out.checksum = buf[frame_words];
    out.checksum_ok = out.checksum == checksum_of(out.frame);
    return out;
  }

  std::size_t capacity_;
  std::size_t mask_;
  stage_graph graph_;
  std::unique_ptr<slot[]> slots_;
  padded_counter produced_;
  std::array<padded_counter, 5> completed_{};
  std::array<std::atomic<std::uint64_t>, 5> writes_{};
  std::atomic<std::uint64_t> last_claim_steps_{0};
};

}  // namespace abcycle
