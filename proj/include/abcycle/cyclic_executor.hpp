// -----------------------------------------------------------------------------
// cyclic_executor: time-synchronous driver of the four-stage pipeline.
//
// Every cycle c starts at t0(c) = c * T (logical) or epoch + c * T (wall).
// In the preparation window [t0 - t_prep, t0) queued management requests are
// applied; at t0 stages 1 -> 2 -> 3 run in barrier order, stage 4 runs on
// whatever capacity is left.
//
// Priority classes: P1 tasks run on the executor thread; P2 stage-2 tasks get
// exactly one worker. Stage 2 waits for P2 work at most until t0 + window, so a
// P2 task that spins forever never delays P1 forwarding.
//
// Deterministic mode runs everything on the calling thread against a logical
// clock: task costs are their nominal cost plus whatever they charge().
// -----------------------------------------------------------------------------
#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <deque>
#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "abcycle/ring_pipeline.hpp"
#include "abcycle/stamped_ring.hpp"
#include "abcycle/types.hpp"

namespace abcycle {

enum class clock_mode : std::uint8_t { deterministic, wall_clock };
enum class task_mode : std::uint8_t { synchronous, asynchronous };

inline const char* to_string(clock_mode m) noexcept { return m == clock_mode::deterministic ? "deterministic" : "wall-clock"; }

struct cycle_schedule {
  micros period{1000};
  micros prep_offset{100};    // length of the preparation window ending at t0
  micros stage2_window{600};  // offset from t0 after which late P2 outputs are dropped
  clock_mode mode = clock_mode::deterministic;
  std::size_t workers = 4;
  std::size_t prep_queue_depth = 64;

  // t_prep = 10% and the P2 window = 60% of the period.
  static cycle_schedule with_period(micros period, clock_mode mode = clock_mode::deterministic) {
    cycle_schedule s;
    s.period = period;
    s.prep_offset = micros(std::max<std::int64_t>(1, period.count() / 10));
    s.stage2_window = micros(std::max<std::int64_t>(1, period.count() * 6 / 10));
    s.mode = mode;
    return s;
  }

  void validate() const {
    if (period.count() <= 0) throw config_error("cycle period must be positive");
    if (prep_offset.count() <= 0 || prep_offset >= period)
      throw config_error("preparation offset must satisfy 0 < t_prep < T");
    if (stage2_window.count() <= 0 || stage2_window > period)
      throw config_error("stage-2 window must lie within the period");
    if (workers < 2) throw config_error("at least two workers are required (one P1, one P2)");
    if (prep_queue_depth == 0) throw config_error("prep queue depth must be positive");
  }
};

// --- per-cycle metrics -------------------------------------------------------

inline constexpr std::size_t max_timed_tasks = 8;

struct task_timing {
  std::uint32_t tag = 0;
  priority_class priority = priority_class::p1;
  bool ran = false;        // started this cycle
  bool completed = false;  // finished inside its window
  std::int64_t duration_ns = 0;
};

struct cycle_metrics {
  cycle_index cycle = 0;
  std::int64_t t_start_ns = 0;  // scheduled t0 relative to the run epoch
  std::int64_t start_jitter_ns = 0;
  std::array<std::int64_t, 3> stage_ns{};
  bool overrun = false;
  bool deadline_met = true;
  std::uint32_t timing_count = 0;
  std::array<task_timing, max_timed_tasks> timings{};

  const task_timing* timing_for(std::uint32_t tag) const noexcept {
    for (std::uint32_t i = 0; i < timing_count; ++i)
      if (timings[i].tag == tag) return &timings[i];
    return nullptr;
  }
};

static_assert(std::is_trivially_copyable_v<cycle_metrics>);

struct run_report {
  std::vector<cycle_metrics> cycles;
  std::vector<std::int64_t> jitter_ns;  // |start jitter| per cycle, kept even when cycles are not
  std::uint64_t cycles_run = 0;
  std::uint64_t overruns = 0;
  std::uint64_t deadline_misses = 0;
  bool aborted = false;
  std::string abort_reason;

  double deadline_met_ratio() const noexcept {
    return cycles_run == 0 ? 1.0 : double(cycles_run - deadline_misses) / double(cycles_run);
  }

  std::int64_t jitter_percentile(double p) const {
    if (jitter_ns.empty()) return 0;
    auto v = jitter_ns;
    const auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * double(v.size()))) - 1;
    const auto idx = std::min(rank, v.size() - 1);
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(idx), v.end());
    return v[idx];
  }

  void write_csv(std::ostream& os) const {
    os << "cycle,start_jitter_ns,stage1_ns,stage2_ns,stage3_ns,overrun,deadline_met\n";
    for (const auto& m : cycles)
      os << m.cycle << ',' << m.start_jitter_ns << ',' << m.stage_ns[0] << ',' << m.stage_ns[1] << ','
         << m.stage_ns[2] << ',' << (m.overrun ? 1 : 0) << ',' << (m.deadline_met ? 1 : 0) << '\n';
  }
};

// --- management/operation separation ----------------------------------------

namespace detail {
inline thread_local bool on_operation_path = false;
inline thread_local bool in_prep_window = false;

struct operation_path_scope {
  bool previous;
  operation_path_scope() : previous(on_operation_path) { on_operation_path = true; }
  ~operation_path_scope() { on_operation_path = previous; }
};
}  // namespace detail

// Management entry points call this; it throws when reached from a synchronous stage task.
inline void ensure_management_context(const char* what) {
  if (detail::on_operation_path)
    throw protocol_error(std::string("management call '") + what + "' issued from the operation path");
}

inline bool on_operation_path() noexcept { return detail::on_operation_path; }

// --- tasks --------------------------------------------------------------------

struct task_context {
  cycle_index cycle = 0;
  stage_id stage = stage_id::input;
  clock_mode mode = clock_mode::deterministic;
  const signal_frame* frame = nullptr;     // read view of upstream stages
  signal_frame* producer_frame = nullptr;  // stage 1 only
  bool overrun = false;                    // stage 3: forwarding started after the deadline
  nanos charged{0};
  std::uint32_t emitted_count = 0;
  std::array<service_output, 2> emitted{};

  // Model `d` of execution time: logical charge, or an actual spin on the wall clock.
  void charge(nanos d) {
    charged += d;
    if (mode == clock_mode::wall_clock) {
      const auto until = std::chrono::steady_clock::now() + d;
      while (std::chrono::steady_clock::now() < until) {
      }
    }
  }

  void emit(service_id service, asset_id asset, double value, std::uint32_t flags = 0) {
    if (stage != stage_id::control) throw protocol_error("only stage-2 tasks emit control outputs");
    if (emitted_count >= emitted.size()) throw protocol_error("too many outputs from one task");
    emitted[emitted_count++] = service_output{service, asset, value, flags, 0};
  }
};

class cyclic_executor;
struct prep_request;
struct prep_outcome;
using prep_ticket = std::shared_future<prep_outcome>;

struct async_context {
  cycle_index latest = 0;  // newest cycle published by stage 3
  const ring_pipeline<signal_frame>* pipeline = nullptr;
  const stamped_ring<cycle_metrics>* metrics = nullptr;
  cyclic_executor* executor = nullptr;
};

struct task_entry {
  std::string id;
  stage_id stage = stage_id::control;
  priority_class priority = priority_class::p1;
  task_mode mode = task_mode::synchronous;
  micros budget{0};
  std::uint32_t tag = 0;       // caller-defined key echoed in task_timing
  micros nominal_cost{10};     // logical execution time in deterministic mode
  bool producer = false;
  std::function<void(task_context&)> run;
  std::function<void(async_context&)> run_async;
};

struct prep_outcome {
  bool applied = false;
  cycle_index cycle = 0;  // prep window (cycle about to start) that handled it
  std::string reason;
};

struct prep_context {
  cyclic_executor& executor;
  cycle_index cycle;  // the cycle whose preparation window is running
  std::optional<std::string> rejection;

  void reject(std::string why) { rejection = std::move(why); }
};

struct prep_request {
  std::string kind;
  std::function<void(prep_context&)> apply;
  std::optional<cycle_index> not_before;  // keep queued until the prep window of this cycle
};

class backpressure_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct worker_plan {
  std::size_t total = 0;
  std::size_t p1 = 0;
  std::size_t p2 = 0;
};

struct run_options {
  bool keep_cycles = true;
};

class cyclic_executor {
 public:
  using clock = std::chrono::steady_clock;

  cyclic_executor(cycle_schedule schedule, ring_pipeline<signal_frame>& pipeline)
      : schedule_(schedule), pipeline_(pipeline), metrics_(metrics_capacity) {
    schedule_.validate();
    const auto* producer = find_producer(pipeline_.graph());
    producer_id_ = producer->id;
    graph_delta d;
    d.add.push_back({commit_task_id, stage_id::control, access_mode::read_write, false});
    pipeline_.reconfigure(d);
    now_ = [] { return clock::now(); };
  }

  ~cyclic_executor() { stop_threads(); }

  cyclic_executor(const cyclic_executor&) = delete;
  cyclic_executor& operator=(const cyclic_executor&) = delete;

  static constexpr const char* commit_task_id = "control.commit";
  static constexpr std::size_t metrics_capacity = 4096;

  const cycle_schedule& schedule() const noexcept { return schedule_; }
  const ring_pipeline<signal_frame>& pipeline() const noexcept { return pipeline_; }
  const stamped_ring<cycle_metrics>& metrics() const noexcept { return metrics_; }

  // Last fully executed cycle.
  cycle_index current_cycle() const noexcept { return current_.load(std::memory_order_acquire); }
  bool running() const noexcept { return running_.load(std::memory_order_acquire); }
  bool in_prep_window() const noexcept { return in_prep_.load(std::memory_order_acquire); }

  // Test hook for wall-clock mode.
  void set_clock(std::function<clock::time_point()> now) { now_ = std::move(now); }

  // --- task registration (setup, or preparation window while running) -------

  void register_task(task_entry entry) {
    ensure_reconfigurable("register_task");
    const int s = to_int(entry.stage);
    if (s < 1 || s > 4) throw config_error("task '" + entry.id + "' has invalid stage " + std::to_string(s));
    if (entry.id.empty()) throw config_error("task id must not be empty");
    if (find(entry.id)) throw config_error("duplicate task id '" + entry.id + "'");
    if (entry.mode == task_mode::synchronous && s == 4)
      throw config_error("synchronous task '" + entry.id + "' cannot be in stage 4");
    if (entry.mode == task_mode::asynchronous && s != 4)
      throw config_error("asynchronous task '" + entry.id + "' must be in stage 4");
    if (entry.mode == task_mode::synchronous && !entry.run) throw config_error("task '" + entry.id + "' has no body");
    if (entry.mode == task_mode::asynchronous && !entry.run_async)
      throw config_error("task '" + entry.id + "' has no async body");
    if (entry.stage == stage_id::input) {
      if (!entry.producer || entry.id != producer_id_)
        throw config_error("stage 1 accepts only the pipeline producer '" + producer_id_ + "'");
      if (entry.priority != priority_class::p1) throw config_error("the producer must be P1");
    } else {
      if (entry.producer) throw config_error("producer task must be in stage 1");
      if (entry.stage == stage_id::control && count_stage(stage_id::control) >= max_services)
        throw config_error("stage 2 is full");
      graph_delta d;
      d.add.push_back({entry.id, entry.stage,
                       entry.stage == stage_id::control ? access_mode::read_write : access_mode::read_only, false});
      pipeline_.reconfigure(d);
    }
    tasks_.push_back(std::make_shared<task_entry>(std::move(entry)));
    refresh_async_snapshot();
  }

  void deregister_task(const std::string& id) {
    ensure_reconfigurable("deregister_task");
    auto it = std::find_if(tasks_.begin(), tasks_.end(), [&](const auto& t) { return t->id == id; });
    if (it == tasks_.end()) throw config_error("unknown task '" + id + "'");
    if ((*it)->producer) throw config_error("cannot deregister the producer task");
    graph_delta d;
    d.remove.push_back(id);
    pipeline_.reconfigure(d);
    tasks_.erase(it);
    refresh_async_snapshot();
  }

  void set_priority(const std::string& id, priority_class p) {
    ensure_reconfigurable("set_priority");
    auto* t = find(id);
    if (!t) throw config_error("unknown task '" + id + "'");
    if (t->producer && p != priority_class::p1) throw config_error("the producer must be P1");
    t->priority = p;
  }

  bool has_task(std::string_view id) const noexcept { return find(id) != nullptr; }

  std::optional<priority_class> priority_of(std::string_view id) const noexcept {
    const auto* t = find(id);
    if (!t) return std::nullopt;
    return t->priority;
  }

  std::vector<std::string> task_ids(stage_id s) const {
    std::vector<std::string> out;
    for (const auto& t : tasks_)
      if (t->stage == s) out.push_back(t->id);
    return out;
  }

  // At most one worker ever serves P2 work; everything else stays with P1.
  worker_plan workers() const noexcept {
    worker_plan w;
    w.total = schedule_.workers;
    const bool any_p2 = std::any_of(tasks_.begin(), tasks_.end(), [](const auto& t) { return t->priority == priority_class::p2; });
    w.p2 = any_p2 ? 1 : 0;
    w.p1 = w.total - w.p2;
    return w;
  }

  void add_prep_hook(std::function<void(prep_context&)> hook) { prep_hooks_.push_back(std::move(hook)); }

  // Runs after stage-2 outputs are merged, before stage 2 publishes.
  void set_commit_hook(std::function<void(signal_frame&, cycle_index)> hook) { commit_hook_ = std::move(hook); }

  // --- preparation-window queue ---------------------------------------------

  prep_ticket submit_prep_request(prep_request request) {
    std::promise<prep_outcome> promise;
    prep_ticket ticket = promise.get_future().share();
    std::lock_guard lock(queue_mutex_);
    if (queue_.size() >= schedule_.prep_queue_depth)
      throw backpressure_error("prep request queue full (depth " + std::to_string(schedule_.prep_queue_depth) + ")");
    queue_.push_back(queued_request{std::move(request), std::move(promise)});
    return ticket;
  }

  std::size_t pending_requests() const {
    std::lock_guard lock(queue_mutex_);
    return queue_.size();
  }

  // --- execution ------------------------------------------------------------

  void request_stop() noexcept { stop_requested_.store(true, std::memory_order_release); }

  // Run cycles current+1 .. until.
  run_report run(cycle_index until, run_options options = {}) {
    if (!find(producer_id_)) throw config_error("no producer task registered");
    run_report report;
    const cycle_index first = current_cycle() + 1;
    if (options.keep_cycles && until >= first) report.cycles.reserve(static_cast<std::size_t>(until - first + 1));
    stop_requested_.store(false, std::memory_order_release);
    running_.store(true, std::memory_order_release);
    if (schedule_.mode == clock_mode::wall_clock) {
      try {
        wall_epoch_ = now_() + 2 * schedule_.period;
        wall_first_ = first;
      } catch (const std::exception& e) {
        running_.store(false, std::memory_order_release);
        report.aborted = true;
        report.abort_reason = std::string("clock failure: ") + e.what();
        return report;
      }
      start_threads();
    }
    for (cycle_index c = first; c <= until && !stop_requested_.load(std::memory_order_acquire); ++c) {
      cycle_metrics m;
      try {
        m = schedule_.mode == clock_mode::deterministic ? run_deterministic_cycle(c) : run_wall_cycle(c);
      } catch (const clock_failure& e) {
        report.aborted = true;
        report.abort_reason = e.what();
        break;
      }
      ++report.cycles_run;
      if (m.overrun) ++report.overruns;
      if (!m.deadline_met) ++report.deadline_misses;
      report.jitter_ns.push_back(std::abs(m.start_jitter_ns));
      if (options.keep_cycles) report.cycles.push_back(m);
    }
    stop_threads();
    running_.store(false, std::memory_order_release);
    return report;
  }

  // Execute exactly one cycle (deterministic mode only).
  cycle_metrics step() {
    if (schedule_.mode != clock_mode::deterministic) throw protocol_error("step() requires the deterministic clock");
    if (!find(producer_id_)) throw config_error("no producer task registered");
    running_.store(true, std::memory_order_release);
    auto m = run_deterministic_cycle(current_cycle() + 1);
    running_.store(false, std::memory_order_release);
    return m;
  }

 private:
  struct clock_failure : std::runtime_error {
    using std::runtime_error::runtime_error;
  };

  struct queued_request {
    prep_request request;
    std::promise<prep_outcome> promise;
  };

  using task_ptr = std::shared_ptr<task_entry>;
  using task_list = std::vector<task_ptr>;

  static const task_handle* find_producer(const stage_graph& g) {
    for (const auto& t : g.tasks)
      if (t.producer) return &t;
    throw config_error("pipeline has no producer");
  }

  task_entry* find(std::string_view id) const noexcept {
    for (const auto& t : tasks_)
      if (t->id == id) return t.get();
    return nullptr;
  }

  std::size_t count_stage(stage_id s) const noexcept {
    return static_cast<std::size_t>(std::count_if(tasks_.begin(), tasks_.end(), [s](const auto& t) { return t->stage == s; }));
  }

  void ensure_reconfigurable(const char* what) const {
    ensure_management_context(what);
    if (running_.load(std::memory_order_acquire) && !detail::in_prep_window)
      throw protocol_error(std::string(what) + " outside the preparation window");
  }

  void refresh_async_snapshot() {
    auto snap = std::make_shared<task_list>();
    for (const auto& t : tasks_)
      if (t->mode == task_mode::asynchronous) snap->push_back(t);
    std::lock_guard lock(async_mutex_);
    async_tasks_ = std::move(snap);
  }

  std::shared_ptr<const task_list> async_snapshot() const {
    std::lock_guard lock(async_mutex_);
    return async_tasks_;
  }

  void run_prep_window(cycle_index c) {
    in_prep_.store(true, std::memory_order_release);
    detail::in_prep_window = true;
    std::deque<queued_request> due;
    {
      std::lock_guard lock(queue_mutex_);
      std::deque<queued_request> later;
      while (!queue_.empty()) {
        auto& front = queue_.front();
        if (front.request.not_before && *front.request.not_before > c)
          later.push_back(std::move(front));
        else
          due.push_back(std::move(front));
        queue_.pop_front();
      }
      queue_ = std::move(later);
    }
    for (auto& q : due) {
      prep_outcome out;
      out.cycle = c;
      prep_context ctx{*this, c, std::nullopt};
      try {
        if (q.request.apply) q.request.apply(ctx);
        out.applied = !ctx.rejection.has_value();
        if (ctx.rejection) out.reason = *ctx.rejection;
      } catch (const std::exception& e) {
        out.applied = false;
        out.reason = e.what();
      }
      q.promise.set_value(std::move(out));
    }
    for (auto& hook : prep_hooks_) {
      prep_context ctx{*this, c, std::nullopt};
      hook(ctx);
    }
    detail::in_prep_window = false;
    in_prep_.store(false, std::memory_order_release);
  }

  // Stage 1: claim, fill inputs, publish.
  void run_stage1(cycle_index c, signal_frame& frame, std::int64_t& cost_ns) {
    pipeline_.claim(c);
    frame = signal_frame{};
    frame.cycle = c;
    auto* producer = find(producer_id_);
    task_context ctx;
    ctx.cycle = c;
    ctx.stage = stage_id::input;
    ctx.mode = schedule_.mode;
    ctx.producer_frame = &frame;
    ctx.frame = &frame;
    {
      detail::operation_path_scope scope;
      producer->run(ctx);
    }
    cost_ns = std::chrono::duration_cast<nanos>(producer->nominal_cost).count() + ctx.charged.count();
    pipeline_.store(pipeline_.writer(producer_id_), c, frame);
    pipeline_.publish_stage(stage_id::input, c);
  }

  struct stage2_slot {
    task_ptr task;
    std::uint32_t emitted_count = 0;
    std::array<service_output, 2> emitted{};
    bool accepted = false;
  };

  void merge_and_commit(cycle_index c, signal_frame& frame, std::vector<stage2_slot>& slots) {
    frame.output_count = 0;
    for (auto& s : slots) {
      if (!s.accepted) {
        // late or not started: keep a marker so the twin sees the gap
        if (s.task->tag != 0 && frame.output_count < max_services)
          frame.outputs[frame.output_count++] =
              service_output{s.task->tag, 0, std::nan(""), frame_flags::late, 0};
        continue;
      }
      for (std::uint32_t i = 0; i < s.emitted_count && frame.output_count < max_services; ++i)
        frame.outputs[frame.output_count++] = s.emitted[i];
    }
    if (commit_hook_) commit_hook_(frame, c);
    pipeline_.store(pipeline_.writer(commit_task_id), c, frame);
    pipeline_.publish_stage(stage_id::control, c);
  }

  void run_stage3(cycle_index c, const signal_frame& frame, bool overrun, std::int64_t& cost_ns) {
    cost_ns = 0;
    for (const auto& t : tasks_) {
      if (t->stage != stage_id::output) continue;
      task_context ctx;
      ctx.cycle = c;
      ctx.stage = stage_id::output;
      ctx.mode = schedule_.mode;
      ctx.frame = &frame;
      ctx.overrun = overrun;
      {
        detail::operation_path_scope scope;
        t->run(ctx);
      }
      cost_ns += std::chrono::duration_cast<nanos>(t->nominal_cost).count() + ctx.charged.count();
    }
    pipeline_.publish_stage(stage_id::output, c);
  }

  void finish_cycle(cycle_index c, const cycle_metrics& m) {
    metrics_.push(c, m);
    current_.store(c, std::memory_order_release);
    published_.store(c, std::memory_order_release);
    published_.notify_all();
  }

  // --- deterministic clock -------------------------------------------------

  cycle_metrics run_deterministic_cycle(cycle_index c) {
    const std::int64_t period = std::chrono::duration_cast<nanos>(schedule_.period).count();
    const std::int64_t t0 = static_cast<std::int64_t>(c) * period;
    const std::int64_t deadline = t0 + period;
    const std::int64_t window_end = t0 + std::chrono::duration_cast<nanos>(schedule_.stage2_window).count();

    run_prep_window(c);

    cycle_metrics m;
    m.cycle = c;
    m.t_start_ns = t0;
    signal_frame frame;
    std::int64_t s1 = 0;
    run_stage1(c, frame, s1);
    const std::int64_t start2 = t0 + s1;

    std::vector<stage2_slot> slots;
    std::int64_t p1_end = start2;
    std::int64_t p2_end = start2;
    bool waited_p2 = false;
    for (const auto& t : tasks_) {
      if (t->stage != stage_id::control) continue;
      stage2_slot slot;
      slot.task = t;
      task_timing timing;
      timing.tag = t->tag;
      timing.priority = t->priority;
      if (t->priority == priority_class::p2 && p2_busy_until_ > start2) {
        // the single P2 worker is still occupied by an earlier cycle
        timing.ran = false;
        timing.completed = false;
        timing.duration_ns = std::min(p2_busy_until_, deadline) - start2;
      } else {
        task_context ctx = control_context(c, frame);
        {
          detail::operation_path_scope scope;
          t->run(ctx);
        }
        const std::int64_t cost = std::chrono::duration_cast<nanos>(t->nominal_cost).count() + ctx.charged.count();
        timing.ran = true;
        timing.duration_ns = cost;
        slot.emitted_count = ctx.emitted_count;
        slot.emitted = ctx.emitted;
        if (t->priority == priority_class::p1) {
          p1_end += cost;
          slot.accepted = true;
          timing.completed = true;
        } else {
          const std::int64_t begin = std::max(start2, p2_busy_until_);
          const std::int64_t end = begin + cost;
          p2_busy_until_ = end;
          slot.accepted = end <= window_end;
          timing.completed = slot.accepted;
          p2_end = std::max(p2_end, std::min(end, window_end));
          waited_p2 = true;
        }
      }
      record_timing(m, timing);
      slots.push_back(std::move(slot));
    }
    const std::int64_t end2 = waited_p2 ? std::max(p1_end, p2_end) : p1_end;
    merge_and_commit(c, frame, slots);

    const bool late_start = end2 > deadline;
    std::int64_t s3 = 0;
    run_stage3(c, frame, late_start, s3);
    const std::int64_t end3 = end2 + s3;

    m.start_jitter_ns = 0;
    m.stage_ns = {s1, end2 - start2, s3};
    m.overrun = end3 > deadline;
    m.deadline_met = !m.overrun;
    finish_cycle(c, m);

    // Stage 4 runs inline after forwarding, in registration order.
    auto snap = async_snapshot();
    for (const auto& t : *snap) run_async_task(*t, c);
    return m;
  }

  task_context control_context(cycle_index c, const signal_frame& frame) const {
    task_context ctx;
    ctx.cycle = c;
    ctx.stage = stage_id::control;
    ctx.mode = schedule_.mode;
    ctx.frame = &frame;
    return ctx;
  }

  static void record_timing(cycle_metrics& m, const task_timing& t) {
    if (m.timing_count < max_timed_tasks) m.timings[m.timing_count++] = t;
  }

  void run_async_task(task_entry& t, cycle_index latest) {
    async_context ctx;
    ctx.latest = latest;
    ctx.pipeline = &pipeline_;
    ctx.metrics = &metrics_;
    ctx.executor = this;
    t.run_async(ctx);
  }

  // --- wall clock ------------------------------------------------------------

  clock::time_point checked_now() {
    try {
      return now_();
    } catch (const std::exception& e) {
      throw clock_failure(std::string("clock failure: ") + e.what());
    }
  }

  void wait_until(clock::time_point target) {
    const auto coarse = target - std::chrono::microseconds(200);
    auto now = checked_now();
    if (now < coarse) std::this_thread::sleep_until(coarse);
    while (checked_now() < target) std::this_thread::yield();
  }

  static std::int64_t ns_between(clock::time_point a, clock::time_point b) {
    return std::chrono::duration_cast<nanos>(b - a).count();
  }

  cycle_metrics run_wall_cycle(cycle_index c) {
    const auto t0 = wall_epoch_ + static_cast<std::int64_t>(c - wall_first_) * schedule_.period;
    const auto deadline = t0 + schedule_.period;
    const auto window_end = t0 + schedule_.stage2_window;

    wait_until(t0 - schedule_.prep_offset);
    run_prep_window(c);
    wait_until(t0);

    cycle_metrics m;
    m.cycle = c;
    m.t_start_ns = ns_between(wall_epoch_, t0);
    const auto start = checked_now();
    m.start_jitter_ns = ns_between(t0, start);

    signal_frame frame;
    std::int64_t unused = 0;
    run_stage1(c, frame, unused);
    const auto start2 = checked_now();

    // Hand P2 stage-2 work to its worker before running P1 tasks.
    std::vector<stage2_slot> slots;
    std::vector<std::size_t> p2_slots;
    for (const auto& t : tasks_) {
      if (t->stage != stage_id::control) continue;
      stage2_slot slot;
      slot.task = t;
      slots.push_back(std::move(slot));
      if (t->priority == priority_class::p2) p2_slots.push_back(slots.size() - 1);
    }
    bool p2_posted = false;
    if (!p2_slots.empty()) {
      int state = p2_state_.load(std::memory_order_acquire);
      if (state == p2_done) {
        p2_state_.store(p2_idle, std::memory_order_release);  // stale result of an earlier cycle
        state = p2_idle;
      }
      if (state == p2_idle) {
        p2_job_.cycle = c;
        p2_job_.frame = frame;
        p2_job_.tasks.clear();
        for (auto i : p2_slots) p2_job_.tasks.push_back(slots[i].task);
        p2_job_.results.assign(p2_job_.tasks.size(), p2_result{});
        p2_state_.store(p2_posted_state, std::memory_order_release);
        p2_state_.notify_one();
        p2_posted = true;
      }
    }

    for (auto& slot : slots) {
      if (slot.task->priority != priority_class::p1) continue;
      task_context ctx = control_context(c, frame);
      const auto b = checked_now();
      {
        detail::operation_path_scope scope;
        slot.task->run(ctx);
      }
      slot.emitted_count = ctx.emitted_count;
      slot.emitted = ctx.emitted;
      slot.accepted = true;
      task_timing timing{slot.task->tag, priority_class::p1, true, true, ns_between(b, checked_now())};
      record_timing(m, timing);
    }

    if (!p2_slots.empty()) {
      bool done = false;
      if (p2_posted) {
        while (checked_now() < window_end) {
          if (p2_state_.load(std::memory_order_acquire) == p2_done) {
            done = true;
            break;
          }
          std::this_thread::yield();
        }
        if (!done) done = p2_state_.load(std::memory_order_acquire) == p2_done;
      }
      for (std::size_t k = 0; k < p2_slots.size(); ++k) {
        auto& slot = slots[p2_slots[k]];
        task_timing timing;
        timing.tag = slot.task->tag;
        timing.priority = priority_class::p2;
        if (done) {
          const auto& r = p2_job_.results[k];
          slot.emitted_count = r.emitted_count;
          slot.emitted = r.emitted;
          slot.accepted = true;
          timing.ran = true;
          timing.completed = true;
          timing.duration_ns = r.duration_ns;
        } else {
          timing.ran = p2_posted;
          timing.completed = false;
          timing.duration_ns = ns_between(start2, checked_now());
        }
        record_timing(m, timing);
      }
      if (done) p2_state_.store(p2_idle, std::memory_order_release);
    }
    merge_and_commit(c, frame, slots);
    const auto start3 = checked_now();
    const bool late_start = start3 > deadline;
    std::int64_t unused3 = 0;
    run_stage3(c, frame, late_start, unused3);
    const auto end3 = checked_now();

    m.stage_ns = {ns_between(start, start2), ns_between(start2, start3), ns_between(start3, end3)};
    m.overrun = end3 > deadline;
    m.deadline_met = !m.overrun;
    finish_cycle(c, m);
    return m;
  }

  static constexpr int p2_idle = 0;
  static constexpr int p2_posted_state = 1;
  static constexpr int p2_running = 2;
  static constexpr int p2_done = 3;
  static constexpr int p2_stop = 4;

  struct p2_result {
    std::uint32_t emitted_count = 0;
    std::array<service_output, 2> emitted{};
    std::int64_t duration_ns = 0;
  };

  struct p2_job {
    cycle_index cycle = 0;
    signal_frame frame{};
    task_list tasks;
    std::vector<p2_result> results;
  };

  void p2_worker_loop() {
    for (;;) {
      int s = p2_state_.load(std::memory_order_acquire);
      if (s == p2_stop) return;
      if (s != p2_posted_state) {
        p2_state_.wait(s, std::memory_order_acquire);
        continue;
      }
      int posted = p2_posted_state;
      if (!p2_state_.compare_exchange_strong(posted, p2_running, std::memory_order_acq_rel)) continue;
      for (std::size_t k = 0; k < p2_job_.tasks.size(); ++k) {
        auto& t = *p2_job_.tasks[k];
        task_context ctx = control_context(p2_job_.cycle, p2_job_.frame);
        const auto b = clock::now();
        {
          detail::operation_path_scope scope;
          t.run(ctx);
        }
        auto& r = p2_job_.results[k];
        r.emitted_count = ctx.emitted_count;
        r.emitted = ctx.emitted;
        r.duration_ns = ns_between(b, clock::now());
      }
      int expected = p2_running;
      p2_state_.compare_exchange_strong(expected, p2_done, std::memory_order_acq_rel);
    }
  }

  void async_worker_loop(std::size_t index, std::size_t count) {
    cycle_index seen = 0;
    for (;;) {
      published_.wait(seen, std::memory_order_acquire);
      if (threads_stop_.load(std::memory_order_acquire)) return;
      const cycle_index latest = published_.load(std::memory_order_acquire);
      if (latest == seen) continue;
      seen = latest;
      auto snap = async_snapshot();
      for (std::size_t i = index; i < snap->size(); i += count) run_async_task(*(*snap)[i], latest);
    }
  }

  void start_threads() {
    threads_stop_.store(false, std::memory_order_release);
    p2_state_.store(p2_idle, std::memory_order_release);
    threads_.emplace_back([this] { p2_worker_loop(); });
    const std::size_t async_workers = std::max<std::size_t>(1, schedule_.workers - 2);
    for (std::size_t i = 0; i < async_workers; ++i)
      threads_.emplace_back([this, i, async_workers] { async_worker_loop(i, async_workers); });
  }

  void stop_threads() {
    if (threads_.empty()) return;
    threads_stop_.store(true, std::memory_order_release);
    // the P2 worker may be mid-task; it observes stop once it finishes
    for (;;) {
      int s = p2_state_.load(std::memory_order_acquire);
      if (s == p2_running) {
        std::this_thread::yield();
        continue;
      }
      if (p2_state_.compare_exchange_strong(s, p2_stop, std::memory_order_acq_rel)) break;
    }
    p2_state_.notify_all();
    published_.fetch_add(1, std::memory_order_acq_rel);
    published_.notify_all();
    for (auto& t : threads_) t.join();
    threads_.clear();
    published_.store(current_.load(std::memory_order_acquire), std::memory_order_release);
  }

  cycle_schedule schedule_;
  ring_pipeline<signal_frame>& pipeline_;
  stamped_ring<cycle_metrics> metrics_;
  std::string producer_id_;
  task_list tasks_;
  std::vector<std::function<void(prep_context&)>> prep_hooks_;
  std::function<void(signal_frame&, cycle_index)> commit_hook_;
  std::function<clock::time_point()> now_;

  mutable std::mutex queue_mutex_;
  std::deque<queued_request> queue_;

  mutable std::mutex async_mutex_;
  std::shared_ptr<const task_list> async_tasks_ = std::make_shared<task_list>();

  std::atomic<cycle_index> current_{0};
  std::atomic<cycle_index> published_{0};
  std::atomic<bool> running_{false};
  std::atomic<bool> stop_requested_{false};
  std::atomic<bool> in_prep_{false};

  // deterministic P2 worker occupancy (logical ns)
  std::int64_t p2_busy_until_ = 0;

  // wall clock
  clock::time_point wall_epoch_{};
  cycle_index wall_first_ = 1;
  std::vector<std::thread> threads_;
  std::atomic<bool> threads_stop_{false};
  std::atomic<int> p2_state_{p2_idle};
  p2_job p2_job_;
};

}  // namespace abcycle
