// -----------------------------------------------------------------------------
// adaptation_manager: the device-level managing system.
//
// One deployment lane per asset walks the state machine
//
//   Idle -> Allocating -> Configuring -> Shadow -> Switching -> Active -> RolledBack
//
// with Allocating/Configuring/Shadow/Switching -> Aborted, Switching -> Shadow
// when a coordinated switch is cancelled, and finished lanes (Aborted,
// RolledBack, Active after retention) reset to Idle.
// Every transition happens inside a preparation window (the only place the
// operation plane may change) and is logged with its cycle and reason.
// Deployment and abort are autonomous; promote/rollback are operator requests.
// -----------------------------------------------------------------------------
#pragma once

#include <algorithm>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "abcycle/control_services.hpp"
#include "abcycle/cyclic_executor.hpp"
#include "abcycle/digital_twin.hpp"

namespace abcycle {

enum class adaptation_state : std::uint8_t {
  idle,
  allocating,
  configuring,
  shadow,
  switching,
  active,
  rolled_back,
  aborted
};

inline const char* to_string(adaptation_state s) noexcept {
  switch (s) {
    case adaptation_state::idle: return "Idle";
    case adaptation_state::allocating: return "Allocating";
    case adaptation_state::configuring: return "Configuring";
    case adaptation_state::shadow: return "Shadow";
    case adaptation_state::switching: return "Switching";
    case adaptation_state::active: return "Active";
    case adaptation_state::rolled_back: return "RolledBack";
    case adaptation_state::aborted: return "Aborted";
  }
  return "?";
}

inline constexpr std::array<adaptation_state, 8> all_adaptation_states{
    adaptation_state::idle,   adaptation_state::allocating, adaptation_state::configuring, adaptation_state::shadow,
    adaptation_state::switching, adaptation_state::active,  adaptation_state::rolled_back, adaptation_state::aborted};

inline bool is_legal_transition(adaptation_state from, adaptation_state to) noexcept {
  using S = adaptation_state;
  switch (from) {
    case S::idle: return to == S::allocating;
    case S::allocating: return to == S::configuring || to == S::aborted;
    case S::configuring: return to == S::shadow || to == S::aborted;
    case S::shadow: return to == S::switching || to == S::aborted;
    case S::switching: return to == S::active || to == S::aborted || to == S::shadow;  // shadow: switch cancelled
    case S::active: return to == S::rolled_back || to == S::idle;
    case S::rolled_back: return to == S::idle;
    case S::aborted: return to == S::idle;
  }
  return false;
}

struct resource_budget {
  micros max_stage2_duration{200};
  std::uint32_t violation_threshold = 5;  // consecutive cycles
  std::size_t arena_limit_bytes = 64 * 1024;
  double max_overrun_rate = 0.01;       // tolerated increase over the pre-deployment rate
  std::uint64_t overrun_window = 1000;  // cycles

  void validate() const {
    if (violation_threshold < 1) throw config_error("violation threshold must be >= 1");
    if (max_stage2_duration.count() <= 0) throw config_error("stage-2 budget must be positive");
    if (overrun_window < 1) throw config_error("overrun window must be >= 1");
  }
};

struct transition_record {
  cycle_index cycle = 0;
  asset_id asset = 0;
  adaptation_state from = adaptation_state::idle;
  adaptation_state to = adaptation_state::idle;
  std::string reason;
};

struct monitor_verdict {
  cycle_index cycle = 0;
  asset_id asset = 0;
  bool violation = false;
  std::uint32_t consecutive = 0;
  bool healthy = true;
};

struct manager_config {
  cycle_index health_window = 1000;  // promotion needs a clean trailing window of this length
  cycle_index retention = 1000;      // cycles A keeps running after a promotion
  std::size_t arena_bytes = 1 << 20;
  // Adaptations only start while this holds (non-critical plant state).
  std::function<bool(cycle_index)> adaptation_permitted = [](cycle_index) { return true; };
};

// Answer to a management request. `applied` resolves once a preparation window handled it.
struct adaptation_ticket {
  bool accepted = false;
  std::string reason;
  std::optional<prep_ticket> applied;
};

class memory_arena {
 public:
  explicit memory_arena(std::size_t capacity) : capacity_(capacity) {}
  bool reserve(std::size_t bytes) noexcept {
    if (bytes > capacity_ - used_) return false;
    used_ += bytes;
    return true;
  }
  void release(std::size_t bytes) noexcept { used_ -= std::min(bytes, used_); }
  std::size_t used() const noexcept { return used_; }
  std::size_t capacity() const noexcept { return capacity_; }

 private:
  std::size_t capacity_;
  std::size_t used_ = 0;
};

class adaptation_manager {
 public:
  adaptation_manager(cyclic_executor& executor, gate& g, twin_store& twin, manager_config cfg = {})
      : executor_(executor), gate_(g), twin_(twin), cfg_(std::move(cfg)), arena_(cfg_.arena_bytes) {
    executor_.add_prep_hook([this](prep_context& ctx) { on_prep_window(ctx.cycle); });
  }

  adaptation_manager(const adaptation_manager&) = delete;
  adaptation_manager& operator=(const adaptation_manager&) = delete;

  // Register the active service of an asset (setup time).
  void add_asset(const service_descriptor& primary, std::shared_ptr<service_probe> probe) {
    std::lock_guard lock(mutex_);
    if (find_lane(primary.target_asset)) throw config_error("asset already managed");
    lane l;
    l.asset = primary.target_asset;
    l.primary = primary;
    l.primary_probe = std::move(probe);
    lanes_.push_back(std::move(l));
  }

  // --- operator / management requests ------------------------------------------

  adaptation_ticket deploy_shadow(service_descriptor descriptor, resource_budget budget) {
    ensure_management_context("deploy_shadow");
    descriptor.role = service_role::shadow;
    descriptor.priority = priority_class::p2;
    try {
      descriptor.validate();
      budget.validate();
    } catch (const config_error& e) {
      return {false, e.what(), std::nullopt};
    }
    std::lock_guard lock(mutex_);
    lane* l = find_lane(descriptor.target_asset);
    if (!l) return {false, "asset " + std::to_string(descriptor.target_asset) + " is not managed", std::nullopt};
    if (l->state != adaptation_state::idle || l->deploy_pending)
      return {false, std::string("deploy requires state Idle, asset is ") + to_string(l->state), std::nullopt};
    if (descriptor.id == l->primary.id || executor_.has_task(descriptor.task_id()))
      return {false, "service id " + std::to_string(descriptor.id) + " already in use", std::nullopt};
    l->deploy_pending = true;
    const auto asset = descriptor.target_asset;
    auto t = submit("deploy.allocate", [this, asset, descriptor, budget](prep_context& ctx) {
      step_allocate(ctx, asset, descriptor, budget);
    });
    return {true, {}, t};
  }

  adaptation_ticket request_promote(asset_id asset, cycle_index k) {
    ensure_management_context("request_promote");
    std::lock_guard lock(mutex_);
    lane* l = find_lane(asset);
    if (!l) return {false, "asset " + std::to_string(asset) + " is not managed", std::nullopt};
    if (l->state != adaptation_state::shadow)
      return {false, std::string("promote requires state Shadow, asset is ") + to_string(l->state), std::nullopt};
    const cycle_index now = executor_.current_cycle();
    if (auto why = unhealthy_reason(*l, now)) return {false, *why, std::nullopt};
    if (k < now + 2)
      return {false, "switch cycle " + std::to_string(k) + " is not after current cycle " + std::to_string(now + 1),
              std::nullopt};
    l->arm_pending = true;
    auto t = submit("promote", [this, asset, k](prep_context& ctx) { step_arm_promote(ctx, asset, k); });
    return {true, {}, t};
  }

  // First phase of a coordinated switch: vote on k without touching the gate.
  // Returns the nack reason, or nothing for an ack.
  std::optional<std::string> prepare_promote(asset_id asset, cycle_index k, cycle_index margin) {
    ensure_management_context("prepare_promote");
    std::lock_guard lock(mutex_);
    lane* l = find_lane(asset);
    if (!l) return "asset " + std::to_string(asset) + " is not managed";
    if (l->state != adaptation_state::shadow)
      return std::string("promote requires state Shadow, asset is ") + to_string(l->state);
    const cycle_index now = executor_.current_cycle();
    if (auto why = unhealthy_reason(*l, now)) return why;
    if (k < now + margin)
      return "switch cycle " + std::to_string(k) + " leaves less than " + std::to_string(margin) +
             " cycles of commit margin (current " + std::to_string(now) + ")";
    l->prepared = k;
    return std::nullopt;
  }

  // Withdraw an armed switch that has not been reached yet.
  adaptation_ticket cancel_switch(asset_id asset, cycle_index k) {
    ensure_management_context("cancel_switch");
    std::lock_guard lock(mutex_);
    lane* l = find_lane(asset);
    if (!l) return {false, "asset " + std::to_string(asset) + " is not managed", std::nullopt};
    l->prepared.reset();
    if (l->state == adaptation_state::shadow && !l->arm_pending) return {true, {}, std::nullopt};  // never armed
    auto t = submit("cancel", [this, asset, k](prep_context& ctx) {
      std::lock_guard lock(mutex_);
      lane& l = *find_lane(asset);
      if (l.state == adaptation_state::shadow) return;  // never armed
      if (l.state != adaptation_state::switching || l.switch_at != k) {
        ctx.reject(std::string("no switch armed for cycle ") + std::to_string(k) + ", asset is " + to_string(l.state));
        return;
      }
      if (ctx.cycle >= k) {
        ctx.reject("switch cycle " + std::to_string(k) + " already reached");
        return;
      }
      gate_.disarm(asset, ctx.cycle - 1);
      l.switch_at.reset();
      transition(l, adaptation_state::shadow, ctx.cycle, "switch at " + std::to_string(k) + " cancelled");
    });
    return {true, {}, t};
  }

  std::optional<cycle_index> prepared_switch(asset_id asset) const {
    std::lock_guard lock(mutex_);
    const lane* l = find_lane(asset);
    return l ? l->prepared : std::nullopt;
  }

  adaptation_ticket request_rollback(asset_id asset, cycle_index m) {
    ensure_management_context("request_rollback");
    std::lock_guard lock(mutex_);
    lane* l = find_lane(asset);
    if (!l) return {false, "asset " + std::to_string(asset) + " is not managed", std::nullopt};
    if (l->state != adaptation_state::active || !l->retained)
      return {false, l->state == adaptation_state::active ? "retention window expired, A was decommissioned"
                                                         : std::string("rollback requires state Active, asset is ") + to_string(l->state),
              std::nullopt};
    const cycle_index now = executor_.current_cycle();
    if (m < now + 2)
      return {false, "rollback cycle " + std::to_string(m) + " is not after current cycle " + std::to_string(now + 1),
              std::nullopt};
    auto t = submit("rollback", [this, asset, m](prep_context& ctx) { step_arm_rollback(ctx, asset, m); });
    return {true, {}, t};
  }

  adaptation_ticket request_abort(asset_id asset, std::string reason = "operator abort") {
    ensure_management_context("request_abort");
    std::lock_guard lock(mutex_);
    lane* l = find_lane(asset);
    if (!l) return {false, "asset " + std::to_string(asset) + " is not managed", std::nullopt};
    if (l->state == adaptation_state::active) {
      // within retention an abort falls back to A via a rollback switch
      if (!l->retained || l->rollback_at)
        return {false, "cannot abort an active service outside its retention window", std::nullopt};
    } else if (!is_legal_transition(l->state, adaptation_state::aborted)) {
      return {false, std::string("nothing to abort in state ") + to_string(l->state), std::nullopt};
    }
    auto t = schedule_abort(*l, std::move(reason));
    return {true, {}, t};
  }

  // Return a finished lane to Idle so a new candidate can be deployed.
  adaptation_ticket reset(asset_id asset) {
    ensure_management_context("reset");
    std::lock_guard lock(mutex_);
    lane* l = find_lane(asset);
    if (!l) return {false, "asset " + std::to_string(asset) + " is not managed", std::nullopt};
    if (!is_legal_transition(l->state, adaptation_state::idle) || (l->state == adaptation_state::active && l->retained))
      return {false, std::string("cannot reset from ") + to_string(l->state), std::nullopt};
    auto t = submit("reset", [this, asset](prep_context& ctx) {
      std::lock_guard lock(mutex_);
      lane& l = *find_lane(asset);
      if (!is_legal_transition(l.state, adaptation_state::idle)) {
        ctx.reject(std::string("cannot reset from ") + to_string(l.state));
        return;
      }
      transition(l, adaptation_state::idle, ctx.cycle, "reset");
    });
    return {true, {}, t};
  }

  // --- monitoring -------------------------------------------------------------------

  // Consume every cycle_metrics entry published since the last call.
  std::vector<monitor_verdict> monitor(const stamped_ring<cycle_metrics>& metrics) {
    std::vector<monitor_verdict> out;
    const auto last = metrics.last_index();
    if (last <= monitored_) return out;
    if (last - monitored_ > metrics.capacity()) monitored_ = last - metrics.capacity();
    for (auto i = monitored_ + 1; i <= last; ++i) {
      auto m = metrics.try_read(i);
      if (!m) continue;
      observe(*m, out);
    }
    monitored_ = last;
    return out;
  }

  // Stage-4 task body that runs the monitor each cycle.
  task_entry monitor_task(std::string id = "mgmt.monitor") {
    task_entry t;
    t.id = std::move(id);
    t.stage = stage_id::async;
    t.mode = task_mode::asynchronous;
    t.priority = priority_class::p1;
    t.run_async = [this](async_context& ctx) { monitor(*ctx.metrics); };
    return t;
  }

  // --- queries ----------------------------------------------------------------------

  adaptation_state state(asset_id asset) const {
    std::lock_guard lock(mutex_);
    const lane* l = find_lane(asset);
    if (!l) throw config_error("asset " + std::to_string(asset) + " is not managed");
    return l->state;
  }

  std::vector<transition_record> history() const {
    std::lock_guard lock(mutex_);
    return history_;
  }

  std::optional<service_descriptor> shadow_of(asset_id asset) const {
    std::lock_guard lock(mutex_);
    const lane* l = find_lane(asset);
    if (!l || !l->candidate) return std::nullopt;
    return l->candidate->descriptor;
  }

  service_descriptor primary_of(asset_id asset) const {
    std::lock_guard lock(mutex_);
    const lane* l = find_lane(asset);
    if (!l) throw config_error("asset " + std::to_string(asset) + " is not managed");
    return l->primary;
  }

  std::optional<resource_budget> budget_of(asset_id asset) const {
    std::lock_guard lock(mutex_);
    const lane* l = find_lane(asset);
    if (!l || !l->candidate) return std::nullopt;
    return l->candidate->budget;
  }

  std::optional<monitor_verdict> last_verdict(asset_id asset) const {
    std::lock_guard lock(mutex_);
    const lane* l = find_lane(asset);
    if (!l) return std::nullopt;
    return l->last_verdict;
  }

  // Cycle from which the candidate's task has been executing.
  std::optional<cycle_index> shadow_start(asset_id asset) const {
    std::lock_guard lock(mutex_);
    const lane* l = find_lane(asset);
    if (!l || !l->candidate || !l->candidate->start) return std::nullopt;
    return l->candidate->start;
  }

  std::shared_ptr<service_probe> probe_of(service_id id) const {
    std::lock_guard lock(mutex_);
    for (const auto& l : lanes_) {
      if (l.primary.id == id) return l.primary_probe;
      if (l.candidate && l.candidate->descriptor.id == id) return l.candidate->probe;
    }
    return nullptr;
  }

  std::vector<asset_view> asset_views(cycle_index next_cycle) const {
    std::lock_guard lock(mutex_);
    std::vector<asset_view> out;
    for (const auto& l : lanes_) {
      asset_view v;
      v.asset = l.asset;
      v.adaptation_state = to_string(l.state);
      v.forwarding = l.forwarding_hint(next_cycle);
      v.shadow = l.candidate ? l.candidate->descriptor.id : no_service;
      out.push_back(v);
    }
    return out;
  }

  std::vector<service_view> service_views() const {
    std::lock_guard lock(mutex_);
    std::vector<service_view> out;
    for (const auto& l : lanes_) {
      out.push_back(view_of(l.primary, true, 0));  // the primary always runs
      if (l.candidate)
        out.push_back(view_of(l.candidate->descriptor, l.candidate->registered,
                              l.candidate->budget.max_stage2_duration.count()));
    }
    return out;
  }

  const manager_config& config() const noexcept { return cfg_; }
  std::size_t arena_used() const {
    std::lock_guard lock(mutex_);
    return arena_.used();
  }

 private:
  struct candidate_state {
    service_descriptor descriptor;
    resource_budget budget;
    std::shared_ptr<service_probe> probe;
    bool registered = false;
    std::optional<cycle_index> start;  // first cycle the task ran
    std::uint32_t consecutive = 0;
    std::optional<cycle_index> last_violation;
    std::deque<bool> post_overruns;
    std::uint64_t post_overrun_count = 0;
    double baseline_overrun_rate = 0.0;
  };

  struct lane {
    asset_id asset = 0;
    adaptation_state state = adaptation_state::idle;
    service_descriptor primary;
    std::shared_ptr<service_probe> primary_probe;
    std::optional<candidate_state> candidate;
    bool deploy_pending = false;
    bool abort_pending = false;
    bool retained = false;  // A still running after promotion
    std::optional<cycle_index> prepared;  // k voted for in a coordinated switch
    bool arm_pending = false;             // promote queued, not yet applied
    std::optional<cycle_index> switch_at;
    std::optional<cycle_index> rollback_at;
    std::optional<monitor_verdict> last_verdict;

    service_id forwarding_hint(cycle_index c) const {
      if (candidate && switch_at && c >= *switch_at && !(rollback_at && c >= *rollback_at))
        return candidate->descriptor.id;
      return primary.id;
    }
  };

  static service_view view_of(const service_descriptor& d, bool registered, std::int64_t budget_us) {
    return service_view{d.id, d.name, to_string(d.role), to_string(d.priority), d.target_asset, registered, budget_us};
  }

  lane* find_lane(asset_id a) noexcept {
    for (auto& l : lanes_)
      if (l.asset == a) return &l;
    return nullptr;
  }
  const lane* find_lane(asset_id a) const noexcept {
    for (const auto& l : lanes_)
      if (l.asset == a) return &l;
    return nullptr;
  }

  prep_ticket submit(std::string kind, std::function<void(prep_context&)> fn,
                     std::optional<cycle_index> not_before = std::nullopt) {
    return executor_.submit_prep_request(prep_request{std::move(kind), std::move(fn), not_before});
  }

  void transition(lane& l, adaptation_state to, cycle_index cycle, std::string reason) {
    if (!is_legal_transition(l.state, to))
      throw std::logic_error(std::string("illegal adaptation transition ") + to_string(l.state) + " -> " + to_string(to));
    transition_record r{cycle, l.asset, l.state, to, std::move(reason)};
    twin_.management().log({cycle, l.asset, "transition", std::string(to_string(r.from)) + "->" + to_string(to) + " " + r.reason});
    history_.push_back(std::move(r));
    l.state = to;
  }

  std::optional<std::string> unhealthy_reason(const lane& l, cycle_index now) const {
    if (!l.candidate) return "no shadow deployed";
    const auto& c = *l.candidate;
    if (l.abort_pending) return "shadow is being aborted";
    if (c.last_violation) {
      const cycle_index horizon = now > cfg_.health_window ? now - cfg_.health_window : 0;
      if (*c.last_violation > horizon)
        return "shadow violated its stage-2 budget at cycle " + std::to_string(*c.last_violation) +
               " (within the trailing " + std::to_string(cfg_.health_window) + "-cycle window)";
    }
    return std::nullopt;
  }

  // --- deployment steps (run inside preparation windows) ---------------------------

  void step_allocate(prep_context& ctx, asset_id asset, service_descriptor d, resource_budget budget) {
    std::lock_guard lock(mutex_);
    lane& l = *find_lane(asset);
    if (l.state != adaptation_state::idle) {
      l.deploy_pending = false;
      ctx.reject(std::string("deploy requires state Idle, asset is ") + to_string(l.state));
      return;
    }
    if (!cfg_.adaptation_permitted(ctx.cycle)) {
      // plant not in an adaptable state yet; try again next window
      submit("deploy.allocate", [this, asset, d, budget](prep_context& c) { step_allocate(c, asset, d, budget); },
             ctx.cycle + 1);
      return;
    }
    l.deploy_pending = false;
    transition(l, adaptation_state::allocating, ctx.cycle, "deploy service " + std::to_string(d.id));
    candidate_state c;
    c.descriptor = d;
    c.budget = budget;
    c.probe = std::make_shared<service_probe>();
    l.candidate = std::move(c);
    l.abort_pending = false;
    l.switch_at.reset();
    l.rollback_at.reset();
    l.last_verdict.reset();
    if (d.footprint_bytes > budget.arena_limit_bytes || !arena_.reserve(d.footprint_bytes)) {
      transition(l, adaptation_state::aborted, ctx.cycle, "AllocFailed");
      l.candidate.reset();
      return;
    }
    submit("deploy.configure", [this, asset](prep_context& c2) { step_configure(c2, asset); }, ctx.cycle + 1);
  }

  void step_configure(prep_context& ctx, asset_id asset) {
    std::lock_guard lock(mutex_);
    lane& l = *find_lane(asset);
    if (l.state != adaptation_state::allocating || !l.candidate) {
      ctx.reject("deployment was withdrawn");
      return;
    }
    // same sensor subscription as A: the task reads the measurement of its target asset
    twin_.declare_service(l.candidate->descriptor.id);
    gate_.register_shadow(asset, l.candidate->descriptor.id);
    transition(l, adaptation_state::configuring, ctx.cycle, "subscribed to asset " + std::to_string(asset) + ", output gated");
    submit("deploy.activate", [this, asset](prep_context& c2) { step_activate(c2, asset); }, ctx.cycle + 1);
  }

  void step_activate(prep_context& ctx, asset_id asset) {
    std::lock_guard lock(mutex_);
    lane& l = *find_lane(asset);
    if (l.state != adaptation_state::configuring || !l.candidate) {
      ctx.reject("deployment was withdrawn");
      return;
    }
    auto& c = *l.candidate;
    executor_.register_task(make_service_task(c.descriptor, c.probe));
    c.registered = true;
    c.start = ctx.cycle;
    c.baseline_overrun_rate = overrun_history_.empty() ? 0.0
                                                       : double(overrun_history_count_) / double(overrun_history_.size());
    transition(l, adaptation_state::shadow, ctx.cycle, "shadow operation started");
  }

  void step_arm_promote(prep_context& ctx, asset_id asset, cycle_index k) {
    std::lock_guard lock(mutex_);
    lane& l = *find_lane(asset);
    l.arm_pending = false;
    if (l.state != adaptation_state::shadow) {
      ctx.reject(std::string("promote requires state Shadow, asset is ") + to_string(l.state));
      return;
    }
    if (auto why = unhealthy_reason(l, ctx.cycle)) {
      ctx.reject(*why);
      return;
    }
    const auto r = arm_switch(gate_, {asset, k, switch_direction::promote}, ctx.cycle);
    if (!r.accepted) {
      ctx.reject(r.reason);
      return;
    }
    l.switch_at = k;
    l.prepared.reset();
    transition(l, adaptation_state::switching, ctx.cycle, "switch armed for cycle " + std::to_string(k));
  }

  void step_arm_rollback(prep_context& ctx, asset_id asset, cycle_index m) {
    std::lock_guard lock(mutex_);
    lane& l = *find_lane(asset);
    if (l.state != adaptation_state::active || !l.retained) {
      ctx.reject(l.state == adaptation_state::active ? "retention window expired, A was decommissioned"
                                                     : std::string("rollback requires state Active, asset is ") + to_string(l.state));
      return;
    }
    if (l.rollback_at) {
      ctx.reject("rollback already armed for cycle " + std::to_string(*l.rollback_at));
      return;
    }
    if (m >= *l.switch_at + cfg_.retention) {
      ctx.reject("rollback cycle " + std::to_string(m) + " is past the retention window");
      return;
    }
    const auto r = arm_switch(gate_, {asset, m, switch_direction::rollback}, ctx.cycle);
    if (!r.accepted) {
      ctx.reject(r.reason);
      return;
    }
    l.rollback_at = m;
  }

  prep_ticket schedule_abort(lane& l, std::string reason) {
    l.abort_pending = true;
    const auto asset = l.asset;
    return submit("abort", [this, asset, reason](prep_context& ctx) { step_abort(ctx, asset, reason); });
  }

  void step_abort(prep_context& ctx, asset_id asset, const std::string& reason) {
    std::lock_guard lock(mutex_);
    lane& l = *find_lane(asset);
    l.abort_pending = false;
    if (l.state == adaptation_state::active) {
      // B already forwards: fall back to A through the switch itself
      if (!l.retained || l.rollback_at) {
        ctx.reject("cannot abort an active service outside its retention window");
        return;
      }
      const auto r = arm_switch(gate_, {asset, ctx.cycle + 1, switch_direction::rollback}, ctx.cycle);
      if (!r.accepted) {
        ctx.reject(r.reason);
        return;
      }
      l.rollback_at = ctx.cycle + 1;
      twin_.management().log({ctx.cycle, asset, "autonomous_rollback", reason});
      return;
    }
    if (!is_legal_transition(l.state, adaptation_state::aborted)) {
      ctx.reject(std::string("nothing to abort in state ") + to_string(l.state));
      return;
    }
    withdraw_candidate(l, ctx.cycle);
    transition(l, adaptation_state::aborted, ctx.cycle, reason);
  }

  void withdraw_candidate(lane& l, cycle_index cycle) {
    if (!l.candidate) return;
    if (l.candidate->registered) executor_.deregister_task(l.candidate->descriptor.task_id());
    l.candidate->registered = false;
    // `cycle` has not run yet, so a transition armed for it is withdrawn too
    if (gate_.candidate(l.asset) == l.candidate->descriptor.id) gate_.remove_shadow(l.asset, cycle - 1);
    arena_.release(l.candidate->descriptor.footprint_bytes);
    l.switch_at.reset();
  }

  // Time-triggered transitions.
  void on_prep_window(cycle_index c) {
    std::lock_guard lock(mutex_);
    for (auto& l : lanes_) {
      if (l.state == adaptation_state::switching && l.switch_at && c >= *l.switch_at) {
        auto& cand = *l.candidate;
        executor_.set_priority(cand.descriptor.task_id(), priority_class::p1);
        executor_.set_priority(l.primary.task_id(), priority_class::p2);
        l.retained = true;
        transition(l, adaptation_state::active, c, "service " + std::to_string(cand.descriptor.id) + " forwards from cycle " + std::to_string(c));
      }
      if (l.state == adaptation_state::active && l.rollback_at && c >= *l.rollback_at) {
        executor_.set_priority(l.primary.task_id(), priority_class::p1);
        executor_.deregister_task(l.candidate->descriptor.task_id());
        l.candidate->registered = false;
        gate_.retire(l.asset, l.primary.id, c);
        arena_.release(l.candidate->descriptor.footprint_bytes);
        l.retained = false;
        transition(l, adaptation_state::rolled_back, c, "service " + std::to_string(l.primary.id) + " forwards again from cycle " + std::to_string(c));
        l.candidate.reset();
        l.switch_at.reset();
        l.rollback_at.reset();
      }
      if (l.state == adaptation_state::active && l.retained && !l.rollback_at && l.switch_at &&
          c >= *l.switch_at + cfg_.retention) {
        // retention over: A is decommissioned, B becomes the primary
        executor_.deregister_task(l.primary.task_id());
        auto promoted = l.candidate->descriptor;
        gate_.retire(l.asset, promoted.id, c);
        promoted.role = service_role::active;
        promoted.priority = priority_class::p1;
        twin_.management().log({c, l.asset, "decommissioned", "service " + std::to_string(l.primary.id)});
        l.primary = promoted;
        l.primary_probe = l.candidate->probe;
        l.candidate.reset();
        l.retained = false;
      }
      if (l.candidate && l.state != adaptation_state::allocating && l.state != adaptation_state::configuring)
        gate_.set_candidate_health(l.asset, !unhealthy_reason(l, c));
    }
  }

  void observe(const cycle_metrics& m, std::vector<monitor_verdict>& out) {
    std::lock_guard lock(mutex_);
    overrun_history_.push_back(m.overrun);
    overrun_history_count_ += m.overrun ? 1 : 0;
    const std::uint64_t window = history_window();
    while (overrun_history_.size() > window) {
      overrun_history_count_ -= overrun_history_.front() ? 1 : 0;
      overrun_history_.pop_front();
    }
    for (auto& l : lanes_) {
      const bool monitored = l.state == adaptation_state::shadow || l.state == adaptation_state::switching ||
                             (l.state == adaptation_state::active && l.retained);
      if (!monitored || !l.candidate || !l.candidate->registered || l.abort_pending) continue;
      auto& c = *l.candidate;
      if (!c.start || m.cycle < *c.start) continue;
      monitor_verdict v;
      v.cycle = m.cycle;
      v.asset = l.asset;
      const auto* t = m.timing_for(c.descriptor.id);
      const auto budget_ns = std::chrono::duration_cast<nanos>(c.budget.max_stage2_duration).count();
      v.violation = t && (!t->completed || t->duration_ns > budget_ns);
      c.consecutive = v.violation ? c.consecutive + 1 : 0;
      if (v.violation) c.last_violation = m.cycle;
      v.consecutive = c.consecutive;

      c.post_overruns.push_back(m.overrun);
      c.post_overrun_count += m.overrun ? 1 : 0;
      while (c.post_overruns.size() > c.budget.overrun_window) {
        c.post_overrun_count -= c.post_overruns.front() ? 1 : 0;
        c.post_overruns.pop_front();
      }
      const double post_rate = double(c.post_overrun_count) / double(c.post_overruns.size());
      const bool overrun_abort = c.post_overruns.size() >= std::min<std::uint64_t>(c.budget.overrun_window, 100) &&
                                 post_rate > c.baseline_overrun_rate + c.budget.max_overrun_rate;
      v.healthy = !unhealthy_reason(l, m.cycle);
      l.last_verdict = v;
      out.push_back(v);
      if (c.consecutive >= c.budget.violation_threshold) {
        schedule_abort(l, "BudgetViolation: " + std::to_string(c.consecutive) + " consecutive cycles over " +
                              std::to_string(c.budget.max_stage2_duration.count()) + "us");
      } else if (overrun_abort) {
        schedule_abort(l, "OverrunRate: " + std::to_string(post_rate) + " after deployment");
      }
    }
  }

  std::uint64_t history_window() const {
    std::uint64_t w = 1000;
    for (const auto& l : lanes_)
      if (l.candidate) w = std::max(w, l.candidate->budget.overrun_window);
    return w;
  }

  cyclic_executor& executor_;
  gate& gate_;
  twin_store& twin_;
  manager_config cfg_;
  mutable std::mutex mutex_;
  memory_arena arena_;
  std::vector<lane> lanes_;
  std::vector<transition_record> history_;
  cycle_index monitored_ = 0;
  std::deque<bool> overrun_history_;
  std::uint64_t overrun_history_count_ = 0;
};

}  // namespace abcycle
