#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "abcycle/cyclic_executor.hpp"
#include "abcycle/types.hpp"

namespace abcycle {

// --- discrete PID ------------------------------------------------------------

struct pid_spec {
  double kp = 0.0;
  double ki = 0.0;
  double kd = 0.0;
  double setpoint = 0.0;
  double integral_clamp = std::numeric_limits<double>::infinity();

  void validate() const {
    if (!std::isfinite(kp) || !std::isfinite(ki) || !std::isfinite(kd) || !std::isfinite(setpoint))
      throw config_error("controller gains and setpoint must be finite");
    if (!(integral_clamp >= 0.0)) throw config_error("integral clamp must be non-negative");
  }

  bool operator==(const pid_spec&) const = default;
};

struct pid_state {
  double integral = 0.0;
  double prev_error = 0.0;

  bool operator==(const pid_state&) const = default;
};

class controller_fault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct pid_step {
  double output = 0.0;
  pid_state state;
};

// u = kp*e + ki*I + kd*(e - e_prev), I accumulated and clamped to +-clamp.
inline pid_step execute_controller(const pid_spec& spec, const pid_state& state, double measurement) {
  if (!std::isfinite(measurement)) throw controller_fault("non-finite measurement");
  const double e = spec.setpoint - measurement;
  pid_state next;
  next.integral = std::clamp(state.integral + e, -spec.integral_clamp, spec.integral_clamp);
  const double derivative = e - state.prev_error;
  next.prev_error = e;
  const double u = spec.kp * e + spec.ki * next.integral + spec.kd * derivative;
  if (!std::isfinite(u)) throw controller_fault("non-finite controller output");
  return {u, next};
}

// --- services ----------------------------------------------------------------

enum class service_role : std::uint8_t { active, shadow };

inline const char* to_string(service_role r) noexcept { return r == service_role::active ? "active" : "shadow"; }

struct service_descriptor {
  service_id id = no_service;
  std::string name;
  service_role role = service_role::active;
  priority_class priority = priority_class::p1;
  pid_spec controller;
  asset_id target_asset = 1;
  std::size_t footprint_bytes = 4096;  // static arena reservation on deployment
  micros nominal_cost{20};

  std::string task_id() const { return "svc." + std::to_string(id); }

  void validate() const {
    if (id == no_service) throw config_error("service id 0 is reserved");
    if (target_asset < 1 || target_asset > max_assets)
      throw config_error("service " + std::to_string(id) + " targets unknown asset " + std::to_string(target_asset));
    if (role == service_role::shadow && priority != priority_class::p2)
      throw config_error("shadow services are deployed at P2");
    controller.validate();
  }
};

// Probe/effector pair attached to a running service task.
struct service_probe {
  std::atomic<std::int64_t> injected_cost_ns{0};  // extra execution time per cycle (fault injection)
  std::atomic<std::uint64_t> executions{0};
  std::atomic<std::uint64_t> faults{0};
};

// Stage-2 task running one controller against its asset's measurement.
inline task_entry make_service_task(const service_descriptor& d, std::shared_ptr<service_probe> probe) {
  task_entry t;
  t.id = d.task_id();
  t.stage = stage_id::control;
  t.priority = d.priority;
  t.mode = task_mode::synchronous;
  t.tag = d.id;
  t.nominal_cost = d.nominal_cost;
  t.run = [spec = d.controller, id = d.id, asset = d.target_asset, probe = std::move(probe),
           state = pid_state{}](task_context& ctx) mutable {
    probe->executions.fetch_add(1, std::memory_order_relaxed);
    if (const auto extra = probe->injected_cost_ns.load(std::memory_order_relaxed); extra > 0) ctx.charge(nanos(extra));
    const double y = ctx.frame->measurement[asset - 1];
    try {
      const auto step = execute_controller(spec, state, y);
      state = step.state;
      ctx.emit(id, asset, step.output);
    } catch (const controller_fault&) {
      probe->faults.fetch_add(1, std::memory_order_relaxed);
      ctx.emit(id, asset, std::nan(""), frame_flags::fault);
    }
  };
  return t;
}

// --- gate and switch -----------------------------------------------------------

enum class switch_direction : std::uint8_t { promote, rollback };

inline const char* to_string(switch_direction d) noexcept { return d == switch_direction::promote ? "promote" : "rollback"; }

struct switch_directive {
  asset_id asset = 1;
  cycle_index switch_cycle = 0;
  switch_direction direction = switch_direction::promote;
};

struct arm_result {
  bool accepted = false;
  std::string reason;
};

// Per-asset forwarding table: which service's output reaches the actuator in
// each cycle. Written in preparation windows, read once per cycle in stage 2.
class gate {
 public:
  struct transition {
    cycle_index from = 0;
    service_id service = no_service;
  };

  void set_primary(asset_id asset, service_id service) {
    auto& l = lane_for(asset);
    l.primary = service;
    l.transitions.clear();
    l.transitions.push_back({0, service});
  }

  // Outputs of `service` are computed and recorded but blocked until a switch.
  void register_shadow(asset_id asset, service_id service) {
    auto& l = lane_for(asset);
    if (l.primary == no_service) throw config_error("asset " + std::to_string(asset) + " has no active service");
    l.candidate = service;
    l.candidate_healthy = true;
  }

  void set_candidate_health(asset_id asset, bool healthy) { lane_for(asset).candidate_healthy = healthy; }

  // Withdraw the candidate and every transition it had not yet reached.
  void remove_shadow(asset_id asset, cycle_index current) {
    auto& l = lane_for(asset);
    disarm(asset, current);
    l.candidate = no_service;
    l.candidate_healthy = false;
  }

  // After a completed switch the winner becomes the primary.
  void retire(asset_id asset, service_id survivor, cycle_index current) {
    auto& l = lane_for(asset);
    disarm(asset, current);
    if (designated(asset, current + 1) != survivor) throw protocol_error("retire would change the forwarding service");
    l.primary = survivor;
    l.candidate = no_service;
    l.candidate_healthy = false;
    const auto from = l.transitions.back().from;
    l.transitions.clear();
    l.transitions.push_back({from, survivor});
  }

  // Drop transitions scheduled after `current`.
  void disarm(asset_id asset, cycle_index current) {
    auto& l = lane_for(asset);
    while (l.transitions.size() > 1 && l.transitions.back().from > current) l.transitions.pop_back();
  }

  arm_result arm(const switch_directive& d, cycle_index current) {
    auto* l = find_lane(d.asset);
    if (!l || l->primary == no_service) return {false, "asset " + std::to_string(d.asset) + " has no active service"};
    if (d.switch_cycle < current + 1)
      return {false, "switch cycle " + std::to_string(d.switch_cycle) + " is not after current cycle " + std::to_string(current)};
    if (d.switch_cycle <= l->transitions.back().from)
      return {false, "switch cycle " + std::to_string(d.switch_cycle) + " precedes an armed transition"};
    if (l->candidate == no_service) return {false, "no shadow service deployed on asset " + std::to_string(d.asset)};
    const service_id current_source = l->transitions.back().service;
    if (d.direction == switch_direction::promote) {
      if (!l->candidate_healthy) return {false, "shadow service " + std::to_string(l->candidate) + " is unhealthy"};
      if (current_source == l->candidate) return {false, "shadow service is already promoted"};
      l->transitions.push_back({d.switch_cycle, l->candidate});
    } else {
      if (current_source != l->candidate) return {false, "nothing to roll back on asset " + std::to_string(d.asset)};
      l->transitions.push_back({d.switch_cycle, l->primary});
    }
    return {true, {}};
  }

  service_id designated(asset_id asset, cycle_index cycle) const noexcept {
    const auto* l = find_lane(asset);
    if (!l) return no_service;
    service_id s = no_service;
    for (const auto& t : l->transitions)
      if (t.from <= cycle) s = t.service;
    return s;
  }

  bool is_blocked(asset_id asset, cycle_index cycle, service_id service) const noexcept {
    return service == no_service || designated(asset, cycle) != service;
  }

  // Pick the designated output for this cycle; hold the previous one when it is
  // missing, late or faulted.
  applied_output apply(asset_id asset, cycle_index cycle, std::span<const service_output> outputs) {
    auto& l = lane_for(asset);
    ++l.evaluations;
    const service_id want = designated(asset, cycle);
    for (const auto& o : outputs) {
      if (o.service != want || o.asset != asset) continue;
      if ((o.flags & (frame_flags::fault | frame_flags::late)) || !std::isfinite(o.value)) break;
      l.last = applied_output{o.value, want, 0};
      return l.last;
    }
    applied_output held = l.last;
    held.flags = frame_flags::held | (want != no_service ? frame_flags::fault : 0u);
    return held;
  }

  std::uint64_t evaluations(asset_id asset) const noexcept {
    const auto* l = find_lane(asset);
    return l ? l->evaluations : 0;
  }

  service_id primary(asset_id asset) const noexcept {
    const auto* l = find_lane(asset);
    return l ? l->primary : no_service;
  }

  service_id candidate(asset_id asset) const noexcept {
    const auto* l = find_lane(asset);
    return l ? l->candidate : no_service;
  }

  std::vector<transition> transitions(asset_id asset) const {
    const auto* l = find_lane(asset);
    return l ? l->transitions : std::vector<transition>{};
  }

 private:
  struct lane {
    asset_id asset = 0;
    service_id primary = no_service;
    service_id candidate = no_service;
    bool candidate_healthy = false;
    std::vector<transition> transitions;
    applied_output last{};
    std::uint64_t evaluations = 0;
  };

  lane& lane_for(asset_id asset) {
    if (auto* l = find_lane(asset)) return *l;
    lanes_.push_back(lane{asset, no_service, no_service, false, {}, {}, 0});
    return lanes_.back();
  }

  lane* find_lane(asset_id asset) noexcept {
    for (auto& l : lanes_)
      if (l.asset == asset) return &l;
    return nullptr;
  }

  const lane* find_lane(asset_id asset) const noexcept {
    for (const auto& l : lanes_)
      if (l.asset == asset) return &l;
    return nullptr;
  }

  std::vector<lane> lanes_;
};

inline arm_result arm_switch(gate& g, const switch_directive& directive, cycle_index current) {
  return g.arm(directive, current);
}

}  // namespace abcycle
