#pragma once

#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "abcycle/adaptation_manager.hpp"
#include "abcycle/control_services.hpp"
#include "abcycle/cyclic_executor.hpp"
#include "abcycle/digital_twin.hpp"
#include "abcycle/plant_sim.hpp"
#include "abcycle/ring_pipeline.hpp"

namespace abcycle {

struct asset_setup {
  plant_config plant;
  service_descriptor primary;
};

struct device_config {
  std::string name = "device-1";
  cycle_schedule schedule;
  std::size_t ring_capacity = 16;
  std::vector<asset_setup> assets;
  twin_config twin;
  manager_config manager;
  bool keep_trace = true;
  bool keep_actuator_log = false;
  cycle_index publish_every = 100;  // management-view refresh (cycles)
};

// One row of the per-cycle trace of a single asset.
struct trace_row {
  cycle_index cycle = 0;
  std::int64_t t_start_ns = 0;  // scheduled start
  asset_id asset = 0;
  double x = 0.0;
  double y = 0.0;
  double u_a = std::numeric_limits<double>::quiet_NaN();
  double u_b = std::numeric_limits<double>::quiet_NaN();
  double u_applied = 0.0;
  service_id source = no_service;
  bool overrun = false;
  adaptation_state state = adaptation_state::idle;
};

inline constexpr const char* trace_csv_header = "cycle,t_start_ns,x,y,u_A,u_B,u_applied,source,overrun,adaptation_state";

// A single controller device: ring pipeline, cyclic executor, plants behind an
// actuator port, the A/B gate, the twin and the adaptation manager.
class device {
 public:
  static constexpr const char* producer_id = "io.input";
  static constexpr const char* output_id = "io.output";

  explicit device(device_config cfg)
      : cfg_(std::move(cfg)),
        pipeline_(cfg_.ring_capacity, stage_graph::canonical(producer_id)),
        executor_(cfg_.schedule, pipeline_),
        port_(asset_ids(cfg_), [this](asset_id a, cycle_index c, service_id s) { return gate_.designated(a, c) == s; },
              cfg_.keep_actuator_log),
        twin_(checked_asset_count(cfg_), primary_ids(cfg_), cfg_.twin),
        manager_(executor_, gate_, twin_, cfg_.manager) {
    for (std::size_t i = 0; i < cfg_.assets.size(); ++i) {
      auto& a = cfg_.assets[i];
      if (a.plant.asset != i + 1) throw config_error("assets must be numbered 1..n in order");
      a.primary.target_asset = a.plant.asset;
      a.primary.role = service_role::active;
      a.primary.priority = priority_class::p1;
      a.primary.validate();
      for (std::size_t j = 0; j < i; ++j)
        if (cfg_.assets[j].primary.id == a.primary.id) throw config_error("duplicate service id");
      plants_.emplace_back(a.plant);
      lanes_.push_back(trace_lane{a.primary.id, no_service});
      gate_.set_primary(a.plant.asset, a.primary.id);
      auto probe = std::make_shared<service_probe>();
      executor_.register_task(make_service_task(a.primary, probe));
      manager_.add_asset(a.primary, probe);
    }
    executor_.register_task(input_task());
    executor_.set_commit_hook([this](signal_frame& f, cycle_index c) { commit(f, c); });
    register_output_task();
    executor_.register_task(recorder_task());
    executor_.register_task(manager_.monitor_task());
    executor_.register_task(publisher_task());
  }

  device(const device&) = delete;
  device& operator=(const device&) = delete;

  // --- running -------------------------------------------------------------------

  run_report run(cycle_index until, run_options opts = {}) { return executor_.run(until, opts); }
  cycle_metrics step() { return executor_.step(); }
  cycle_index current_cycle() const noexcept { return executor_.current_cycle(); }

  // --- management ------------------------------------------------------------------

  adaptation_ticket deploy_shadow(const service_descriptor& d, const resource_budget& b) { return manager_.deploy_shadow(d, b); }
  adaptation_ticket promote(asset_id a, cycle_index k) { return manager_.request_promote(a, k); }
  adaptation_ticket rollback(asset_id a, cycle_index m) { return manager_.request_rollback(a, m); }
  adaptation_ticket abort(asset_id a, std::string reason = "operator abort") { return manager_.request_abort(a, std::move(reason)); }
  adaptation_ticket reset(asset_id a) { return manager_.reset(a); }

  // Fault injection: extra execution time charged by a service every cycle.
  bool inject_cost(service_id s, nanos extra) {
    ensure_management_context("inject_cost");
    auto p = manager_.probe_of(s);
    if (!p) return false;
    p->injected_cost_ns.store(extra.count(), std::memory_order_relaxed);
    return true;
  }

  // Fresh point-in-time management view.
  management_view status() const {
    management_view v;
    v.cycle = executor_.current_cycle();
    v.assets = manager_.asset_views(v.cycle + 1);
    v.services = manager_.service_views();
    if (auto m = executor_.metrics().try_read(executor_.metrics().last_index())) v.latest_metrics = *m;
    v.twin_recorded = twin_.recorded();
    v.twin_skipped = twin_.skipped();
    return v;
  }

  // --- access ----------------------------------------------------------------------

  const device_config& config() const noexcept { return cfg_; }
  const std::string& name() const noexcept { return cfg_.name; }
  cyclic_executor& executor() noexcept { return executor_; }
  const ring_pipeline<signal_frame>& pipeline() const noexcept { return pipeline_; }
  const gate& forwarding_gate() const noexcept { return gate_; }
  const actuator_port& port() const noexcept { return port_; }
  twin_store& twin() noexcept { return twin_; }
  const twin_store& twin() const noexcept { return twin_; }
  adaptation_manager& manager() noexcept { return manager_; }
  const adaptation_manager& manager() const noexcept { return manager_; }
  const first_order_plant& plant(asset_id a) const { return plants_.at(a - 1); }
  std::size_t asset_count() const noexcept { return plants_.size(); }
  const twin_recorder& recorder() const noexcept { return recorder_; }

  std::vector<trace_row> trace(asset_id a) const {
    std::lock_guard lock(trace_mutex_);
    std::vector<trace_row> out;
    for (const auto& r : trace_)
      if (r.asset == a) out.push_back(r);
    return out;
  }

  void write_trace_csv(std::ostream& os, asset_id a = 1) const {
    os << trace_csv_header << '\n';
    for (const auto& r : trace(a))
      os << r.cycle << ',' << r.t_start_ns << ',' << format_double(r.x) << ',' << format_double(r.y) << ','
         << format_double(r.u_a) << ',' << format_double(r.u_b) << ',' << format_double(r.u_applied) << ','
         << r.source << ',' << (r.overrun ? 1 : 0) << ',' << to_string(r.state) << '\n';
  }

 private:
  struct trace_lane {
    service_id a = no_service;  // the asset's original service
    service_id b = no_service;  // most recent candidate
    std::atomic<std::uint8_t> state{0};
    trace_lane(service_id a_, service_id b_) : a(a_), b(b_) {}
    trace_lane(trace_lane&& o) noexcept : a(o.a), b(o.b), state(o.state.load()) {}
  };

  static std::size_t checked_asset_count(const device_config& cfg) {
    if (cfg.assets.empty() || cfg.assets.size() > max_assets) throw config_error("a device controls 1..4 assets");
    return cfg.assets.size();
  }

  static std::vector<asset_id> asset_ids(const device_config& cfg) {
    std::vector<asset_id> ids;
    for (const auto& a : cfg.assets) ids.push_back(a.plant.asset);
    return ids;
  }

  static std::vector<service_id> primary_ids(const device_config& cfg) {
    std::vector<service_id> ids;
    for (const auto& a : cfg.assets) ids.push_back(a.primary.id);
    return ids;
  }

  task_entry input_task() {
    task_entry t;
    t.id = producer_id;
    t.stage = stage_id::input;
    t.producer = true;
    t.nominal_cost = micros(5);
    t.run = [this](task_context& ctx) {
      auto& f = *ctx.producer_frame;
      f.asset_count = static_cast<std::uint32_t>(plants_.size());
      for (std::size_t i = 0; i < plants_.size(); ++i) {
        f.plant_state[i] = plants_[i].state();
        f.measurement[i] = plants_[i].sense();
      }
    };
    return t;
  }

  void commit(signal_frame& f, cycle_index c) {
    for (std::size_t i = 0; i < plants_.size(); ++i) {
      const auto asset = static_cast<asset_id>(i + 1);
      f.applied[i] = gate_.apply(asset, c, std::span<const service_output>(f.outputs.data(), f.output_count));
      if (auto cand = gate_.candidate(asset); cand != no_service) lanes_[i].b = cand;
    }
  }

  void register_output_task() {
    task_entry t;
    t.id = output_id;
    t.stage = stage_id::output;
    t.nominal_cost = micros(5);
    t.run = [this](task_context& ctx) {
      const auto& f = *ctx.frame;
      for (std::size_t i = 0; i < plants_.size(); ++i) {
        const auto asset = static_cast<asset_id>(i + 1);
        const auto& ap = f.applied[i];
        if (ctx.overrun)
          port_.hold(ctx.cycle, asset);
        else
          port_.actuate(ctx.cycle, asset, ap.value, ap.source, (ap.flags & frame_flags::held) != 0);
        const double u = port_.last_value(asset);
        if (cfg_.keep_trace) {
          trace_row r;
          r.cycle = ctx.cycle;
          r.t_start_ns = static_cast<std::int64_t>(ctx.cycle) * std::chrono::duration_cast<nanos>(cfg_.schedule.period).count();
          r.asset = asset;
          r.x = f.plant_state[i];
          r.y = f.measurement[i];
          if (const auto* o = f.output_of(lanes_[i].a); o && !(o->flags & frame_flags::late)) r.u_a = o->value;
          if (lanes_[i].b != no_service)
            if (const auto* o = f.output_of(lanes_[i].b); o && !(o->flags & frame_flags::late)) r.u_b = o->value;
          r.u_applied = u;
          r.source = port_.last_source(asset);
          r.overrun = ctx.overrun;
          r.state = static_cast<adaptation_state>(lanes_[i].state.load(std::memory_order_relaxed));
          std::lock_guard lock(trace_mutex_);
          trace_.push_back(r);
        }
        plants_[i].step(u);
      }
    };
    executor_.register_task(std::move(t));
    // keep the trace's state column fed without touching the manager on the stage path
    executor_.add_prep_hook([this](prep_context&) {
      for (std::size_t i = 0; i < lanes_.size(); ++i)
        lanes_[i].state.store(static_cast<std::uint8_t>(manager_.state(static_cast<asset_id>(i + 1))),
                              std::memory_order_relaxed);
    });
  }

  task_entry recorder_task() {
    task_entry t;
    t.id = "twin.recorder";
    t.stage = stage_id::async;
    t.mode = task_mode::asynchronous;
    t.run_async = [this](async_context& ctx) { recorder_.poll(*ctx.pipeline, ctx.latest, twin_); };
    return t;
  }

  task_entry publisher_task() {
    task_entry t;
    t.id = "mgmt.publisher";
    t.stage = stage_id::async;
    t.mode = task_mode::asynchronous;
    t.run_async = [this](async_context& ctx) {
      if (cfg_.publish_every == 0 || ctx.latest % cfg_.publish_every != 0) return;
      twin_.management().publish(status());
    };
    return t;
  }

  device_config cfg_;
  ring_pipeline<signal_frame> pipeline_;
  cyclic_executor executor_;
  gate gate_;
  actuator_port port_;
  twin_store twin_;
  adaptation_manager manager_;
  std::vector<first_order_plant> plants_;
  std::vector<trace_lane> lanes_;
  twin_recorder recorder_;
  mutable std::mutex trace_mutex_;
  std::vector<trace_row> trace_;
};

}  // namespace abcycle
