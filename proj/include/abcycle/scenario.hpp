// Scenario files (JSON) and the embedded scenario runner.
#pragma once

#include <chrono>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "abcycle/device.hpp"

namespace abcycle {

using json = nlohmann::json;

class scenario_error : public std::runtime_error {
 public:
  explicit scenario_error(std::vector<std::string> violations)
      : std::runtime_error(join(violations)), violations_(std::move(violations)) {}
  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string s = "scenario violates its schema:";
    for (const auto& x : v) s += "\n  - " + x;
    return s;
  }
  std::vector<std::string> violations_;
};

enum class event_kind : std::uint8_t { deploy, promote, rollback, abort, reset, inject };

inline const char* to_string(event_kind k) noexcept {
  switch (k) {
    case event_kind::deploy: return "deploy";
    case event_kind::promote: return "promote";
    case event_kind::rollback: return "rollback";
    case event_kind::abort: return "abort";
    case event_kind::reset: return "reset";
    case event_kind::inject: return "inject";
  }
  return "?";
}

// Issued between cycles: after cycle `cycle - 1` finished, before the prep window of `cycle`.
struct scenario_event {
  cycle_index cycle = 0;
  event_kind kind = event_kind::deploy;
  asset_id asset = 1;
  std::optional<cycle_index> switch_cycle;  // promote / rollback
  service_id service = no_service;          // inject
  micros cost{0};                           // inject
};

struct shadow_setup {
  service_descriptor descriptor;
  resource_budget budget;
};

struct scenario {
  std::string name = "scenario";
  std::optional<std::uint64_t> seed;
  cycle_index cycles = 1000;
  device_config device;
  std::optional<shadow_setup> shadow;
  std::vector<scenario_event> events;
  asset_id csv_asset = 1;
};

// --- parsing -------------------------------------------------------------------

namespace detail {

class schema_reader {
 public:
  std::vector<std::string> violations;

  const json* object(const json& parent, const std::string& key, const std::string& path, bool required) {
    if (!parent.contains(key)) {
      if (required) violations.push_back(path + key + ": required");
      return nullptr;
    }
    const auto& v = parent.at(key);
    if (!v.is_object()) {
      violations.push_back(path + key + ": expected an object");
      return nullptr;
    }
    return &v;
  }

  template <class T>
  std::optional<T> get(const json& parent, const std::string& key, const std::string& path, bool required = false) {
    if (!parent.contains(key)) {
      if (required) violations.push_back(path + key + ": required");
      return std::nullopt;
    }
    const auto& v = parent.at(key);
    bool ok = false;
    if constexpr (std::is_same_v<T, bool>) ok = v.is_boolean();
    else if constexpr (std::is_same_v<T, std::string>) ok = v.is_string();
    else if constexpr (std::is_floating_point_v<T>) ok = v.is_number();
    else if constexpr (std::is_unsigned_v<T>) ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    else if constexpr (std::is_integral_v<T>) ok = v.is_number_integer();
    if (!ok) {
      violations.push_back(path + key + ": wrong type");
      return std::nullopt;
    }
    return v.get<T>();
  }

  void only(const json& obj, std::initializer_list<const char*> keys, const std::string& path) {
    std::set<std::string> allowed(keys.begin(), keys.end());
    for (auto it = obj.begin(); it != obj.end(); ++it)
      if (!allowed.count(it.key())) violations.push_back(path + it.key() + ": unknown key");
  }

  template <class F>
  void check(F&& f, const std::string& path) {
    try {
      f();
    } catch (const config_error& e) {
      violations.push_back(path + e.what());
    }
  }
};

inline pid_spec read_pid(schema_reader& r, const json& j, const std::string& path) {
  r.only(j, {"id", "name", "kp", "ki", "kd", "setpoint", "integral_clamp", "nominal_cost_us", "footprint_bytes", "asset"}, path);
  pid_spec s;
  s.kp = r.get<double>(j, "kp", path).value_or(0.0);
  s.ki = r.get<double>(j, "ki", path).value_or(0.0);
  s.kd = r.get<double>(j, "kd", path).value_or(0.0);
  s.setpoint = r.get<double>(j, "setpoint", path).value_or(0.0);
  s.integral_clamp = r.get<double>(j, "integral_clamp", path).value_or(std::numeric_limits<double>::infinity());
  return s;
}

inline service_descriptor read_service(schema_reader& r, const json& j, const std::string& path) {
  service_descriptor d;
  d.id = r.get<service_id>(j, "id", path, true).value_or(no_service);
  d.name = r.get<std::string>(j, "name", path).value_or("service-" + std::to_string(d.id));
  d.controller = read_pid(r, j, path);
  if (auto c = r.get<std::int64_t>(j, "nominal_cost_us", path)) d.nominal_cost = micros(*c);
  if (auto f = r.get<std::uint64_t>(j, "footprint_bytes", path)) d.footprint_bytes = *f;
  if (auto a = r.get<asset_id>(j, "asset", path)) d.target_asset = *a;
  return d;
}

inline fidelity_spec read_fidelity(schema_reader& r, const json& j, const std::string& path, fidelity_spec def) {
  r.only(j, {"rate", "aggregations", "parameters"}, path);
  if (auto rate = r.get<std::uint64_t>(j, "rate", path)) def.rate = *rate;
  if (def.rate < 1) r.violations.push_back(path + "rate: must be >= 1");
  if (j.contains("aggregations")) {
    def.aggregations.clear();
    if (!j["aggregations"].is_array()) r.violations.push_back(path + "aggregations: expected an array");
    else
      for (const auto& a : j["aggregations"]) {
        if (!a.is_string()) {
          r.violations.push_back(path + "aggregations: expected strings");
          continue;
        }
        r.check([&] { def.aggregations.push_back(aggregation_from_string(a.get<std::string>())); }, path + "aggregations: ");
      }
  }
  if (j.contains("parameters")) {
    def.parameters.clear();
    if (!j["parameters"].is_array()) r.violations.push_back(path + "parameters: expected an array");
    else
      for (const auto& p : j["parameters"]) {
        if (!p.is_string()) r.violations.push_back(path + "parameters: expected strings");
        else def.parameters.push_back(p.get<std::string>());
      }
  }
  return def;
}

}  // namespace detail

inline scenario parse_scenario(const json& j) {
  detail::schema_reader r;
  scenario s;
  if (!j.is_object()) throw scenario_error({"scenario: expected a JSON object"});
  r.only(j, {"name", "seed", "cycles", "schedule", "ring_capacity", "assets", "shadow", "twin", "manager", "events", "csv_asset"}, "");

  s.name = r.get<std::string>(j, "name", "").value_or("scenario");
  s.seed = r.get<std::uint64_t>(j, "seed", "");
  s.cycles = r.get<cycle_index>(j, "cycles", "", true).value_or(0);
  if (s.cycles < 1) r.violations.push_back("cycles: must be >= 1");
  s.csv_asset = r.get<asset_id>(j, "csv_asset", "").value_or(1);
  s.device.name = s.name;

  auto& sched = s.device.schedule;
  if (const auto* sj = r.object(j, "schedule", "", false)) {
    r.only(*sj, {"period_us", "prep_us", "stage2_window_us", "clock", "workers", "prep_queue_depth"}, "schedule.");
    if (auto p = r.get<std::int64_t>(*sj, "period_us", "schedule.")) sched = cycle_schedule::with_period(micros(*p));
    if (auto p = r.get<std::int64_t>(*sj, "prep_us", "schedule.")) sched.prep_offset = micros(*p);
    if (auto p = r.get<std::int64_t>(*sj, "stage2_window_us", "schedule.")) sched.stage2_window = micros(*p);
    if (auto c = r.get<std::string>(*sj, "clock", "schedule.")) {
      if (*c == "deterministic") sched.mode = clock_mode::deterministic;
      else if (*c == "wall") sched.mode = clock_mode::wall_clock;
      else r.violations.push_back("schedule.clock: expected \"deterministic\" or \"wall\"");
    }
    if (auto w = r.get<std::uint64_t>(*sj, "workers", "schedule.")) sched.workers = *w;
    if (auto q = r.get<std::uint64_t>(*sj, "prep_queue_depth", "schedule.")) sched.prep_queue_depth = *q;
  }
  r.check([&] { sched.validate(); }, "schedule: ");
  if (sched.mode == clock_mode::deterministic && !s.seed) r.violations.push_back("seed: required in deterministic mode");
  const std::uint64_t seed = s.seed.value_or(0);

  s.device.ring_capacity = r.get<std::uint64_t>(j, "ring_capacity", "").value_or(16);
  if (s.device.ring_capacity < 2 || (s.device.ring_capacity & (s.device.ring_capacity - 1)))
    r.violations.push_back("ring_capacity: must be a power of two >= 2");

  if (!j.contains("assets") || !j["assets"].is_array() || j["assets"].empty() || j["assets"].size() > max_assets) {
    r.violations.push_back("assets: required array of 1..4 assets");
  } else {
    asset_id n = 0;
    for (const auto& aj : j["assets"]) {
      ++n;
      const std::string path = "assets[" + std::to_string(n - 1) + "].";
      if (!aj.is_object()) {
        r.violations.push_back(path + ": expected an object");
        continue;
      }
      r.only(aj, {"plant", "controller"}, path);
      asset_setup a;
      a.plant.asset = n;
      if (const auto* pj = r.object(aj, "plant", path, true)) {
        r.only(*pj, {"a", "b", "x0", "measurement_noise", "process_noise", "allow_unstable"}, path + "plant.");
        a.plant.a = r.get<double>(*pj, "a", path + "plant.").value_or(a.plant.a);
        a.plant.b = r.get<double>(*pj, "b", path + "plant.").value_or(a.plant.b);
        a.plant.x0 = r.get<double>(*pj, "x0", path + "plant.").value_or(0.0);
        a.plant.measurement_noise = {r.get<double>(*pj, "measurement_noise", path + "plant.").value_or(0.0), seed + 2 * n - 1};
        a.plant.process_noise = {r.get<double>(*pj, "process_noise", path + "plant.").value_or(0.0), seed + 2 * n};
        a.plant.allow_unstable = r.get<bool>(*pj, "allow_unstable", path + "plant.").value_or(false);
        r.check([&] { a.plant.validate(); }, path + "plant: ");
      }
      if (const auto* cj = r.object(aj, "controller", path, true)) {
        a.primary = detail::read_service(r, *cj, path + "controller.");
        a.primary.target_asset = n;
        r.check([&] { a.primary.validate(); }, path + "controller: ");
      }
      s.device.assets.push_back(a);
    }
  }

  if (const auto* bj = r.object(j, "shadow", "", false)) {
    r.only(*bj, {"controller", "budget"}, "shadow.");
    shadow_setup sh;
    if (const auto* cj = r.object(*bj, "controller", "shadow.", true)) {
      sh.descriptor = detail::read_service(r, *cj, "shadow.controller.");
      sh.descriptor.role = service_role::shadow;
      sh.descriptor.priority = priority_class::p2;
      r.check([&] { sh.descriptor.validate(); }, "shadow.controller: ");
      for (const auto& a : s.device.assets)
        if (a.primary.id == sh.descriptor.id) r.violations.push_back("shadow.controller.id: collides with an active service");
    }
    if (const auto* uj = r.object(*bj, "budget", "shadow.", false)) {
      r.only(*uj, {"max_stage2_us", "violation_threshold", "arena_bytes", "max_overrun_rate", "overrun_window"}, "shadow.budget.");
      auto& b = sh.budget;
      if (auto v = r.get<std::int64_t>(*uj, "max_stage2_us", "shadow.budget.")) b.max_stage2_duration = micros(*v);
      if (auto v = r.get<std::uint32_t>(*uj, "violation_threshold", "shadow.budget.")) b.violation_threshold = *v;
      if (auto v = r.get<std::uint64_t>(*uj, "arena_bytes", "shadow.budget.")) b.arena_limit_bytes = *v;
      if (auto v = r.get<double>(*uj, "max_overrun_rate", "shadow.budget.")) b.max_overrun_rate = *v;
      if (auto v = r.get<std::uint64_t>(*uj, "overrun_window", "shadow.budget.")) b.overrun_window = *v;
      r.check([&] { b.validate(); }, "shadow.budget: ");
    }
    s.shadow = sh;
  }

  if (const auto* tj = r.object(j, "twin", "", false)) {
    r.only(*tj, {"depth", "supervisory", "kpi", "enable_higher_levels"}, "twin.");
    auto& t = s.device.twin;
    t.depth = r.get<std::uint64_t>(*tj, "depth", "twin.").value_or(t.depth);
    t.enable_higher_levels = r.get<bool>(*tj, "enable_higher_levels", "twin.").value_or(true);
    if (const auto* f = r.object(*tj, "supervisory", "twin.", false)) t.supervisory = detail::read_fidelity(r, *f, "twin.supervisory.", t.supervisory);
    if (const auto* f = r.object(*tj, "kpi", "twin.", false)) t.kpi = detail::read_fidelity(r, *f, "twin.kpi.", t.kpi);
  }

  if (const auto* mj = r.object(j, "manager", "", false)) {
    r.only(*mj, {"health_window", "retention", "arena_bytes"}, "manager.");
    auto& m = s.device.manager;
    m.health_window = r.get<cycle_index>(*mj, "health_window", "manager.").value_or(m.health_window);
    m.retention = r.get<cycle_index>(*mj, "retention", "manager.").value_or(m.retention);
    m.arena_bytes = r.get<std::uint64_t>(*mj, "arena_bytes", "manager.").value_or(m.arena_bytes);
  }

  if (j.contains("events")) {
    if (!j["events"].is_array()) {
      r.violations.push_back("events: expected an array");
    } else {
      cycle_index prev = 0;
      std::size_t i = 0;
      for (const auto& ej : j["events"]) {
        const std::string path = "events[" + std::to_string(i++) + "].";
        if (!ej.is_object()) {
          r.violations.push_back(path + ": expected an object");
          continue;
        }
        r.only(ej, {"cycle", "type", "asset", "switch_cycle", "service", "cost_us"}, path);
        scenario_event e;
        e.cycle = r.get<cycle_index>(ej, "cycle", path, true).value_or(0);
        const auto type = r.get<std::string>(ej, "type", path, true).value_or("");
        static const std::map<std::string, event_kind> kinds{{"deploy", event_kind::deploy},   {"promote", event_kind::promote},
                                                             {"rollback", event_kind::rollback}, {"abort", event_kind::abort},
                                                             {"reset", event_kind::reset},     {"inject", event_kind::inject}};
        if (auto it = kinds.find(type); it != kinds.end()) e.kind = it->second;
        else if (!type.empty()) r.violations.push_back(path + "type: unknown event type '" + type + "'");
        e.asset = r.get<asset_id>(ej, "asset", path).value_or(1);
        e.switch_cycle = r.get<cycle_index>(ej, "switch_cycle", path);
        e.service = r.get<service_id>(ej, "service", path).value_or(no_service);
        e.cost = micros(r.get<std::int64_t>(ej, "cost_us", path).value_or(0));
        if (e.cycle < 1 || e.cycle > s.cycles) r.violations.push_back(path + "cycle: outside 1..cycles");
        if (e.cycle <= prev) r.violations.push_back(path + "cycle: event cycles must be strictly increasing");
        prev = std::max(prev, e.cycle);
        if ((e.kind == event_kind::promote || e.kind == event_kind::rollback) && !e.switch_cycle)
          r.violations.push_back(path + "switch_cycle: required for " + type);
        if (e.kind == event_kind::deploy && !j.contains("shadow"))
          r.violations.push_back(path + "type: deploy needs a 'shadow' section");
        if (e.kind == event_kind::inject && e.service == no_service) r.violations.push_back(path + "service: required for inject");
        if (e.asset < 1 || e.asset > s.device.assets.size()) r.violations.push_back(path + "asset: unknown asset");
        s.events.push_back(e);
      }
    }
  }
  if (s.csv_asset < 1 || s.csv_asset > std::max<std::size_t>(1, s.device.assets.size()))
    r.violations.push_back("csv_asset: unknown asset");

  if (!r.violations.empty()) throw scenario_error(std::move(r.violations));
  return s;
}

inline scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw scenario_error({path + ": cannot open"});
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw scenario_error({path + ": " + e.what()});
  }
  return parse_scenario(j);
}

// --- running -------------------------------------------------------------------------

struct event_outcome {
  scenario_event event;
  bool accepted = false;
  std::string reason;
  std::optional<cycle_index> applied_in;  // prep window that handled it
};

struct source_change {
  asset_id asset = 0;
  cycle_index cycle = 0;
  service_id from = no_service;
  service_id to = no_service;
};

struct run_summary {
  std::string scenario;
  cycle_index cycles = 0;
  std::uint64_t overruns = 0;
  std::uint64_t deadline_misses = 0;
  double deadline_met_ratio = 1.0;
  std::int64_t p99_jitter_ns = 0;
  std::vector<source_change> switches;
  std::optional<double> divergence_rms;
  std::optional<double> divergence_max;
  double skip_ratio = 0.0;
  std::size_t integrity_faults = 0;
  std::uint64_t actuator_writes = 0;
  std::vector<std::string> final_states;
  std::vector<event_outcome> events;
  double wall_seconds = 0.0;
};

inline json to_json(const run_summary& s) {
  json j;
  j["scenario"] = s.scenario;
  j["cycles"] = s.cycles;
  j["overruns"] = s.overruns;
  j["deadline_misses"] = s.deadline_misses;
  j["deadline_met_ratio"] = s.deadline_met_ratio;
  j["p99_start_jitter_ns"] = s.p99_jitter_ns;
  j["switches"] = json::array();
  for (const auto& c : s.switches) j["switches"].push_back({{"asset", c.asset}, {"cycle", c.cycle}, {"from", c.from}, {"to", c.to}});
  j["divergence_rms"] = s.divergence_rms ? json(*s.divergence_rms) : json(nullptr);
  j["divergence_max"] = s.divergence_max ? json(*s.divergence_max) : json(nullptr);
  j["skip_ratio"] = s.skip_ratio;
  j["integrity_faults"] = s.integrity_faults;
  j["actuator_writes"] = s.actuator_writes;
  j["final_states"] = s.final_states;
  j["events"] = json::array();
  for (const auto& e : s.events) {
    json ej{{"cycle", e.event.cycle}, {"type", to_string(e.event.kind)}, {"asset", e.event.asset}, {"accepted", e.accepted}};
    if (!e.reason.empty()) ej["reason"] = e.reason;
    if (e.applied_in) ej["applied_in"] = *e.applied_in;
    j["events"].push_back(ej);
  }
  j["wall_seconds"] = s.wall_seconds;
  return j;
}

inline void write_summary_text(std::ostream& os, const run_summary& s) {
  os << "scenario            " << s.scenario << '\n'
     << "cycles              " << s.cycles << '\n'
     << "overruns            " << s.overruns << '\n'
     << "deadline met        " << std::fixed << std::setprecision(4) << s.deadline_met_ratio * 100.0 << " %\n"
     << "p99 start jitter    " << s.p99_jitter_ns << " ns\n";
  os.unsetf(std::ios::floatfield);
  for (const auto& c : s.switches)
    os << "applied source      asset " << c.asset << ": " << c.from << " -> " << c.to << " at cycle " << c.cycle << '\n';
  if (s.switches.empty()) os << "applied source      unchanged\n";
  os << "divergence rms      " << (s.divergence_rms ? format_double(*s.divergence_rms) : std::string("n/a")) << '\n'
     << "twin skip ratio     " << s.skip_ratio << '\n'
     << "actuator writes     " << s.actuator_writes << '\n'
     << "integrity faults    " << s.integrity_faults << '\n';
  for (std::size_t i = 0; i < s.final_states.size(); ++i) os << "state asset " << i + 1 << "       " << s.final_states[i] << '\n';
  for (const auto& e : s.events)
    os << "event @" << e.event.cycle << ' ' << to_string(e.event.kind) << ": "
       << (e.accepted ? (e.applied_in ? "applied in prep window " + std::to_string(*e.applied_in) : std::string("accepted"))
                      : "rejected (" + e.reason + ")")
       << '\n';
  os << "wall time           " << s.wall_seconds << " s\n";
}

struct scenario_result {
  run_report report;
  run_summary summary;
};

// Issue one scripted event against a device.
inline adaptation_ticket issue_event(device& d, const scenario& s, const scenario_event& e) {
  switch (e.kind) {
    case event_kind::deploy: {
      auto desc = s.shadow->descriptor;
      desc.target_asset = e.asset;
      return d.deploy_shadow(desc, s.shadow->budget);
    }
    case event_kind::promote: return d.promote(e.asset, *e.switch_cycle);
    case event_kind::rollback: return d.rollback(e.asset, *e.switch_cycle);
    case event_kind::abort: return d.abort(e.asset);
    case event_kind::reset: return d.reset(e.asset);
    case event_kind::inject:
      if (d.inject_cost(e.service, e.cost)) return {true, {}, std::nullopt};
      return {false, "unknown service " + std::to_string(e.service), std::nullopt};
  }
  return {false, "unknown event", std::nullopt};
}

inline run_summary summarize(const device& d, const scenario& s, const run_report& report,
                             const std::vector<event_outcome>& events, double wall_seconds) {
  run_summary sum;
  sum.scenario = s.name;
  sum.cycles = report.cycles_run;
  sum.overruns = report.overruns;
  sum.deadline_misses = report.deadline_misses;
  sum.deadline_met_ratio = report.deadline_met_ratio();
  sum.p99_jitter_ns = report.jitter_percentile(99.0);
  for (asset_id a = 1; a <= d.asset_count(); ++a) {
    const auto tr = d.trace(a);
    for (std::size_t i = 1; i < tr.size(); ++i)
      if (tr[i].source != tr[i - 1].source) sum.switches.push_back({a, tr[i].cycle, tr[i - 1].source, tr[i].source});
    sum.actuator_writes += d.port().write_count(a);
    sum.final_states.push_back(to_string(d.manager().state(a)));
  }
  if (s.shadow) {
    const auto a = s.device.assets.at(s.csv_asset - 1).primary.id;
    if (auto div = d.twin().divergence(a, s.shadow->descriptor.id, 1, report.cycles_run + 1'000'000'000ULL)) {
      sum.divergence_rms = div->rms;
      sum.divergence_max = div->max;
    }
  }
  sum.skip_ratio = d.twin().skip_ratio();
  sum.integrity_faults = d.port().faults().size();
  sum.events = events;
  sum.wall_seconds = wall_seconds;
  return sum;
}

// Run a scenario to completion on a fresh device (embedded mode).
inline scenario_result run_scenario(const scenario& s, device& d, std::ostream* progress = nullptr) {
  const auto wall_start = std::chrono::steady_clock::now();
  scenario_result out;
  std::vector<event_outcome> outcomes;
  std::vector<std::optional<prep_ticket>> tickets;
  auto absorb = [&](run_report&& r) {
    out.report.cycles_run += r.cycles_run;
    out.report.overruns += r.overruns;
    out.report.deadline_misses += r.deadline_misses;
    out.report.jitter_ns.insert(out.report.jitter_ns.end(), r.jitter_ns.begin(), r.jitter_ns.end());
    out.report.cycles.insert(out.report.cycles.end(), r.cycles.begin(), r.cycles.end());
    if (r.aborted) {
      out.report.aborted = true;
      out.report.abort_reason = r.abort_reason;
    }
  };
  const cycle_index chunk = 10'000;
  auto run_to = [&](cycle_index until) {
    while (d.current_cycle() < until && !out.report.aborted) {
      const cycle_index next = std::min(until, d.current_cycle() + chunk);
      absorb(d.run(next));
      if (progress) *progress << "cycle " << d.current_cycle() << " / " << s.cycles << '\n';
    }
  };
  for (const auto& e : s.events) {
    run_to(e.cycle - 1);
    auto t = issue_event(d, s, e);
    outcomes.push_back({e, t.accepted, t.reason, std::nullopt});
    tickets.push_back(t.applied);
  }
  run_to(s.cycles);
  d.twin().flush();
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (!tickets[i] || tickets[i]->wait_for(std::chrono::seconds(0)) != std::future_status::ready) continue;
    const auto o = tickets[i]->get();
    outcomes[i].applied_in = o.cycle;
    if (!o.applied) {
      outcomes[i].accepted = false;
      outcomes[i].reason = o.reason;
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
  out.summary = summarize(d, s, out.report, outcomes, secs);
  return out;
}

// --- line-delimited exports ------------------------------------------------------------

inline void write_transitions_ndjson(std::ostream& os, const std::vector<transition_record>& history) {
  for (const auto& t : history)
    os << json{{"cycle", t.cycle}, {"asset", t.asset}, {"from", to_string(t.from)}, {"to", to_string(t.to)}, {"reason", t.reason}}.dump()
       << '\n';
}

inline void write_events_ndjson(std::ostream& os, const std::vector<management_event>& events) {
  for (const auto& e : events)
    os << json{{"cycle", e.cycle}, {"asset", e.asset}, {"kind", e.kind}, {"detail", e.detail}}.dump() << '\n';
}

}  // namespace abcycle
