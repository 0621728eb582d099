// -----------------------------------------------------------------------------
// management_gateway: the only door into a running device.
//
// Wire format: one JSON object per line (UTF-8, '\n' terminated)
//
//   {"v":1,"type":"<type>","id":<correlation id>,"payload":{...}}
//
// Requests:  deploy_shadow, promote, rollback, abort, status, subscribe_metrics
// Responses: ack | error (same id), metrics_push (id = subscription id)
//
// Every well-formed request gets exactly one ack or error. State-mutating
// requests are serialized through one command lane. The same payloads are
// bridged to browsers over HTTP: POST /command (one message in, one out) and
// GET /events (server-sent metrics_push stream).
// -----------------------------------------------------------------------------
#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "abcycle/device.hpp"
#include "abcycle/scenario.hpp"

namespace abcycle {

inline constexpr int protocol_version = 1;

// --- configuration --------------------------------------------------------------

struct gateway_config {
  std::string host = "127.0.0.1";
  std::uint16_t port = 7411;
  std::uint16_t http_port = 0;  // 0 = no browser bridge
  std::chrono::milliseconds push_interval{100};
  std::chrono::milliseconds apply_timeout{1000};  // how long a request waits for its prep window
  cycle_index commit_margin = 10;                 // minimum lead of a coordinated switch
};

inline gateway_config gateway_config_from_json(const json& j, gateway_config c = {}) {
  detail::schema_reader r;
  if (!j.is_object()) throw scenario_error({"gateway config: expected a JSON object"});
  r.only(j, {"host", "port", "http_port", "push_interval_ms", "apply_timeout_ms", "commit_margin"}, "");
  c.host = r.get<std::string>(j, "host", "").value_or(c.host);
  c.port = r.get<std::uint16_t>(j, "port", "").value_or(c.port);
  c.http_port = r.get<std::uint16_t>(j, "http_port", "").value_or(c.http_port);
  if (auto v = r.get<std::int64_t>(j, "push_interval_ms", "")) c.push_interval = std::chrono::milliseconds(*v);
  if (auto v = r.get<std::int64_t>(j, "apply_timeout_ms", "")) c.apply_timeout = std::chrono::milliseconds(*v);
  c.commit_margin = r.get<cycle_index>(j, "commit_margin", "").value_or(c.commit_margin);
  if (c.push_interval.count() <= 0) r.violations.push_back("push_interval_ms: must be positive");
  if (!r.violations.empty()) throw scenario_error(std::move(r.violations));
  return c;
}

// ABCYCLE_GATEWAY_HOST, ABCYCLE_GATEWAY_PORT, ABCYCLE_HTTP_PORT, ABCYCLE_PUSH_INTERVAL_MS
inline gateway_config apply_env_overrides(gateway_config c, const std::function<const char*(const char*)>& getenv_fn = std::getenv) {
  auto num = [&](const char* name, auto& field) {
    if (const char* v = getenv_fn(name)) {
      try {
        field = static_cast<std::remove_reference_t<decltype(field)>>(std::stoul(v));
      } catch (const std::exception&) {
        throw config_error(std::string(name) + ": not a number: '" + v + "'");
      }
    }
  };
  if (const char* h = getenv_fn("ABCYCLE_GATEWAY_HOST")) c.host = h;
  num("ABCYCLE_GATEWAY_PORT", c.port);
  num("ABCYCLE_HTTP_PORT", c.http_port);
  if (const char* v = getenv_fn("ABCYCLE_PUSH_INTERVAL_MS")) {
    std::uint32_t ms = 0;
    num("ABCYCLE_PUSH_INTERVAL_MS", ms);
    if (ms == 0) throw config_error(std::string("ABCYCLE_PUSH_INTERVAL_MS: must be positive, got '") + v + "'");
    c.push_interval = std::chrono::milliseconds(ms);
  }
  return c;
}

inline gateway_config load_gateway_config(const std::optional<std::string>& path) {
  gateway_config c;
  if (path) {
    std::ifstream in(*path);
    if (!in) throw scenario_error({*path + ": cannot open"});
    try {
      c = gateway_config_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
      throw scenario_error({*path + ": " + e.what()});
    }
  }
  return apply_env_overrides(c);
}

// --- messages ------------------------------------------------------------------------

inline json make_message(std::string_view type, const json& id, json payload = json::object()) {
  return json{{"v", protocol_version}, {"type", type}, {"id", id}, {"payload", std::move(payload)}};
}

inline json make_ack(const json& id, json payload = json::object()) { return make_message("ack", id, std::move(payload)); }

inline json make_error(const json& id, std::string_view reason, std::string_view detail = {}) {
  json p{{"reason", reason}};
  if (!detail.empty()) p["detail"] = detail;
  return make_message("error", id, std::move(p));
}

inline const std::vector<std::string>& request_types() {
  static const std::vector<std::string> t{"deploy_shadow", "promote", "rollback", "abort", "status", "subscribe_metrics"};
  return t;
}

inline json to_json(const cycle_metrics& m) {
  return json{{"cycle", m.cycle},
              {"t_start_ns", m.t_start_ns},
              {"start_jitter_ns", m.start_jitter_ns},
              {"stage_ns", m.stage_ns},
              {"overrun", m.overrun},
              {"deadline_met", m.deadline_met}};
}

inline json to_json(const management_view& v) {
  json j;
  j["cycle"] = v.cycle;
  j["assets"] = json::array();
  for (const auto& a : v.assets)
    j["assets"].push_back({{"asset", a.asset}, {"state", a.adaptation_state}, {"forwarding", a.forwarding}, {"shadow", a.shadow}});
  j["services"] = json::array();
  for (const auto& s : v.services)
    j["services"].push_back({{"id", s.id},
                             {"name", s.name},
                             {"role", s.role},
                             {"priority", s.priority},
                             {"asset", s.asset},
                             {"registered", s.registered},
                             {"budget_us", s.budget_us}});
  j["metrics"] = to_json(v.latest_metrics);
  j["twin"] = {{"recorded", v.twin_recorded}, {"skipped", v.twin_skipped}};
  return j;
}

// Descriptor/budget from a deploy_shadow payload (same keys as the scenario file).
inline shadow_setup shadow_from_json(const json& service, const json* budget, asset_id asset) {
  detail::schema_reader r;
  shadow_setup s;
  s.descriptor = detail::read_service(r, service, "service.");
  s.descriptor.target_asset = asset;
  if (budget) {
    r.only(*budget, {"max_stage2_us", "violation_threshold", "arena_bytes", "max_overrun_rate", "overrun_window"}, "budget.");
    auto& b = s.budget;
    if (auto v = r.get<std::int64_t>(*budget, "max_stage2_us", "budget.")) b.max_stage2_duration = micros(*v);
    if (auto v = r.get<std::uint32_t>(*budget, "violation_threshold", "budget.")) b.violation_threshold = *v;
    if (auto v = r.get<std::uint64_t>(*budget, "arena_bytes", "budget.")) b.arena_limit_bytes = *v;
    if (auto v = r.get<double>(*budget, "max_overrun_rate", "budget.")) b.max_overrun_rate = *v;
    if (auto v = r.get<std::uint64_t>(*budget, "overrun_window", "budget.")) b.overrun_window = *v;
  }
  if (!r.violations.empty()) throw scenario_error(std::move(r.violations));
  return s;
}

// --- protocol core ---------------------------------------------------------------------

// Transport-independent request handler for one or more in-process devices.
class gateway_core {
 public:
  explicit gateway_core(gateway_config cfg = {}) : cfg_(std::move(cfg)) {}

  void attach(device& d, std::optional<shadow_setup> default_shadow = std::nullopt) {
    std::lock_guard lock(devices_mutex_);
    if (devices_.count(d.name())) throw config_error("device '" + d.name() + "' already attached");
    devices_[d.name()] = entry{&d, std::move(default_shadow)};
    if (default_device_.empty()) default_device_ = d.name();
  }

  const gateway_config& config() const noexcept { return cfg_; }
  std::vector<std::string> device_names() const {
    std::lock_guard lock(devices_mutex_);
    std::vector<std::string> out;
    for (const auto& [n, e] : devices_) out.push_back(n);
    return out;
  }

  // Handle one raw line. Always yields exactly one response.
  json handle_line(std::string_view line) {
    json msg;
    try {
      msg = json::parse(line);
    } catch (const json::exception& e) {  // syntax errors and out-of-range numbers
      return make_error(nullptr, "parse", e.what());
    }
    return handle(msg);
  }

  json handle(const json& msg) {
    ensure_management_context("gateway request");
    if (!msg.is_object()) return make_error(nullptr, "parse", "message must be a JSON object");
    const json id = msg.contains("id") ? msg["id"] : json(nullptr);
    if (!id.is_string() && !id.is_number_integer()) return make_error(id, "schema", "id must be a string or integer");
    if (!msg.contains("v") || msg["v"] != protocol_version)
      return make_error(id, "version", "expected \"v\":" + std::to_string(protocol_version));
    if (!msg.contains("type") || !msg["type"].is_string()) return make_error(id, "schema", "type must be a string");
    const json payload = msg.contains("payload") ? msg["payload"] : json::object();
    if (!payload.is_object()) return make_error(id, "schema", "payload must be an object");
    const auto type = msg["type"].get<std::string>();
    try {
      if (type == "status") return status(id, payload);
      if (type == "subscribe_metrics") return subscribe(id, payload);
      if (type == "deploy_shadow" || type == "promote" || type == "rollback" || type == "abort") {
        std::lock_guard lane(command_mutex_);
        if (type == "deploy_shadow") return deploy(id, payload);
        if (type == "promote") return promote(id, payload);
        if (type == "rollback") return rollback(id, payload);
        return abort(id, payload);
      }
      return make_error(id, "unknown_type", "unknown message type '" + type + "'");
    } catch (const scenario_error& e) {
      return make_error(id, "schema", e.what());
    } catch (const backpressure_error& e) {
      return make_error(id, "backpressure", e.what());
    } catch (const std::exception& e) {
      return make_error(id, "internal", e.what());
    }
  }

  // Body of a metrics_push for one subscription.
  json metrics_payload(const std::string& subscription, const std::string& device_name) {
    auto& d = *lookup(device_name).dev;
    json p = to_json(d.status());
    p["subscription"] = subscription;
    p["device"] = d.name();
    // divergence of the asset-1 pair over the last push interval's worth of cycles
    const auto shadow = d.manager().shadow_of(1);
    if (shadow) {
      const auto now = d.current_cycle();
      const auto from = now > 1000 ? now - 1000 : 1;
      if (auto div = d.twin().divergence(d.manager().primary_of(1).id, shadow->id, from, now))
        p["divergence"] = {{"rms", div->rms}, {"max", div->max}, {"last", div->per_cycle.back().abs_diff}};
    }
    return p;
  }

  // Registered by transports: subscription id -> device name.
  std::optional<std::string> take_subscription_request(const json& response) {
    if (response.value("type", "") != "ack") return std::nullopt;
    const auto& p = response["payload"];
    if (!p.contains("subscription")) return std::nullopt;
    return p["subscription"].get<std::string>();
  }

 private:
  struct entry {
    device* dev = nullptr;
    std::optional<shadow_setup> default_shadow;
  };

  entry& lookup(const std::string& name) {
    std::lock_guard lock(devices_mutex_);
    auto it = devices_.find(name.empty() ? default_device_ : name);
    if (it == devices_.end()) throw scenario_error({"device: unknown device '" + name + "'"});
    return it->second;
  }

  entry& target(const json& payload) { return lookup(payload.value("device", std::string())); }

  static asset_id asset_of(const json& payload) {
    if (!payload.contains("asset")) return 1;
    const auto& a = payload["asset"];
    if (!a.is_number_integer() || a.get<std::int64_t>() < 0 || a.get<std::uint64_t>() > std::numeric_limits<asset_id>::max())
      throw scenario_error({"asset: expected an unsigned integer"});
    return a.get<asset_id>();
  }

  static cycle_index cycle_of(const json& payload) {
    if (!payload.contains("cycle") || !payload["cycle"].is_number_integer() || payload["cycle"].get<std::int64_t>() < 0)
      throw scenario_error({"cycle: required unsigned integer"});
    return payload["cycle"].get<cycle_index>();
  }

  // Wait (bounded) for the prep window that applies the request.
  json settle(const json& id, const adaptation_ticket& t, json ack_payload) {
    if (!t.accepted) return make_error(id, "rejected", t.reason);
    if (!t.applied) return make_ack(id, std::move(ack_payload));
    if (t.applied->wait_for(cfg_.apply_timeout) != std::future_status::ready) {
      ack_payload["pending"] = true;
      return make_ack(id, std::move(ack_payload));
    }
    const auto o = t.applied->get();
    if (!o.applied) return make_error(id, "rejected", o.reason);
    ack_payload["applied_in"] = o.cycle;
    return make_ack(id, std::move(ack_payload));
  }

  json status(const json& id, const json& payload) {
    auto& e = target(payload);
    const auto asset = asset_of(payload);
    json p = to_json(e.dev->status());
    p["device"] = e.dev->name();
    p["asset"] = asset;
    p["state"] = to_string(e.dev->manager().state(asset));
    p["history"] = json::array();
    for (const auto& h : e.dev->manager().history())
      if (h.asset == asset)
        p["history"].push_back({{"cycle", h.cycle}, {"from", to_string(h.from)}, {"to", to_string(h.to)}, {"reason", h.reason}});
    if (payload.contains("export")) {
      if (payload["export"] != "trace") throw scenario_error({"export: only \"trace\" is supported"});
      std::ostringstream csv;
      e.dev->write_trace_csv(csv, asset);
      p["csv"] = csv.str();
    }
    return make_ack(id, std::move(p));
  }

  json subscribe(const json& id, const json& payload) {
    auto& e = target(payload);
    const auto sid = "sub-" + std::to_string(++subscriptions_);
    return make_ack(id, {{"subscription", sid},
                         {"device", e.dev->name()},
                         {"interval_ms", cfg_.push_interval.count()}});
  }

  json deploy(const json& id, const json& payload) {
    auto& e = target(payload);
    const auto asset = asset_of(payload);
    shadow_setup s;
    if (payload.contains("service")) {
      if (!payload["service"].is_object()) throw scenario_error({"service: expected an object"});
      const json* budget = payload.contains("budget") ? &payload["budget"] : nullptr;
      s = shadow_from_json(payload["service"], budget, asset);
    } else if (e.default_shadow) {
      s = *e.default_shadow;
      s.descriptor.target_asset = asset;
    } else {
      throw scenario_error({"service: required (no default shadow configured)"});
    }
    auto t = e.dev->deploy_shadow(s.descriptor, s.budget);
    // deployment spans several prep windows; acknowledge the first one
    return settle(id, t, {{"asset", asset}, {"service", s.descriptor.id}});
  }

  json promote(const json& id, const json& payload) {
    auto& e = target(payload);
    const auto asset = asset_of(payload);
    const auto phase = payload.value("phase", std::string("arm"));
    if (phase == "prepare") {
      const auto k = cycle_of(payload);
      if (auto nack = e.dev->manager().prepare_promote(asset, k, cfg_.commit_margin)) return make_error(id, "nack", *nack);
      return make_ack(id, {{"asset", asset}, {"cycle", k}, {"vote", "ack"}});
    }
    if (phase == "cancel") {
      const auto k = cycle_of(payload);
      return settle(id, e.dev->manager().cancel_switch(asset, k), {{"asset", asset}, {"cycle", k}, {"cancelled", true}});
    }
    if (phase != "arm" && phase != "commit") throw scenario_error({"phase: expected arm, prepare, commit or cancel"});
    const auto k = cycle_of(payload);
    if (phase == "commit" && e.dev->manager().prepared_switch(asset) != k)
      return make_error(id, "rejected", "commit for cycle " + std::to_string(k) + " without a matching prepare");
    return settle(id, e.dev->promote(asset, k), {{"asset", asset}, {"cycle", k}, {"armed", true}});
  }

  json rollback(const json& id, const json& payload) {
    auto& e = target(payload);
    const auto asset = asset_of(payload);
    const auto m = cycle_of(payload);
    return settle(id, e.dev->rollback(asset, m), {{"asset", asset}, {"cycle", m}, {"armed", true}});
  }

  json abort(const json& id, const json& payload) {
    auto& e = target(payload);
    const auto asset = asset_of(payload);
    return settle(id, e.dev->abort(asset, payload.value("reason", std::string("operator abort"))), {{"asset", asset}});
  }

  gateway_config cfg_;
  mutable std::mutex devices_mutex_;
  std::map<std::string, entry> devices_;
  std::string default_device_;
  std::mutex command_mutex_;
  std::atomic<std::uint64_t> subscriptions_{0};
};

// --- multi-device switch agreement ---------------------------------------------------

// Sends one request to a participant and returns its response (nothing on timeout).
using participant = std::function<std::optional<json>(const json& request)>;

struct switch_agreement {
  cycle_index k = 0;
  std::vector<std::string> participants;
  std::vector<std::optional<bool>> votes;  // ack / nack / no answer
  bool committed = false;
  std::string reason;
};

inline participant local_participant(gateway_core& core, std::string device_name = {}) {
  return [&core, device_name](const json& req) -> std::optional<json> {
    json r = req;
    if (!device_name.empty()) r["payload"]["device"] = device_name;
    return core.handle(r);
  };
}

// Two-phase: every participant votes on k (prepare); only a unanimous ack leads
// to commit. A commit that fails after others armed cancels the armed ones, so
// either every gate switches at k or none does.
inline switch_agreement coordinate_switch(const std::vector<std::pair<std::string, participant>>& devices, asset_id asset,
                                          cycle_index k) {
  switch_agreement a;
  a.k = k;
  std::uint64_t seq = 0;
  auto request = [&](const participant& p, const std::string& phase) -> std::optional<json> {
    return p(make_message("promote", "agree-" + std::to_string(k) + "-" + std::to_string(++seq),
                          {{"asset", asset}, {"cycle", k}, {"phase", phase}}));
  };
  auto acked = [](const std::optional<json>& r) { return r && r->value("type", "") == "ack" && !(*r)["payload"].value("pending", false); };

  for (const auto& [name, p] : devices) {
    a.participants.push_back(name);
    const auto r = request(p, "prepare");
    a.votes.push_back(r ? std::optional<bool>(acked(r)) : std::nullopt);
    if (!acked(r) && a.reason.empty())
      a.reason = name + ": " + (r ? (*r)["payload"].value("detail", std::string("nack")) : std::string("no answer"));
  }
  const bool unanimous = std::all_of(a.votes.begin(), a.votes.end(), [](const auto& v) { return v.value_or(false); });
  if (!unanimous || devices.empty()) {
    for (const auto& [name, p] : devices) request(p, "cancel");  // drop prepared votes
    if (devices.empty()) a.reason = "no participants";
    return a;
  }
  std::vector<std::size_t> armed;
  for (std::size_t i = 0; i < devices.size(); ++i) {
    const auto r = request(devices[i].second, "commit");
    if (!acked(r)) {
      a.reason = devices[i].first + ": commit failed: " +
                 (r ? (*r)["payload"].value("detail", std::string("pending")) : std::string("no answer"));
      for (std::size_t j = 0; j < devices.size(); ++j) request(devices[j].second, "cancel");
      return a;
    }
    armed.push_back(i);
  }
  a.committed = true;
  return a;
}

// --- device driver -----------------------------------------------------------------------

// Runs devices on a background thread: wall-clock devices free-run, deterministic
// ones are stepped in lockstep, optionally paced to their period.
class device_driver {
 public:
  // `pace`: wall time per lockstep cycle (default: the schedule period; zero = as fast as possible).
  device_driver(std::vector<device*> devices, cycle_index until, std::optional<micros> pace = std::nullopt)
      : devices_(std::move(devices)), until_(until), pace_(pace) {}
  ~device_driver() { stop(); }

  void start() {
    thread_ = std::thread([this] { loop(); });
  }

  void stop() {
    stop_.store(true, std::memory_order_release);
    for (auto* d : devices_) d->executor().request_stop();
    if (thread_.joinable()) thread_.join();
  }

  void join() {
    if (thread_.joinable()) thread_.join();
  }

  bool finished() const noexcept { return finished_.load(std::memory_order_acquire); }
  const std::vector<run_report>& reports() const noexcept { return reports_; }

 private:
  void loop() {
    reports_.resize(devices_.size());
    if (devices_.size() == 1 && devices_[0]->config().schedule.mode == clock_mode::wall_clock) {
      reports_[0] = devices_[0]->run(until_, run_options{false});
    } else {
      const auto period = pace_.value_or(devices_.empty() ? micros(1000) : devices_[0]->config().schedule.period);
      auto next = std::chrono::steady_clock::now();
      while (!stop_.load(std::memory_order_acquire)) {
        bool all_done = true;
        for (std::size_t i = 0; i < devices_.size(); ++i) {
          auto* d = devices_[i];
          if (d->current_cycle() >= until_) continue;
          all_done = false;
          const auto m = d->step();
          ++reports_[i].cycles_run;
          if (m.overrun) ++reports_[i].overruns;
          if (!m.deadline_met) ++reports_[i].deadline_misses;
        }
        if (all_done) break;
        if (period.count() > 0) {
          next += period;
          std::this_thread::sleep_until(next);
        }
      }
    }
    finished_.store(true, std::memory_order_release);
  }

  std::vector<device*> devices_;
  cycle_index until_;
  std::optional<micros> pace_;
  std::thread thread_;
  std::atomic<bool> stop_{false};
  std::atomic<bool> finished_{false};
  std::vector<run_report> reports_;
};

// --- TCP transport --------------------------------------------------------------------------

class gateway_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline bool send_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const auto n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n <= 0) return false;
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

}  // namespace detail

// NDJSON over TCP, one thread per connection plus one pusher.
class gateway_server {
 public:
  explicit gateway_server(gateway_core& core) : core_(core) {}
  ~gateway_server() { stop(); }

  gateway_server(const gateway_server&) = delete;
  gateway_server& operator=(const gateway_server&) = delete;

  // Binds and starts accepting; returns the bound port (useful with port 0).
  std::uint16_t start() {
    const auto& cfg = core_.config();
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw gateway_error("socket: " + std::string(std::strerror(errno)));
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(cfg.port);
    if (::inet_pton(AF_INET, cfg.host.c_str(), &addr.sin_addr) != 1) {
      ::close(listen_fd_);
      throw gateway_error("invalid listen address '" + cfg.host + "'");
    }
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 16) != 0) {
      const std::string why = std::strerror(errno);
      ::close(listen_fd_);
      listen_fd_ = -1;
      throw gateway_error("cannot listen on " + cfg.host + ":" + std::to_string(cfg.port) + ": " + why);
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    running_.store(true);
    accept_thread_ = std::thread([this] { accept_loop(); });
    push_thread_ = std::thread([this] { push_loop(); });
    return port_;
  }

  void stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    push_cv_.notify_all();
    if (accept_thread_.joinable()) accept_thread_.join();
    if (push_thread_.joinable()) push_thread_.join();
    std::list<std::shared_ptr<connection>> conns;
    {
      std::lock_guard lock(conn_mutex_);
      conns = connections_;
    }
    for (auto& c : conns) ::shutdown(c->fd, SHUT_RDWR);
    for (auto& c : conns)
      if (c->reader.joinable()) c->reader.join();
    std::lock_guard lock(conn_mutex_);
    for (auto& c : connections_) ::close(c->fd);
    connections_.clear();
  }

  std::uint16_t port() const noexcept { return port_; }
  std::uint64_t pushes_sent() const noexcept { return pushes_.load(); }

 private:
  struct connection {
    int fd = -1;
    std::mutex write_mutex;
    std::thread reader;
    std::mutex sub_mutex;
    std::vector<std::pair<std::string, std::string>> subscriptions;  // id, device
    std::atomic<bool> open{true};

    bool write(const json& m) {
      std::lock_guard lock(write_mutex);
      return detail::send_all(fd, m.dump() + "\n");
    }
  };

  void accept_loop() {
    while (running_.load()) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (!running_.load()) return;
        continue;
      }
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      auto c = std::make_shared<connection>();
      c->fd = fd;
      {
        std::lock_guard lock(conn_mutex_);
        connections_.push_back(c);
      }
      c->reader = std::thread([this, c] { read_loop(c); });
    }
  }

  void read_loop(const std::shared_ptr<connection>& c) {
    std::string buffer;
    char chunk[4096];
    for (;;) {
      const auto n = ::recv(c->fd, chunk, sizeof chunk, 0);
      if (n <= 0) break;
      buffer.append(chunk, static_cast<std::size_t>(n));
      std::size_t pos;
      while ((pos = buffer.find('\n')) != std::string::npos) {
        std::string line = buffer.substr(0, pos);
        buffer.erase(0, pos + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        json response = core_.handle_line(line);
        if (auto sid = core_.take_subscription_request(response)) {
          std::lock_guard lock(c->sub_mutex);
          c->subscriptions.emplace_back(*sid, response["payload"]["device"].get<std::string>());
        }
        if (!c->write(response)) break;
      }
    }
    c->open.store(false);
  }

  void push_loop() {
    const auto interval = core_.config().push_interval;
    auto next = std::chrono::steady_clock::now() + interval;
    std::unique_lock lock(push_mutex_);
    while (running_.load()) {
      push_cv_.wait_until(lock, next, [this] { return !running_.load(); });
      if (!running_.load()) return;
      next += interval;
      std::list<std::shared_ptr<connection>> conns;
      {
        std::lock_guard cl(conn_mutex_);
        conns = connections_;
      }
      for (auto& c : conns) {
        if (!c->open.load()) continue;
        std::vector<std::pair<std::string, std::string>> subs;
        {
          std::lock_guard sl(c->sub_mutex);
          subs = c->subscriptions;
        }
        for (const auto& [sid, dev] : subs) {
          if (c->write(make_message("metrics_push", sid, core_.metrics_payload(sid, dev)))) ++pushes_;
        }
      }
    }
  }

  gateway_core& core_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::thread accept_thread_;
  std::thread push_thread_;
  std::mutex push_mutex_;
  std::condition_variable push_cv_;
  std::mutex conn_mutex_;
  std::list<std::shared_ptr<connection>> connections_;
  std::atomic<std::uint64_t> pushes_{0};
};

// Browser bridge: POST /command and GET /events (text/event-stream).
class http_bridge {
 public:
  explicit http_bridge(gateway_core& core) : core_(core) {
    server_.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    server_.Options("/command", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });
    server_.Post("/command", [this](const httplib::Request& req, httplib::Response& res) {
      std::string_view body = req.body;
      while (!body.empty() && (body.back() == '\n' || body.back() == '\r')) body.remove_suffix(1);
      res.set_content(core_.handle_line(body).dump() + "\n", "application/x-ndjson");
    });
    server_.Get("/events", [this](const httplib::Request& req, httplib::Response& res) {
      json sub = core_.handle(make_message("subscribe_metrics", "sse", {{"device", req.get_param_value("device")}}));
      if (sub["type"] != "ack") {
        res.status = 404;
        res.set_content(sub.dump() + "\n", "application/json");
        return;
      }
      const auto sid = sub["payload"]["subscription"].get<std::string>();
      const auto dev = sub["payload"]["device"].get<std::string>();
      res.set_header("Cache-Control", "no-cache");
      res.set_chunked_content_provider("text/event-stream", [this, sid, dev](std::size_t, httplib::DataSink& sink) {
        if (!running_.load()) return false;
        const auto msg = make_message("metrics_push", sid, core_.metrics_payload(sid, dev));
        const std::string frame = "event: metrics_push\ndata: " + msg.dump() + "\n\n";
        if (!sink.write(frame.data(), frame.size())) return false;
        std::this_thread::sleep_for(core_.config().push_interval);
        return running_.load();
      });
    });
  }

  ~http_bridge() { stop(); }

  std::uint16_t start() {
    const auto& cfg = core_.config();
    int port = cfg.http_port;
    if (port == 0) port = server_.bind_to_any_port(cfg.host);
    else if (!server_.bind_to_port(cfg.host, port)) port = -1;
    if (port < 0) throw gateway_error("cannot bind http bridge on " + cfg.host + ":" + std::to_string(cfg.http_port));
    running_.store(true);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    port_ = static_cast<std::uint16_t>(port);
    return port_;
  }

  void stop() {
    running_.store(false);
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  std::uint16_t port() const noexcept { return port_; }

 private:
  gateway_core& core_;
  httplib::Server server_;
  std::thread thread_;
  std::atomic<bool> running_{false};
  std::uint16_t port_ = 0;
};

// --- client -------------------------------------------------------------------------------------

class gateway_client {
 public:
  gateway_client(const std::string& host, std::uint16_t port, std::chrono::milliseconds timeout = std::chrono::milliseconds(5000))
      : timeout_(timeout) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res)
      throw gateway_error("cannot resolve " + host);
    fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    const bool ok = fd_ >= 0 && ::connect(fd_, res->ai_addr, res->ai_addrlen) == 0;
    const std::string why = std::strerror(errno);
    ::freeaddrinfo(res);
    if (!ok) {
      if (fd_ >= 0) ::close(fd_);
      fd_ = -1;
      throw gateway_error("gateway unreachable at " + host + ":" + std::to_string(port) + ": " + why);
    }
  }

  ~gateway_client() {
    if (fd_ >= 0) ::close(fd_);
  }

  gateway_client(const gateway_client&) = delete;
  gateway_client& operator=(const gateway_client&) = delete;

  void send(const json& m) {
    if (!detail::send_all(fd_, m.dump() + "\n")) throw gateway_error("connection lost");
  }

  // Next message from the server, or nothing on timeout.
  std::optional<json> receive() {
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    for (;;) {
      if (auto pos = buffer_.find('\n'); pos != std::string::npos) {
        std::string line = buffer_.substr(0, pos);
        buffer_.erase(0, pos + 1);
        return json::parse(line);
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) return std::nullopt;
      pollfd p{fd_, POLLIN, 0};
      if (::poll(&p, 1, static_cast<int>(left.count())) <= 0) continue;
      char chunk[4096];
      const auto n = ::recv(fd_, chunk, sizeof chunk, 0);
      if (n <= 0) throw gateway_error("connection closed by gateway");
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  // Send a request and wait for its correlated ack/error (pushes are kept aside).
  std::optional<json> request(const json& m) {
    send(m);
    for (;;) {
      auto r = receive();
      if (!r) return std::nullopt;
      if (r->value("type", "") == "metrics_push") {
        pushes_.push_back(std::move(*r));
        continue;
      }
      if ((*r)["id"] == m["id"] || (*r)["id"].is_null()) return r;
    }
  }

  std::vector<json>& pushes() noexcept { return pushes_; }

 private:
  int fd_ = -1;
  std::chrono::milliseconds timeout_;
  std::string buffer_;
  std::vector<json> pushes_;
};

inline participant remote_participant(gateway_client& client) {
  return [&client](const json& req) { return client.request(req); };
}

}  // namespace abcycle
