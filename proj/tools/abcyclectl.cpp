// abcyclectl: scenario runner and gateway client.
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "abcycle/management_gateway.hpp"
#include "abcycle/scenario.hpp"

namespace {

using namespace abcycle;

std::atomic<bool> interrupted{false};

struct client_opts {
  std::optional<std::string> config;
  std::optional<std::string> host;
  std::optional<std::uint16_t> port;
  bool dry_run = false;
  std::string device;
  asset_id asset = 1;
};

gateway_config client_config(const client_opts& o) {
  auto c = load_gateway_config(o.config);
  if (o.host) c.host = *o.host;
  if (o.port) c.port = *o.port;
  return c;
}

json with_target(json payload, const client_opts& o) {
  payload["asset"] = o.asset;
  if (!o.device.empty()) payload["device"] = o.device;
  return payload;
}

// Send one message and print the correlated response. Exit code 0 iff ack.
int send_request(const client_opts& o, const json& msg, const std::function<void(const json&)>& on_ack = {}) {
  if (o.dry_run) {
    std::cout << msg.dump() << '\n';
    return 0;
  }
  try {
    const auto cfg = client_config(o);
    gateway_client client(cfg.host, cfg.port);
    auto r = client.request(msg);
    if (!r) {
      std::cerr << "error: no response from gateway within timeout\n";
      return 3;
    }
    if ((*r)["type"] == "error") {
      const auto& p = (*r)["payload"];
      std::cerr << "error: " << p.value("reason", std::string("?"));
      if (p.contains("detail")) std::cerr << ": " << p["detail"].get<std::string>();
      std::cerr << '\n';
      return 1;
    }
    if (on_ack) on_ack(*r);
    else std::cout << (*r)["payload"].dump() << '\n';
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}

int cmd_run(const std::string& path, const std::optional<std::string>& csv, const std::optional<std::string>& summary_path,
            const std::optional<std::string>& twin_dir, bool quiet) {
  scenario s;
  try {
    s = load_scenario(path);
  } catch (const scenario_error& e) {
    std::cerr << e.what() << '\n';
    return 2;
  }
  device d(s.device);
  auto result = run_scenario(s, d, quiet ? nullptr : &std::cerr);
  const auto csv_path = csv.value_or(s.name + ".csv");
  {
    std::ofstream out(csv_path);
    d.write_trace_csv(out, s.csv_asset);
  }
  if (twin_dir) {
    std::filesystem::create_directories(*twin_dir);
    for (int level : {twin_store::ops_level, twin_store::supervisory_level, twin_store::kpi_level}) {
      std::ofstream out(*twin_dir + "/twin_level" + std::to_string(level) + ".csv");
      d.twin().write_csv(level, out);
    }
    std::ofstream tr(*twin_dir + "/transitions.ndjson");
    write_transitions_ndjson(tr, d.manager().history());
    std::ofstream ev(*twin_dir + "/management_events.ndjson");
    write_events_ndjson(ev, d.twin().management().events());
    std::ofstream rep(*twin_dir + "/cycles.csv");
    result.report.write_csv(rep);
  }
  if (summary_path) {
    std::ofstream out(*summary_path);
    out << to_json(result.summary).dump(2) << '\n';
  }
  write_summary_text(std::cout, result.summary);
  std::cout << "csv                 " << csv_path << '\n';
  if (result.report.aborted) std::cerr << "run aborted: " << result.report.abort_reason << '\n';
  for (const auto& f : d.port().faults()) std::cerr << "integrity fault @" << f.cycle << " asset " << f.asset << ": " << f.what << '\n';
  return result.summary.integrity_faults == 0 && !result.report.aborted ? 0 : 1;
}

int cmd_serve(const std::string& path, const std::optional<std::string>& config, std::optional<cycle_index> cycles, bool http) {
  scenario s;
  gateway_config cfg;
  try {
    s = load_scenario(path);
    cfg = load_gateway_config(config);
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return 2;
  }
  device d(s.device);
  gateway_core core(cfg);
  core.attach(d, s.shadow);
  gateway_server server(core);
  std::unique_ptr<http_bridge> bridge;
  try {
    const auto port = server.start();
    std::cerr << "gateway listening on " << cfg.host << ':' << port << '\n';
    if (http) {
      bridge = std::make_unique<http_bridge>(core);
      std::cerr << "http bridge on " << cfg.host << ':' << bridge->start() << " (POST /command, GET /events)\n";
    }
  } catch (const gateway_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  std::signal(SIGINT, [](int) { interrupted.store(true); });
  std::signal(SIGTERM, [](int) { interrupted.store(true); });
  device_driver driver({&d}, cycles.value_or(std::numeric_limits<cycle_index>::max()));
  driver.start();
  while (!interrupted.load() && !driver.finished()) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  driver.stop();
  if (bridge) bridge->stop();
  server.stop();
  std::cerr << "stopped at cycle " << d.current_cycle() << ", integrity faults " << d.port().faults().size() << '\n';
  return d.port().faults().empty() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"abcyclectl - A/B shadow deployment runtime for cyclic control devices"};
  app.require_subcommand(1);

  client_opts copts;
  auto add_client_opts = [&](CLI::App* sc) {
    sc->add_option("--config", copts.config, "Gateway config file (JSON)");
    sc->add_option("--host", copts.host, "Gateway host (overrides config/env)");
    sc->add_option("--port", copts.port, "Gateway port (overrides config/env)");
    sc->add_option("--device", copts.device, "Target device name");
    sc->add_option("--asset", copts.asset, "Target asset")->capture_default_str();
    sc->add_flag("--dry-run", copts.dry_run, "Print the request instead of sending it");
  };

  std::string scenario_path;
  std::optional<std::string> csv_path, summary_path, twin_dir, config_path;
  bool quiet = false, http = false;
  std::optional<cycle_index> serve_cycles;
  auto* run = app.add_subcommand("run", "Run a scenario in embedded mode");
  run->add_option("scenario", scenario_path, "Scenario file")->required();
  run->add_option("--csv", csv_path, "Per-cycle CSV output (default <name>.csv)");
  run->add_option("--summary", summary_path, "Write the summary as JSON");
  run->add_option("--twin-dir", twin_dir, "Export twin levels and logs into this directory");
  run->add_flag("-q,--quiet", quiet, "No progress output");

  auto* serve = app.add_subcommand("serve", "Run a scenario's device behind the management gateway");
  serve->add_option("scenario", scenario_path, "Scenario file")->required();
  serve->add_option("--config", config_path, "Gateway config file (JSON)");
  serve->add_option("--cycles", serve_cycles, "Stop after this many cycles (default: run until interrupted)");
  serve->add_flag("--http", http, "Also serve the browser streaming bridge");

  std::optional<std::string> service_file;
  auto* deploy = app.add_subcommand("deploy-shadow", "Deploy a shadow service");
  deploy->add_option("--service", service_file, "JSON file with {\"service\":{...},\"budget\":{...}} (default: the server's)");
  add_client_opts(deploy);

  cycle_index switch_cycle = 0;
  auto* promote = app.add_subcommand("promote", "Arm the switch to the shadow service at a cycle");
  promote->add_option("--cycle", switch_cycle, "Switch cycle k")->required();
  add_client_opts(promote);

  auto* rollback = app.add_subcommand("rollback", "Arm the switch back to the previous service at a cycle");
  rollback->add_option("--cycle", switch_cycle, "Rollback cycle m")->required();
  add_client_opts(rollback);

  auto* abort_cmd = app.add_subcommand("abort", "Abort the shadow deployment");
  add_client_opts(abort_cmd);

  auto* status = app.add_subcommand("status", "Print the adaptation state");
  bool full = false;
  status->add_flag("--json", full, "Print the full status payload");
  add_client_opts(status);

  std::string export_csv;
  auto* exp = app.add_subcommand("export", "Export the per-cycle trace");
  exp->add_option("--csv", export_csv, "Output path")->required();
  add_client_opts(exp);

  CLI11_PARSE(app, argc, argv);

  if (*run) return cmd_run(scenario_path, csv_path, summary_path, twin_dir, quiet);
  if (*serve) return cmd_serve(scenario_path, config_path, serve_cycles, http);
  if (*deploy) {
    json payload = json::object();
    if (service_file) {
      std::ifstream in(*service_file);
      if (!in) {
        std::cerr << "error: cannot open " << *service_file << '\n';
        return 2;
      }
      try {
        payload = json::parse(in);
      } catch (const json::parse_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
      }
    }
    return send_request(copts, make_message("deploy_shadow", "cli-1", with_target(payload, copts)));
  }
  if (*promote) return send_request(copts, make_message("promote", "cli-1", with_target({{"cycle", switch_cycle}}, copts)));
  if (*rollback) return send_request(copts, make_message("rollback", "cli-1", with_target({{"cycle", switch_cycle}}, copts)));
  if (*abort_cmd) return send_request(copts, make_message("abort", "cli-1", with_target(json::object(), copts)));
  if (*status)
    return send_request(copts, make_message("status", "cli-1", with_target(json::object(), copts)), [&](const json& r) {
      if (full) std::cout << r["payload"].dump(2) << '\n';
      else std::cout << r["payload"]["state"].get<std::string>() << '\n';
    });
  if (*exp)
    return send_request(copts, make_message("status", "cli-1", with_target({{"export", "trace"}}, copts)), [&](const json& r) {
      std::ofstream out(export_csv);
      out << r["payload"]["csv"].get<std::string>();
      std::cout << "wrote " << export_csv << '\n';
    });
  return 0;
}
