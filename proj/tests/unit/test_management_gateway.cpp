#include <gtest/gtest.h>

#include <arpa/inet.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <random>

#include "abcycle/management_gateway.hpp"
#include "fixtures.hpp"

using namespace abcycle;
using namespace abcycle::testing;

namespace {

gateway_config ephemeral() {
  gateway_config c;
  c.port = 0;
  c.push_interval = std::chrono::milliseconds(50);
  c.apply_timeout = std::chrono::milliseconds(2000);
  return c;
}

shadow_setup default_shadow() {
  shadow_setup s;
  s.descriptor = candidate();
  return s;
}

}  // namespace

TEST(GatewayConfig, JsonAndEnvironmentOverrides) {
  const auto c = gateway_config_from_json(json::parse(R"({"port": 9000, "push_interval_ms": 250, "commit_margin": 4})"));
  EXPECT_EQ(c.port, 9000);
  EXPECT_EQ(c.push_interval, std::chrono::milliseconds(250));
  EXPECT_EQ(c.commit_margin, 4u);
  EXPECT_THROW(gateway_config_from_json(json::parse(R"({"colour": 1})")), scenario_error);
  EXPECT_THROW(gateway_config_from_json(json::parse(R"({"push_interval_ms": 0})")), scenario_error);

  std::map<std::string, std::string> env{{"ABCYCLE_GATEWAY_HOST", "0.0.0.0"},
                                         {"ABCYCLE_GATEWAY_PORT", "7500"},
                                         {"ABCYCLE_HTTP_PORT", "7501"},
                                         {"ABCYCLE_PUSH_INTERVAL_MS", "20"}};
  auto get = [&](const char* n) -> const char* {
    auto it = env.find(n);
    return it == env.end() ? nullptr : it->second.c_str();
  };
  const auto o = apply_env_overrides(c, get);
  EXPECT_EQ(o.host, "0.0.0.0");
  EXPECT_EQ(o.port, 7500);
  EXPECT_EQ(o.http_port, 7501);
  EXPECT_EQ(o.push_interval, std::chrono::milliseconds(20));
  env["ABCYCLE_GATEWAY_PORT"] = "lots";
  EXPECT_THROW(apply_env_overrides(c, get), config_error);
  env["ABCYCLE_GATEWAY_PORT"] = "1";
  env["ABCYCLE_PUSH_INTERVAL_MS"] = "0";
  EXPECT_THROW(apply_env_overrides(c, get), config_error);
}

TEST(GatewayConfig, ShippedConfigLoads) {
  const auto c = gateway_config_from_json(json::parse(std::ifstream(std::string(ABCYCLE_SCENARIO_DIR) + "/gateway.json")));
  EXPECT_EQ(c.port, 7411);
  EXPECT_EQ(c.http_port, 7412);
}

TEST(GatewayCore, StatusReportsIdle) {
  device d(one_asset());
  gateway_core core(ephemeral());
  core.attach(d);
  const auto r = core.handle(make_message("status", "s1"));
  EXPECT_EQ(r["type"], "ack");
  EXPECT_EQ(r["id"], "s1");
  EXPECT_EQ(r["v"], 1);
  EXPECT_EQ(r["payload"]["state"], "Idle");
  EXPECT_EQ(r["payload"]["device"], "device-1");
  EXPECT_TRUE(r["payload"]["history"].empty());
}

TEST(GatewayCore, GoldenProtocolCases) {
  device d(one_asset());
  gateway_core core(ephemeral());
  core.attach(d);
  std::ifstream in(std::string(ABCYCLE_GOLDEN_DIR) + "/protocol_cases.ndjson");
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto tc = json::parse(line);
    const auto r = core.handle_line(tc["request"].get<std::string>());
    EXPECT_EQ(r["v"], 1) << line;
    EXPECT_EQ(r["type"], tc["type"]) << line << " -> " << r.dump();
    EXPECT_EQ(r["id"], tc["id"]) << line;
    if (tc.contains("reason")) EXPECT_EQ(r["payload"]["reason"], tc["reason"]) << line << " -> " << r.dump();
    ++n;
  }
  EXPECT_GE(n, 20);
}

// Every line of arbitrary input yields exactly one well-formed response.
TEST(GatewayCore, FuzzedLinesAlwaysGetOneResponse) {
  device d(one_asset());
  gateway_core core(ephemeral());
  core.attach(d);
  std::mt19937_64 rng(1);
  const std::vector<std::string> fragments{"{", "}", "\"v\":1", "\"type\":", "\"status\"", "\"promote\"", "\"id\":",
                                           "3", "\"x\"", ",", "\"payload\":", "{\"cycle\":", "null", "[", "]",
                                           "\"phase\":\"prepare\"", "\"asset\":", "-1", "1e999", "\\u0000"};
  for (int i = 0; i < 3000; ++i) {
    std::string s;
    const int parts = 1 + static_cast<int>(rng() % 12);
    for (int k = 0; k < parts; ++k) s += fragments[rng() % fragments.size()];
    const auto r = core.handle_line(s);
    ASSERT_TRUE(r.is_object());
    ASSERT_EQ(r["v"], 1);
    ASSERT_TRUE(r["type"] == "ack" || r["type"] == "error") << s;
    if (r["type"] == "error") ASSERT_TRUE(r["payload"]["reason"].is_string());
  }
}

TEST(GatewayCore, DeployPromoteRollbackLifecycle) {
  device d(one_asset(10, 1000));
  gateway_core core(ephemeral());
  core.attach(d, default_shadow());
  device_driver driver({&d}, 100000, micros(100));
  driver.start();
  auto r = core.handle(make_message("deploy_shadow", 1, {{"asset", 1}}));
  ASSERT_EQ(r["type"], "ack") << r.dump();
  EXPECT_TRUE(r["payload"].contains("applied_in"));
  while (d.manager().state(1) != adaptation_state::shadow) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  r = core.handle(make_message("deploy_shadow", 2, json::object()));
  EXPECT_EQ(r["payload"]["reason"], "rejected");
  while (d.current_cycle() < 200) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  const auto k = d.current_cycle() + 500;
  r = core.handle(make_message("promote", 3, {{"cycle", k}}));
  ASSERT_EQ(r["type"], "ack") << r.dump();
  r = core.handle(make_message("promote", 4, {{"cycle", 3}}));
  EXPECT_EQ(r["type"], "error");
  EXPECT_EQ(r["payload"]["reason"], "rejected");
  while (d.current_cycle() < k + 5) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  const auto m = d.current_cycle() + 300;
  r = core.handle(make_message("rollback", 5, {{"cycle", m}}));
  ASSERT_EQ(r["type"], "ack") << r.dump();
  while (d.current_cycle() < m + 5) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  driver.stop();
  r = core.handle(make_message("status", 6, {{"export", "trace"}}));
  EXPECT_EQ(r["payload"]["state"], "RolledBack");
  EXPECT_EQ(r["payload"]["history"].size(), 6u);
  const auto csv = r["payload"]["csv"].get<std::string>();
  EXPECT_EQ(csv.rfind(trace_csv_header, 0), 0u);
  EXPECT_TRUE(d.port().faults().empty());
}

TEST(GatewayCore, DeployWithExplicitService) {
  device d(one_asset());
  gateway_core core(ephemeral());
  core.attach(d);
  device_driver driver({&d}, 100000, micros(0));
  driver.start();
  auto r = core.handle(make_message("deploy_shadow", 1,
                                    {{"service", {{"id", 9}, {"kp", 1.0}, {"setpoint", 1.0}}}, {"budget", {{"max_stage2_us", 150}}}}));
  ASSERT_EQ(r["type"], "ack") << r.dump();
  EXPECT_EQ(r["payload"]["service"], 9);
  while (d.manager().state(1) != adaptation_state::shadow) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  driver.stop();
  EXPECT_EQ(d.manager().budget_of(1)->max_stage2_duration, micros(150));
  const auto no_default = core.handle(make_message("deploy_shadow", 2, json::object()));
  EXPECT_EQ(no_default["payload"]["reason"], "schema");
}

TEST(GatewayCore, BackpressureIsReported) {
  auto cfg = one_asset();
  cfg.assets.push_back(simple_asset(2, 5));
  cfg.schedule.prep_queue_depth = 1;
  device d(cfg);
  auto gc = ephemeral();
  gc.apply_timeout = std::chrono::milliseconds(1);
  gateway_core core(gc);
  core.attach(d, default_shadow());
  // the device is not stepping: the first request waits in the queue, the second overflows it
  const auto r1 = core.handle(make_message("deploy_shadow", 1, {{"asset", 1}}));
  ASSERT_EQ(r1["type"], "ack") << r1.dump();
  EXPECT_TRUE(r1["payload"].value("pending", false));
  const auto r2 = core.handle(make_message("deploy_shadow", 2, {{"asset", 2}, {"service", {{"id", 7}, {"kp", 1.0}}}}));
  EXPECT_EQ(r2["type"], "error");
  EXPECT_EQ(r2["payload"]["reason"], "backpressure") << r2.dump();
  d.run(20);
  EXPECT_EQ(d.manager().state(1), adaptation_state::shadow);
  EXPECT_EQ(d.manager().state(2), adaptation_state::idle);
}

TEST(GatewayServer, MalformedLineKeepsConnectionOpen) {
  device d(one_asset());
  gateway_core core(ephemeral());
  core.attach(d);
  gateway_server server(core);
  const auto port = server.start();
  gateway_client client("127.0.0.1", port, std::chrono::milliseconds(2000));
  client.send(json("garbage"));  // a JSON string, not an object
  auto r = client.receive();
  ASSERT_TRUE(r);
  EXPECT_EQ((*r)["payload"]["reason"], "parse");
  client.send(json::parse(R"({"v":1,"type":"status","id":"after"})"));
  r = client.receive();
  ASSERT_TRUE(r);
  EXPECT_EQ((*r)["id"], "after");
  EXPECT_EQ((*r)["payload"]["state"], "Idle");
  server.stop();
}

TEST(GatewayServer, InvalidJsonLineGetsParseError) {
  device d(one_asset());
  gateway_core core(ephemeral());
  core.attach(d);
  gateway_server server(core);
  const auto port = server.start();
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
  ASSERT_EQ(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr), 0);
  ASSERT_TRUE(detail::send_all(fd, "this is not json\n{\"v\":1,\"type\":\"status\",\"id\":2}\n"));
  std::string buf;
  char chunk[4096];
  while (std::count(buf.begin(), buf.end(), '\n') < 2) {
    const auto n = ::recv(fd, chunk, sizeof chunk, 0);
    ASSERT_GT(n, 0);
    buf.append(chunk, static_cast<std::size_t>(n));
  }
  ::close(fd);
  const auto first = json::parse(buf.substr(0, buf.find('\n')));
  const auto second = json::parse(buf.substr(buf.find('\n') + 1, buf.rfind('\n') - buf.find('\n') - 1));
  EXPECT_EQ(first["type"], "error");
  EXPECT_EQ(first["payload"]["reason"], "parse");
  EXPECT_EQ(second["type"], "ack");
  EXPECT_EQ(second["id"], 2);
  server.stop();
}

TEST(GatewayServer, PushesArriveAtTheConfiguredInterval) {
  device d(one_asset());
  gateway_core core(ephemeral());  // 50 ms
  core.attach(d);
  device_driver driver({&d}, 1'000'000);
  driver.start();
  gateway_server server(core);
  const auto port = server.start();
  gateway_client client("127.0.0.1", port, std::chrono::milliseconds(2000));
  auto r = client.request(make_message("subscribe_metrics", "sub"));
  ASSERT_TRUE(r);
  ASSERT_EQ((*r)["type"], "ack");
  const auto sid = (*r)["payload"]["subscription"].get<std::string>();
  const auto t0 = std::chrono::steady_clock::now();
  int pushes = 0;
  cycle_index last_cycle = 0;
  while (std::chrono::steady_clock::now() - t0 < std::chrono::milliseconds(1000)) {
    auto m = client.receive();
    if (!m) break;
    if ((*m)["type"] != "metrics_push") continue;
    EXPECT_EQ((*m)["id"], sid);
    EXPECT_GE((*m)["payload"]["cycle"].get<cycle_index>(), last_cycle);
    last_cycle = (*m)["payload"]["cycle"].get<cycle_index>();
    ++pushes;
  }
  server.stop();
  driver.stop();
  // 1 s at 50 ms: about 20 pushes; allow scheduling slack on a loaded host
  EXPECT_GE(pushes, 10);
  EXPECT_LE(pushes, 22);
  EXPECT_GT(last_cycle, 0u);
}

TEST(GatewayServer, UnreachableClientThrows) {
  gateway_config c = ephemeral();
  device d(one_asset());
  gateway_core core(c);
  core.attach(d);
  gateway_server server(core);
  const auto port = server.start();
  server.stop();
  EXPECT_THROW(gateway_client("127.0.0.1", port), gateway_error);
}

TEST(HttpBridge, CommandAndEventStream) {
  device d(one_asset());
  gateway_core core(ephemeral());
  core.attach(d);
  device_driver driver({&d}, 1'000'000);
  driver.start();
  http_bridge bridge(core);
  const auto port = bridge.start();
  httplib::Client cli("127.0.0.1", port);
  auto res = cli.Post("/command", R"({"v":1,"type":"status","id":"b1"})", "application/x-ndjson");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "*");
  const auto j = json::parse(res->body);
  EXPECT_EQ(j["payload"]["state"], "Idle");
  res = cli.Post("/command", "nonsense", "application/x-ndjson");
  ASSERT_TRUE(res);
  EXPECT_EQ(json::parse(res->body)["payload"]["reason"], "parse");

  int events = 0;
  std::string buffer;
  cli.set_read_timeout(std::chrono::seconds(5));
  cli.Get("/events", [&](const char* data, std::size_t len) {
    buffer.append(data, len);
    std::size_t pos;
    while ((pos = buffer.find("\n\n")) != std::string::npos) {
      const auto frame = buffer.substr(0, pos);
      buffer.erase(0, pos + 2);
      const auto dp = frame.find("data: ");
      if (dp == std::string::npos) continue;
      const auto m = json::parse(frame.substr(dp + 6));
      EXPECT_EQ(m["type"], "metrics_push");
      ++events;
    }
    return events < 3;
  });
  bridge.stop();
  driver.stop();
  EXPECT_EQ(events, 3);
}

TEST(SwitchAgreement, UnanimousCommitSwitchesBothAtK) {
  device d1([] {
    auto c = one_asset();
    c.name = "d1";
    return c;
  }());
  device d2([] {
    auto c = one_asset();
    c.name = "d2";
    return c;
  }());
  gateway_core core(ephemeral());
  core.attach(d1);
  core.attach(d2);
  for (auto* d : {&d1, &d2}) {
    d->deploy_shadow(candidate(), {});
    d->run(20);
  }
  device_driver driver({&d1, &d2}, 100000, micros(100));
  driver.start();
  const auto k = d1.current_cycle() + 200;
  const auto a = coordinate_switch({{"d1", local_participant(core, "d1")}, {"d2", local_participant(core, "d2")}}, 1, k);
  EXPECT_TRUE(a.committed) << a.reason;
  while (d1.current_cycle() < k + 2 || d2.current_cycle() < k + 2) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  driver.stop();
  for (auto* d : {&d1, &d2}) {
    const auto tr = d->trace(1);
    EXPECT_EQ(tr[k - 2].source, 1u);
    EXPECT_EQ(tr[k - 1].source, 2u);
  }
}

TEST(SwitchAgreement, OneNackMeansNobodySwitches) {
  device d1([] {
    auto c = one_asset();
    c.name = "d1";
    return c;
  }());
  device d2([] {
    auto c = one_asset();
    c.name = "d2";
    return c;
  }());
  gateway_core core(ephemeral());
  core.attach(d1);
  core.attach(d2);
  d1.deploy_shadow(candidate(), {});  // d2 has no shadow: it must nack
  d1.run(20);
  d2.run(20);
  const auto k = cycle_index{60};
  const auto a = coordinate_switch({{"d1", local_participant(core, "d1")}, {"d2", local_participant(core, "d2")}}, 1, k);
  EXPECT_FALSE(a.committed);
  ASSERT_EQ(a.votes.size(), 2u);
  EXPECT_EQ(a.votes[0], true);
  EXPECT_EQ(a.votes[1], false);
  EXPECT_NE(a.reason.find("d2"), std::string::npos);
  d1.run(100);
  d2.run(100);
  for (const auto& r : d1.trace(1)) ASSERT_EQ(r.source, 1u);
  EXPECT_FALSE(d1.manager().prepared_switch(1));
}

TEST(SwitchAgreement, RemoteParticipantOverTcp) {
  device d(one_asset());
  gateway_core core(ephemeral());
  core.attach(d);
  d.deploy_shadow(candidate(), {});
  d.run(20);
  device_driver driver({&d}, 100000, micros(100));
  driver.start();
  gateway_server server(core);
  const auto port = server.start();
  gateway_client client("127.0.0.1", port);
  const auto k = d.current_cycle() + 300;
  const auto a = coordinate_switch({{"remote", remote_participant(client)}}, 1, k);
  EXPECT_TRUE(a.committed) << a.reason;
  while (d.current_cycle() < k + 1) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  driver.stop();
  server.stop();
  EXPECT_EQ(d.trace(1)[k - 1].source, 2u);
}
