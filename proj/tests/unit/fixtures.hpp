#pragma once

#include "abcycle/device.hpp"

namespace abcycle::testing {

inline asset_setup simple_asset(asset_id id, service_id svc, double kp = 2.0, double ki = 0.5, double kd = 0.1) {
  asset_setup a;
  a.plant.asset = id;
  a.plant.a = 0.9;
  a.plant.b = 0.1;
  a.primary.id = svc;
  a.primary.name = "pid-A";
  a.primary.controller = {kp, ki, kd, 1.0};
  return a;
}

inline device_config one_asset(cycle_index health = 10, cycle_index retention = 1000) {
  device_config cfg;
  cfg.assets.push_back(simple_asset(1, 1));
  cfg.manager.health_window = health;
  cfg.manager.retention = retention;
  return cfg;
}

inline service_descriptor candidate(service_id id = 2, asset_id asset = 1) {
  service_descriptor d;
  d.id = id;
  d.name = "pid-B";
  d.target_asset = asset;
  d.controller = {2.4, 0.6, 0.1, 1.0};
  return d;
}

// Run until `d` reaches state `s` on asset 1 or `limit` cycles elapse.
inline bool run_until_state(device& d, adaptation_state s, cycle_index limit = 50, asset_id a = 1) {
  for (cycle_index i = 0; i < limit; ++i) {
    if (d.manager().state(a) == s) return true;
    d.step();
  }
  return d.manager().state(a) == s;
}

}  // namespace abcycle::testing
