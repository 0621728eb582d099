#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "abcycle/types.hpp"

namespace abcycle {

struct noise_spec {
  double stddev = 0.0;
  std::uint64_t seed = 0;
};

// x[k+1] = a*x[k] + b*u[k] + d[k]
struct plant_config {
  asset_id asset = 1;
  double a = 0.9;
  double b = 0.1;
  double x0 = 0.0;
  noise_spec measurement_noise;
  noise_spec process_noise;
  bool allow_unstable = false;

  void validate() const {
    if (asset < 1 || asset > max_assets) throw config_error("asset id out of range: " + std::to_string(asset));
    if (!std::isfinite(a) || !std::isfinite(b) || !std::isfinite(x0)) throw config_error("plant coefficients must be finite");
    if (!allow_unstable && !(std::abs(a) < 1.0)) throw config_error("plant coefficient |a| must be < 1");
    if (measurement_noise.stddev < 0.0 || process_noise.stddev < 0.0) throw config_error("noise stddev must be >= 0");
  }
};

class first_order_plant {
 public:
  explicit first_order_plant(plant_config cfg)
      : cfg_(cfg), x_(cfg.x0), sense_rng_(cfg.measurement_noise.seed), process_rng_(cfg.process_noise.seed) {
    cfg_.validate();
  }

  asset_id asset() const noexcept { return cfg_.asset; }
  double state() const noexcept { return x_; }
  const plant_config& config() const noexcept { return cfg_; }

  double sense() {
    if (cfg_.measurement_noise.stddev == 0.0) return x_;
    return x_ + std::normal_distribution<double>(0.0, cfg_.measurement_noise.stddev)(sense_rng_);
  }

  double step(double u) {
    double d = 0.0;
    if (cfg_.process_noise.stddev > 0.0) d = std::normal_distribution<double>(0.0, cfg_.process_noise.stddev)(process_rng_);
    x_ = cfg_.a * x_ + cfg_.b * u + d;
    if (!std::isfinite(x_)) throw std::runtime_error("plant state diverged on asset " + std::to_string(cfg_.asset));
    return x_;
  }

 private:
  plant_config cfg_;
  double x_;
  std::mt19937_64 sense_rng_;
  std::mt19937_64 process_rng_;
};

struct actuator_write {
  cycle_index cycle = 0;
  asset_id asset = 0;
  double value = 0.0;
  service_id source = no_service;
  bool held = false;
};

struct integrity_fault {
  cycle_index cycle = 0;
  asset_id asset = 0;
  std::string what;
};

// Fieldbus boundary. Exactly one write per asset per cycle; writes tagged with
// a service that is not currently forwarded are refused.
class actuator_port {
 public:
  using forward_check = std::function<bool(asset_id, cycle_index, service_id)>;

  actuator_port(std::vector<asset_id> assets, forward_check may_forward, bool keep_log = true)
      : may_forward_(std::move(may_forward)), keep_log_(keep_log) {
    for (auto a : assets) lanes_.push_back(lane{a});
  }

  void actuate(cycle_index cycle, asset_id asset, double value, service_id source, bool held = false) {
    auto& l = lane_for(asset);
    if (l.last_cycle == cycle && l.writes > 0) {
      faults_.push_back({cycle, asset, "second actuator write in cycle"});
      return;
    }
    if (l.writes > 0 && cycle != l.last_cycle + 1)
      faults_.push_back({cycle, asset, "actuator skipped cycle " + std::to_string(l.last_cycle + 1)});
    if (!held && source != no_service && may_forward_ && !may_forward_(asset, cycle, source)) {
      faults_.push_back({cycle, asset, "blocked service " + std::to_string(source) + " reached the actuator"});
      value = l.value;
      source = l.source;
      held = true;
    }
    l.value = value;
    l.source = source;
    l.last_cycle = cycle;
    ++l.writes;
    if (keep_log_) log_.push_back({cycle, asset, value, source, held});
  }

  // Re-apply the previous value (overrun path).
  void hold(cycle_index cycle, asset_id asset) {
    const auto& l = lane_for(asset);
    actuate(cycle, asset, l.value, l.source, true);
  }

  double last_value(asset_id asset) const { return lane_for(asset).value; }
  service_id last_source(asset_id asset) const { return lane_for(asset).source; }
  std::uint64_t write_count(asset_id asset) const { return lane_for(asset).writes; }
  const std::vector<integrity_fault>& faults() const noexcept { return faults_; }
  const std::vector<actuator_write>& log() const noexcept { return log_; }

 private:
  struct lane {
    asset_id asset = 0;
    double value = 0.0;
    service_id source = no_service;
    cycle_index last_cycle = 0;
    std::uint64_t writes = 0;
  };

  lane& lane_for(asset_id asset) {
    for (auto& l : lanes_)
      if (l.asset == asset) return l;
    throw config_error("actuator port has no asset " + std::to_string(asset));
  }

  const lane& lane_for(asset_id asset) const {
    for (const auto& l : lanes_)
      if (l.asset == asset) return l;
    throw config_error("actuator port has no asset " + std::to_string(asset));
  }

  std::vector<lane> lanes_;
  forward_check may_forward_;
  bool keep_log_;
  std::vector<integrity_fault> faults_;
  std::vector<actuator_write> log_;
};

}  // namespace abcycle
