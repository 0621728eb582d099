// -----------------------------------------------------------------------------
// digital_twin: layered twin store.
//
//   level 2  operations twin, one record per validated cycle
//   level 3  supervisory twin, aggregated windows of level-2 records
//   level 5  KPI twin, aggregated windows of level-3 records
//
// Every higher level is computed only from the level directly below it. The
// recorder is a stage-4 consumer: it reads frames transactionally and counts
// what it loses instead of slowing the producer down.
// -----------------------------------------------------------------------------
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "abcycle/cyclic_executor.hpp"
#include "abcycle/ring_pipeline.hpp"
#include "abcycle/types.hpp"

namespace abcycle {

class twin_query_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class aggregation : std::uint8_t { latest, mean, max, rms };

inline const char* to_string(aggregation a) noexcept {
  switch (a) {
    case aggregation::latest: return "latest";
    case aggregation::mean: return "mean";
    case aggregation::max: return "max";
    case aggregation::rms: return "rms";
  }
  return "?";
}

inline aggregation aggregation_from_string(const std::string& s) {
  if (s == "latest") return aggregation::latest;
  if (s == "mean") return aggregation::mean;
  if (s == "max") return aggregation::max;
  if (s == "rms") return aggregation::rms;
  throw config_error("unknown aggregation '" + s + "'");
}

struct fidelity_spec {
  std::vector<std::string> parameters;  // empty = every signal of the source level
  std::uint64_t rate = 1;               // cycles per sample
  std::vector<aggregation> aggregations{aggregation::latest};

  void validate() const {
    if (rate < 1) throw config_error("twinning rate must be >= 1");
    if (aggregations.empty()) throw config_error("fidelity spec needs at least one aggregation");
  }
};

struct twin_record {
  cycle_index first = 0;
  cycle_index last = 0;
  std::vector<double> values;

  double value(std::size_t i) const noexcept {
    return i < values.size() ? values[i] : std::numeric_limits<double>::quiet_NaN();
  }
};

struct twin_schema {
  std::vector<std::string> names;

  std::optional<std::size_t> index_of(std::string_view name) const noexcept {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    return std::nullopt;
  }
};

// --- aggregation ----------------------------------------------------------------

// Streaming window aggregator shared by the live twin and the offline downsample().
class window_aggregator {
 public:
  window_aggregator(const twin_schema& source, const fidelity_spec& spec) : spec_(spec) {
    spec_.validate();
    const auto params = spec_.parameters.empty() ? source.names : spec_.parameters;
    for (const auto& p : params) {
      auto idx = source.index_of(p);
      if (!idx) throw config_error("fidelity spec references unknown signal '" + p + "'");
      inputs_.push_back(*idx);
      for (auto a : spec_.aggregations) schema_.names.push_back(p + ":" + to_string(a));
    }
    acc_.resize(inputs_.size());
  }

  const twin_schema& schema() const noexcept { return schema_; }
  const fidelity_spec& spec() const noexcept { return spec_; }

  // Feed one source record; returns a finished window if this record closed one.
  std::vector<twin_record> push(const twin_record& r) {
    std::vector<twin_record> out;
    const cycle_index window = (r.first - 1) / spec_.rate;
    if (open_ && window != window_) out.push_back(close());
    if (!open_) {
      open_ = true;
      window_ = window;
      first_ = r.first;
    }
    last_ = r.last;
    for (std::size_t k = 0; k < inputs_.size(); ++k) acc_[k].add(r.value(inputs_[k]));
    if (r.last >= (window_ + 1) * spec_.rate) out.push_back(close());
    return out;
  }

  // Emit the incomplete trailing window, if any.
  std::optional<twin_record> flush() {
    if (!open_) return std::nullopt;
    return close();
  }

 private:
  struct accumulator {
    std::size_t n = 0;
    double sum = 0.0;
    double sum_sq = 0.0;
    double max = std::numeric_limits<double>::quiet_NaN();
    double latest = std::numeric_limits<double>::quiet_NaN();

    void add(double v) {
      if (!std::isfinite(v)) return;
      ++n;
      sum += v;
      sum_sq += v * v;
      max = (n == 1 || v > max) ? v : max;
      latest = v;
    }

    double get(aggregation a) const {
      if (n == 0) return std::numeric_limits<double>::quiet_NaN();
      switch (a) {
        case aggregation::latest: return latest;
        case aggregation::mean: return sum / double(n);
        case aggregation::max: return max;
        case aggregation::rms: return std::sqrt(sum_sq / double(n));
      }
      return std::numeric_limits<double>::quiet_NaN();
    }
  };

  twin_record close() {
    twin_record rec;
    rec.first = first_;
    rec.last = last_;
    rec.values.reserve(schema_.names.size());
    for (auto& a : acc_) {
      for (auto g : spec_.aggregations) rec.values.push_back(a.get(g));
      a = accumulator{};
    }
    open_ = false;
    return rec;
  }

  fidelity_spec spec_;
  twin_schema schema_;
  std::vector<std::size_t> inputs_;
  std::vector<accumulator> acc_;
  bool open_ = false;
  cycle_index window_ = 0;
  cycle_index first_ = 0;
  cycle_index last_ = 0;
};

struct downsample_result {
  twin_schema schema;
  std::vector<twin_record> records;
};

// Pure downsampling of cycle-ordered source records.
inline downsample_result downsample(std::span<const twin_record> source, const twin_schema& source_schema,
                                    const fidelity_spec& spec, bool flush = false) {
  window_aggregator agg(source_schema, spec);
  downsample_result out;
  out.schema = agg.schema();
  for (const auto& r : source)
    for (auto& w : agg.push(r)) out.records.push_back(std::move(w));
  if (flush)
    if (auto w = agg.flush()) out.records.push_back(std::move(*w));
  return out;
}

// --- divergence ------------------------------------------------------------------

struct divergence_sample {
  cycle_index cycle = 0;
  double abs_diff = 0.0;
};

struct divergence_metrics {
  std::vector<divergence_sample> per_cycle;
  double rms = 0.0;
  double max = 0.0;
};

// --- management twin ---------------------------------------------------------------

struct service_view {
  service_id id = no_service;
  std::string name;
  std::string role;
  std::string priority;
  asset_id asset = 0;
  bool registered = false;
  std::int64_t budget_us = 0;
};

struct asset_view {
  asset_id asset = 0;
  std::string adaptation_state = "Idle";
  service_id forwarding = no_service;
  service_id shadow = no_service;
};

struct management_event {
  cycle_index cycle = 0;
  asset_id asset = 0;
  std::string kind;
  std::string detail;
};

struct management_view {
  cycle_index cycle = 0;
  std::vector<asset_view> assets;
  std::vector<service_view> services;
  cycle_metrics latest_metrics{};
  std::uint64_t twin_recorded = 0;
  std::uint64_t twin_skipped = 0;
};

class management_twin {
 public:
  void publish(management_view v) {
    std::lock_guard lock(mutex_);
    view_ = std::move(v);
  }

  management_view snapshot() const {
    std::lock_guard lock(mutex_);
    return view_;
  }

  void log(management_event e) {
    std::lock_guard lock(mutex_);
    events_.push_back(std::move(e));
  }

  std::vector<management_event> events() const {
    std::lock_guard lock(mutex_);
    return events_;
  }

 private:
  mutable std::mutex mutex_;
  management_view view_;
  std::vector<management_event> events_;
};

// --- twin store ----------------------------------------------------------------------

struct twin_config {
  std::size_t depth = 1'000'000;
  fidelity_spec supervisory{{}, 100, {aggregation::mean, aggregation::max}};
  fidelity_spec kpi{{}, 10'000, {aggregation::mean, aggregation::max}};
  bool enable_higher_levels = true;
};

inline std::string format_double(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class twin_store {
 public:
  static constexpr int ops_level = 2;
  static constexpr int supervisory_level = 3;
  static constexpr int kpi_level = 5;

  twin_store(std::size_t asset_count, std::vector<service_id> services, twin_config cfg = {})
      : cfg_(std::move(cfg)), asset_count_(asset_count) {
    if (asset_count < 1 || asset_count > max_assets) throw config_error("twin asset count out of range");
    for (std::size_t a = 1; a <= asset_count; ++a)
      for (const char* s : {"x", "y", "u_applied", "source"}) ops_.schema.names.push_back(asset_signal(a, s));
    for (auto s : services) declare_service(s);
  }

  static std::string asset_signal(std::size_t asset, std::string_view what) {
    return "a" + std::to_string(asset) + "." + std::string(what);
  }
  static std::string service_signal(service_id s) { return "s" + std::to_string(s) + ".u"; }

  // Adds the service's output signal to the operations twin. Higher levels keep
  // the parameter set they were built with.
  void declare_service(service_id s) {
    std::lock_guard lock(mutex_);
    if (ops_.schema.index_of(service_signal(s))) return;
    ops_.schema.names.push_back(service_signal(s));
    services_.push_back(s);
  }

  void record(const signal_frame& f) {
    std::lock_guard lock(mutex_);
    twin_record r;
    r.first = r.last = f.cycle;
    r.values.reserve(ops_.schema.names.size());
    for (std::size_t a = 0; a < asset_count_; ++a) {
      r.values.push_back(f.plant_state[a]);
      r.values.push_back(f.measurement[a]);
      r.values.push_back(f.applied[a].value);
      r.values.push_back(static_cast<double>(f.applied[a].source));
    }
    for (auto s : services_) {
      const auto* o = f.output_of(s);
      r.values.push_back(o && !(o->flags & (frame_flags::late | frame_flags::fault)) ? o->value
                                                                                    : std::numeric_limits<double>::quiet_NaN());
    }
    ++recorded_;
    append_ops(std::move(r));
  }

  void record_invalid(std::uint64_t n = 1) {
    std::lock_guard lock(mutex_);
    skipped_ += n;
  }

  std::uint64_t recorded() const {
    std::lock_guard lock(mutex_);
    return recorded_;
  }
  std::uint64_t skipped() const {
    std::lock_guard lock(mutex_);
    return skipped_;
  }
  double skip_ratio() const {
    std::lock_guard lock(mutex_);
    const auto total = recorded_ + skipped_;
    return total == 0 ? 0.0 : double(skipped_) / double(total);
  }

  twin_schema schema(int level) const {
    std::lock_guard lock(mutex_);
    return level_ref(level).schema;
  }

  // Records of `level` overlapping [from, to], restricted to `signals` (empty = all).
  std::vector<twin_record> query(int level, const std::vector<std::string>& signals, cycle_index from,
                                 cycle_index to) const {
    std::lock_guard lock(mutex_);
    const auto& l = level_ref(level);
    std::vector<std::size_t> cols;
    if (signals.empty()) {
      for (std::size_t i = 0; i < l.schema.names.size(); ++i) cols.push_back(i);
    } else {
      for (const auto& s : signals) {
        auto idx = l.schema.index_of(s);
        if (!idx) throw twin_query_error("unknown signal '" + s + "' at level " + std::to_string(level));
        cols.push_back(*idx);
      }
    }
    std::vector<twin_record> out;
    if (from > to) return out;
    auto it = std::lower_bound(l.records.begin(), l.records.end(), from,
                               [](const twin_record& r, cycle_index c) { return r.last < c; });
    for (; it != l.records.end() && it->first <= to; ++it) {
      twin_record r;
      r.first = it->first;
      r.last = it->last;
      for (auto c : cols) r.values.push_back(it->value(c));
      out.push_back(std::move(r));
    }
    return out;
  }

  // |u_a - u_b| over cycles in [from, to] where both services produced a value.
  std::optional<divergence_metrics> divergence(service_id a, service_id b, cycle_index from, cycle_index to) const {
    std::lock_guard lock(mutex_);
    auto ia = ops_.schema.index_of(service_signal(a));
    auto ib = ops_.schema.index_of(service_signal(b));
    if (!ia || !ib) return std::nullopt;
    divergence_metrics m;
    double sum_sq = 0.0;
    auto it = std::lower_bound(ops_.records.begin(), ops_.records.end(), from,
                               [](const twin_record& r, cycle_index c) { return r.last < c; });
    for (; it != ops_.records.end() && it->first <= to; ++it) {
      const double ua = it->value(*ia);
      const double ub = it->value(*ib);
      if (!std::isfinite(ua) || !std::isfinite(ub)) continue;
      const double d = std::abs(ua - ub);
      m.per_cycle.push_back({it->first, d});
      sum_sq += d * d;
      m.max = std::max(m.max, d);
    }
    if (m.per_cycle.empty()) return std::nullopt;
    m.rms = std::sqrt(sum_sq / double(m.per_cycle.size()));
    return m;
  }

  // Close trailing windows on the higher levels.
  void flush() {
    std::lock_guard lock(mutex_);
    if (!sup_agg_) return;
    if (auto w = sup_agg_->flush()) append_supervisory(std::move(*w));
    if (kpi_agg_)
      if (auto w = kpi_agg_->flush()) append_kpi(std::move(*w));
  }

  void write_csv(int level, std::ostream& os) const {
    std::lock_guard lock(mutex_);
    const auto& l = level_ref(level);
    os << "cycle_first,cycle_last";
    for (const auto& n : l.schema.names) os << ',' << n;
    os << '\n';
    for (const auto& r : l.records) {
      os << r.first << ',' << r.last;
      for (std::size_t i = 0; i < l.schema.names.size(); ++i) os << ',' << format_double(r.value(i));
      os << '\n';
    }
  }

  management_twin& management() noexcept { return management_; }
  const management_twin& management() const noexcept { return management_; }

 private:
  struct level_store {
    twin_schema schema;
    std::deque<twin_record> records;
  };

  const level_store& level_ref(int level) const {
    switch (level) {
      case ops_level: return ops_;
      case supervisory_level: return sup_;
      case kpi_level: return kpi_;
      default: throw twin_query_error("unknown twin level " + std::to_string(level));
    }
  }

  void trim(level_store& l) {
    while (l.records.size() > cfg_.depth) l.records.pop_front();
  }

  void append_ops(twin_record r) {
    if (cfg_.enable_higher_levels && !sup_agg_) {
      sup_agg_.emplace(ops_.schema, cfg_.supervisory);
      sup_.schema = sup_agg_->schema();
      kpi_agg_.emplace(sup_.schema, cfg_.kpi);
      kpi_.schema = kpi_agg_->schema();
    }
    if (sup_agg_)
      for (auto& w : sup_agg_->push(r)) append_supervisory(std::move(w));
    ops_.records.push_back(std::move(r));
    trim(ops_);
  }

  void append_supervisory(twin_record r) {
    if (kpi_agg_)
      for (auto& w : kpi_agg_->push(r)) append_kpi(std::move(w));
    sup_.records.push_back(std::move(r));
    trim(sup_);
  }

  void append_kpi(twin_record r) {
    kpi_.records.push_back(std::move(r));
    trim(kpi_);
  }

  twin_config cfg_;
  std::size_t asset_count_;
  std::vector<service_id> services_;
  mutable std::mutex mutex_;
  level_store ops_;
  level_store sup_;
  level_store kpi_;
  std::optional<window_aggregator> sup_agg_;
  std::optional<window_aggregator> kpi_agg_;
  std::uint64_t recorded_ = 0;
  std::uint64_t skipped_ = 0;
  management_twin management_;
};

// Stage-4 consumer copying every still-available cycle into the twin.
class twin_recorder {
 public:
  void poll(const ring_pipeline<signal_frame>& pipeline, cycle_index latest, twin_store& store) {
    if (latest < next_) return;
    const cycle_index cap = pipeline.capacity();
    if (latest - next_ >= cap) {
      // already overwritten; don't even try
      const cycle_index lost = latest - next_ + 1 - cap;
      store.record_invalid(lost);
      skipped_ += lost;
      next_ += lost;
    }
    for (; next_ <= latest; ++next_) {
      const auto txn = pipeline.begin_read(pipeline.position_of(next_));
      bool ok = txn.observed_stamp == next_;
      signal_frame frame{};
      if (ok) {
        frame = pipeline.read(txn).frame;
        ok = pipeline.end_read(txn);
      }
      if (ok) {
        store.record(frame);
        ++recorded_;
      } else {
        store.record_invalid();
        ++skipped_;
      }
    }
  }

  std::uint64_t recorded() const noexcept { return recorded_; }
  std::uint64_t skipped() const noexcept { return skipped_; }

 private:
  cycle_index next_ = 1;
  std::uint64_t recorded_ = 0;
  std::uint64_t skipped_ = 0;
};

}  // namespace abcycle
