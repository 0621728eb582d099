#include <gtest/gtest.h>

#include <random>

#include "fixtures.hpp"

using namespace abcycle;
using namespace abcycle::testing;

namespace {

bool history_is_legal(const std::vector<transition_record>& h) {
  std::map<asset_id, adaptation_state> st;
  for (const auto& r : h) {
    auto it = st.find(r.asset);
    const auto from = it == st.end() ? adaptation_state::idle : it->second;
    if (r.from != from || !is_legal_transition(r.from, r.to)) return false;
    st[r.asset] = r.to;
  }
  return true;
}

}  // namespace

TEST(StateMachine, LegalTransitionTable) {
  using S = adaptation_state;
  const std::set<std::pair<S, S>> legal{
      {S::idle, S::allocating},        {S::allocating, S::configuring}, {S::allocating, S::aborted},
      {S::configuring, S::shadow},     {S::configuring, S::aborted},    {S::shadow, S::switching},
      {S::shadow, S::aborted},         {S::switching, S::active},       {S::switching, S::aborted},
      {S::switching, S::shadow},       {S::active, S::rolled_back},     {S::active, S::idle},
      {S::rolled_back, S::idle},       {S::aborted, S::idle}};
  for (auto from : all_adaptation_states)
    for (auto to : all_adaptation_states)
      EXPECT_EQ(is_legal_transition(from, to), legal.count({from, to}) == 1) << to_string(from) << "->" << to_string(to);
}

TEST(AdaptationManager, DeployWalksAllocatingConfiguringShadow) {
  device d(one_asset());
  d.run(10);
  auto t = d.deploy_shadow(candidate(), {});
  ASSERT_TRUE(t.accepted) << t.reason;
  d.run(13);
  EXPECT_EQ(d.manager().state(1), adaptation_state::shadow);
  const auto h = d.manager().history();
  ASSERT_EQ(h.size(), 3u);
  EXPECT_EQ(h[0].cycle, 11u);
  EXPECT_EQ(h[0].to, adaptation_state::allocating);
  EXPECT_EQ(h[1].cycle, 12u);
  EXPECT_EQ(h[2].cycle, 13u);
  EXPECT_EQ(*d.manager().shadow_start(1), 13u);
  EXPECT_TRUE(d.executor().has_task("svc.2"));
  EXPECT_EQ(d.executor().priority_of("svc.2"), priority_class::p2);
  EXPECT_EQ(d.forwarding_gate().candidate(1), 2u);
  EXPECT_GT(d.manager().arena_used(), 0u);
  ASSERT_TRUE(t.applied);
  EXPECT_EQ(t.applied->get().cycle, 11u);
}

TEST(AdaptationManager, DeployRejections) {
  device d(one_asset());
  d.run(5);
  EXPECT_FALSE(d.deploy_shadow(candidate(1), {}).accepted) << "id of the active service";
  EXPECT_FALSE(d.deploy_shadow(candidate(2, 3), {}).accepted) << "unmanaged asset";
  resource_budget bad;
  bad.violation_threshold = 0;
  EXPECT_FALSE(d.deploy_shadow(candidate(), bad).accepted);
  ASSERT_TRUE(d.deploy_shadow(candidate(), {}).accepted);
  EXPECT_FALSE(d.deploy_shadow(candidate(3), {}).accepted) << "deployment already pending";
  run_until_state(d, adaptation_state::shadow);
  const auto again = d.deploy_shadow(candidate(3), {});
  EXPECT_FALSE(again.accepted);
  EXPECT_NE(again.reason.find("Shadow"), std::string::npos);
}

TEST(AdaptationManager, ArenaExhaustionAbortsWithAllocFailed) {
  auto cfg = one_asset();
  cfg.manager.arena_bytes = 0;
  device d(cfg);
  d.run(1);
  ASSERT_TRUE(d.deploy_shadow(candidate(), {}).accepted);
  d.run(5);
  EXPECT_EQ(d.manager().state(1), adaptation_state::aborted);
  const auto h = d.manager().history();
  ASSERT_EQ(h.size(), 2u);
  EXPECT_EQ(h[1].reason, "AllocFailed");
  EXPECT_FALSE(d.executor().has_task("svc.2"));
  EXPECT_EQ(d.manager().arena_used(), 0u);
}

TEST(AdaptationManager, FootprintOverBudgetIsAllocFailed) {
  device d(one_asset());
  d.run(1);
  auto c = candidate();
  c.footprint_bytes = 1 << 20;
  ASSERT_TRUE(d.deploy_shadow(c, {}).accepted);
  d.run(5);
  EXPECT_EQ(d.manager().history().back().reason, "AllocFailed");
}

TEST(AdaptationManager, DeploymentWaitsForPermittedPlantState) {
  auto cfg = one_asset();
  cfg.manager.adaptation_permitted = [](cycle_index c) { return c >= 20; };
  device d(cfg);
  d.run(5);
  ASSERT_TRUE(d.deploy_shadow(candidate(), {}).accepted);
  d.run(19);
  EXPECT_EQ(d.manager().state(1), adaptation_state::idle);
  d.run(25);
  EXPECT_EQ(d.manager().history().front().cycle, 20u);
  EXPECT_EQ(d.manager().state(1), adaptation_state::shadow);
}

TEST(AdaptationManager, PromoteRules) {
  device d(one_asset());
  d.run(5);
  EXPECT_FALSE(d.promote(1, 100).accepted) << "Idle";
  d.deploy_shadow(candidate(), {});
  run_until_state(d, adaptation_state::shadow);
  d.run(50);
  EXPECT_FALSE(d.promote(1, 51).accepted) << "k must be >= current + 2";
  const auto t = d.promote(1, 60);
  ASSERT_TRUE(t.accepted) << t.reason;
  d.run(59);
  EXPECT_EQ(d.manager().state(1), adaptation_state::switching);
  EXPECT_EQ(d.forwarding_gate().designated(1, 59), 1u);
  d.run(60);
  EXPECT_EQ(d.manager().state(1), adaptation_state::active);
  EXPECT_EQ(d.executor().priority_of("svc.2"), priority_class::p1);
  EXPECT_EQ(d.executor().priority_of("svc.1"), priority_class::p2);
  EXPECT_EQ(d.trace(1).back().source, 2u);
  EXPECT_EQ(d.trace(1)[58].source, 1u);
}

TEST(AdaptationManager, PromoteWhileAbortedIsRejected) {
  device d(one_asset());
  d.deploy_shadow(candidate(), {});
  run_until_state(d, adaptation_state::shadow);
  d.abort(1);
  run_until_state(d, adaptation_state::aborted);
  const auto t = d.promote(1, d.current_cycle() + 10);
  EXPECT_FALSE(t.accepted);
  EXPECT_NE(t.reason.find("Aborted"), std::string::npos);
  EXPECT_FALSE(d.executor().has_task("svc.2"));
  EXPECT_EQ(d.forwarding_gate().candidate(1), no_service);
}

TEST(AdaptationManager, UnhealthyCandidateCannotBePromoted) {
  device d(one_asset(1000));
  d.deploy_shadow(candidate(), {});
  run_until_state(d, adaptation_state::shadow);
  d.run(d.current_cycle() + 5);
  d.inject_cost(2, std::chrono::microseconds(300));
  d.run(d.current_cycle() + 2);  // two violations, below the threshold of 5
  d.inject_cost(2, nanos(0));
  d.run(d.current_cycle() + 5);
  EXPECT_EQ(d.manager().state(1), adaptation_state::shadow);
  const auto t = d.promote(1, d.current_cycle() + 10);
  EXPECT_FALSE(t.accepted);
  EXPECT_NE(t.reason.find("violated"), std::string::npos);
}

TEST(AdaptationManager, BudgetViolationAbortsAfterThreshold) {
  device d(one_asset());
  d.deploy_shadow(candidate(), {});
  run_until_state(d, adaptation_state::shadow);
  d.run(100);
  d.inject_cost(2, std::chrono::microseconds(700));
  d.run(120);
  EXPECT_EQ(d.manager().state(1), adaptation_state::aborted);
  const auto last = d.manager().history().back();
  EXPECT_EQ(last.cycle, 106u);  // violations 101..105, abort in the next prep window
  EXPECT_EQ(last.reason.rfind("BudgetViolation", 0), 0u) << last.reason;
  EXPECT_FALSE(d.executor().has_task("svc.2"));
  EXPECT_TRUE(d.port().faults().empty());
}

TEST(AdaptationManager, PreExistingOverrunsDoNotAbort) {
  // The plant already overruns 5% of its cycles before B arrives; B adds none.
  auto cfg = one_asset();
  device d(cfg);
  int n = 0;
  // make A occasionally slow enough to overrun the whole cycle
  d.inject_cost(1, nanos(0));
  for (cycle_index c = 1; c <= 400; ++c) {
    d.inject_cost(1, (++n % 20 == 0) ? std::chrono::microseconds(1100) : std::chrono::microseconds(0));
    d.step();
    if (c == 200) d.deploy_shadow(candidate(), {});
  }
  EXPECT_EQ(d.manager().state(1), adaptation_state::shadow) << d.manager().history().back().reason;
}

TEST(AdaptationManager, OverrunRateIncreaseAborts) {
  auto cfg = one_asset();
  device d(cfg);
  d.deploy_shadow(candidate(), {});
  run_until_state(d, adaptation_state::shadow);
  d.run(300);
  // B itself stays within budget; the overruns come from the cycle as a whole
  EXPECT_EQ(d.manager().state(1), adaptation_state::shadow);
  d.inject_cost(1, std::chrono::microseconds(1100));
  d.run(600);
  EXPECT_EQ(d.manager().state(1), adaptation_state::aborted);
  EXPECT_EQ(d.manager().history().back().reason.rfind("OverrunRate", 0), 0u);
}

TEST(AdaptationManager, RollbackWithinRetention) {
  device d(one_asset(10, 1000));
  d.deploy_shadow(candidate(), {});
  run_until_state(d, adaptation_state::shadow);
  d.run(50);
  ASSERT_TRUE(d.promote(1, 60).accepted);
  d.run(70);
  EXPECT_FALSE(d.rollback(1, 71).accepted);
  ASSERT_TRUE(d.rollback(1, 80).accepted);
  d.run(90);
  EXPECT_EQ(d.manager().state(1), adaptation_state::rolled_back);
  EXPECT_FALSE(d.executor().has_task("svc.2"));
  EXPECT_EQ(d.executor().priority_of("svc.1"), priority_class::p1);
  const auto tr = d.trace(1);
  EXPECT_EQ(tr[78].source, 2u);
  EXPECT_EQ(tr[79].source, 1u);
  ASSERT_TRUE(d.reset(1).accepted);
  d.step();
  EXPECT_EQ(d.manager().state(1), adaptation_state::idle);
}

TEST(AdaptationManager, RollbackAfterRetentionIsRejected) {
  device d(one_asset(10, 100));
  d.deploy_shadow(candidate(), {});
  run_until_state(d, adaptation_state::shadow);
  d.run(50);
  ASSERT_TRUE(d.promote(1, 60).accepted);
  d.run(200);
  EXPECT_EQ(d.manager().state(1), adaptation_state::active);
  EXPECT_FALSE(d.executor().has_task("svc.1")) << "A decommissioned";
  EXPECT_EQ(d.manager().primary_of(1).id, 2u);
  const auto t = d.rollback(1, 210);
  EXPECT_FALSE(t.accepted);
  EXPECT_NE(t.reason.find("retention"), std::string::npos);
  EXPECT_TRUE(d.reset(1).accepted);
  d.step();
  EXPECT_EQ(d.manager().state(1), adaptation_state::idle);
  // a new candidate may now replace B
  ASSERT_TRUE(d.deploy_shadow(candidate(3), {}).accepted);
  run_until_state(d, adaptation_state::shadow);
  EXPECT_EQ(d.forwarding_gate().designated(1, d.current_cycle() + 1), 2u);
}

TEST(AdaptationManager, AbortDuringRetentionRollsBack) {
  device d(one_asset(10, 1000));
  d.deploy_shadow(candidate(), {});
  run_until_state(d, adaptation_state::shadow);
  d.run(50);
  ASSERT_TRUE(d.promote(1, 60).accepted);
  d.run(100);
  ASSERT_TRUE(d.abort(1, "test").accepted);
  d.run(110);
  EXPECT_EQ(d.manager().state(1), adaptation_state::rolled_back);
  EXPECT_EQ(d.trace(1).back().source, 1u);
  EXPECT_TRUE(d.port().faults().empty());
}

TEST(AdaptationManager, AbortBeforeSwitchWithdrawsIt) {
  device d(one_asset());
  d.deploy_shadow(candidate(), {});
  run_until_state(d, adaptation_state::shadow);
  d.run(50);
  ASSERT_TRUE(d.promote(1, 60).accepted);
  d.run(58);
  ASSERT_TRUE(d.abort(1).accepted);  // applied in prep window 59
  d.run(80);
  EXPECT_EQ(d.manager().state(1), adaptation_state::aborted);
  for (const auto& r : d.trace(1)) ASSERT_EQ(r.source, 1u);
}

TEST(AdaptationManager, AbortAtSwitchCycleWithdrawsIt) {
  device d(one_asset());
  d.deploy_shadow(candidate(), {});
  run_until_state(d, adaptation_state::shadow);
  d.run(50);
  ASSERT_TRUE(d.promote(1, 60).accepted);
  d.run(59);
  ASSERT_TRUE(d.abort(1).accepted);  // prep window 60 runs the hook first
  d.run(80);
  // the time-triggered activation at 60 comes from the hook, which runs after
  // queued requests: the abort wins and A keeps forwarding
  EXPECT_EQ(d.manager().state(1), adaptation_state::aborted);
  for (const auto& r : d.trace(1)) ASSERT_EQ(r.source, 1u);
}

TEST(AdaptationManager, CoordinatedPrepareAndCancel) {
  device d(one_asset());
  d.deploy_shadow(candidate(), {});
  run_until_state(d, adaptation_state::shadow);
  d.run(50);
  EXPECT_TRUE(d.manager().prepare_promote(1, 55, 10).has_value()) << "inside the commit margin";
  EXPECT_FALSE(d.manager().prepare_promote(1, 70, 10).has_value());
  EXPECT_EQ(d.manager().prepared_switch(1), 70u);
  auto c = d.manager().cancel_switch(1, 70);
  EXPECT_TRUE(c.accepted);
  EXPECT_FALSE(c.applied) << "never armed, nothing to do";
  ASSERT_TRUE(d.promote(1, 70).accepted);
  d.run(52);
  EXPECT_EQ(d.manager().state(1), adaptation_state::switching);
  auto c2 = d.manager().cancel_switch(1, 70);
  ASSERT_TRUE(c2.accepted);
  d.run(80);
  ASSERT_TRUE(c2.applied);
  EXPECT_TRUE(c2.applied->get().applied);
  EXPECT_EQ(d.manager().state(1), adaptation_state::shadow);
  for (const auto& r : d.trace(1)) ASSERT_EQ(r.source, 1u);
}

// Property: random request sequences only ever produce legal transitions and
// never let a blocked service reach the actuator.
TEST(AdaptationManager, RandomRequestSequencesStayLegal) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 30; ++trial) {
    device d(one_asset(5, 50 + rng() % 100));
    for (int step = 0; step < 60; ++step) {
      const auto now = d.current_cycle();
      switch (rng() % 7) {
        case 0: d.deploy_shadow(candidate(2 + rng() % 3), {}); break;
        case 1: d.promote(1, now + 2 + rng() % 20); break;
        case 2: d.rollback(1, now + 2 + rng() % 20); break;
        case 3: d.abort(1); break;
        case 4: d.reset(1); break;
        case 5: d.inject_cost(d.manager().shadow_of(1) ? d.manager().shadow_of(1)->id : 2, std::chrono::microseconds(rng() % 2 ? 0 : 400)); break;
        default: break;
      }
      d.run(now + 1 + rng() % 15);
    }
    ASSERT_TRUE(history_is_legal(d.manager().history()));
    ASSERT_TRUE(d.port().faults().empty()) << d.port().faults().front().what;
    ASSERT_EQ(d.port().write_count(1), d.current_cycle());
  }
}
