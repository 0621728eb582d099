#include <gtest/gtest.h>

#include <deque>
#include <random>
#include <thread>

#include "abcycle/ring_pipeline.hpp"

using namespace abcycle;

namespace {

struct frame {
  std::uint64_t cycle = 0;
  std::uint64_t payload[5]{};
};

frame make(cycle_index c) {
  frame f;
  f.cycle = c;
  for (std::size_t i = 0; i < 5; ++i) f.payload[i] = c * 31 + i;
  return f;
}

bool intact(const frame& f) {
  for (std::size_t i = 0; i < 5; ++i)
    if (f.payload[i] != f.cycle * 31 + i) return false;
  return true;
}

void full_cycle(ring_pipeline<frame>& p, const ring_pipeline<frame>::frame_writer& w, cycle_index c) {
  p.claim(c);
  p.store(w, c, make(c));
  p.publish_stage(stage_id::input, c);
  p.publish_stage(stage_id::control, c);
  p.publish_stage(stage_id::output, c);
}

}  // namespace

TEST(RingPipeline, CapacityMustBePowerOfTwo) {
  EXPECT_THROW(ring_pipeline<frame>(3, stage_graph::canonical()), config_error);
  EXPECT_THROW(ring_pipeline<frame>(1, stage_graph::canonical()), config_error);
  ring_pipeline<frame> p(16, stage_graph::canonical());
  EXPECT_EQ(p.capacity(), 16u);
  EXPECT_EQ(p.position_of(17), 1u);
}

TEST(RingPipeline, GraphValidationRejectsBadShapes) {
  auto g = stage_graph::canonical();
  g.tasks.push_back({"out", stage_id::output, access_mode::read_write, false});
  EXPECT_THROW(ring_pipeline<frame>(4, g), config_error);

  auto two = stage_graph::canonical();
  two.tasks.push_back({"in2", stage_id::input, access_mode::read_write, true});
  EXPECT_THROW(ring_pipeline<frame>(4, two), config_error);

  auto dup = stage_graph::canonical();
  dup.tasks.push_back({"input", stage_id::control, access_mode::read_write, false});
  EXPECT_THROW(ring_pipeline<frame>(4, dup), config_error);
}

TEST(RingPipeline, StageThreeAndFourHaveNoWritePermission) {
  auto g = stage_graph::canonical();
  g.tasks.push_back({"out", stage_id::output, access_mode::read_only, false});
  g.tasks.push_back({"log", stage_id::async, access_mode::read_only, false});
  ring_pipeline<frame> p(4, g);
  EXPECT_THROW((void)p.writer("out"), protocol_error);
  EXPECT_THROW((void)p.writer("log"), protocol_error);
  EXPECT_THROW((void)p.writer("nope"), config_error);
  EXPECT_NO_THROW((void)p.writer("input"));
}

TEST(RingPipeline, ClaimAndPublishEnforceOrder) {
  ring_pipeline<frame> p(4, stage_graph::canonical());
  EXPECT_THROW(p.claim(2), protocol_error);
  p.claim(1);
  EXPECT_THROW(p.publish_stage(stage_id::control, 1), protocol_error);  // upstream not done
  p.publish_stage(stage_id::input, 1);
  EXPECT_THROW(p.publish_stage(stage_id::input, 1), protocol_error);    // twice
  p.publish_stage(stage_id::control, 1);
  p.publish_stage(stage_id::output, 1);
  EXPECT_TRUE(p.sequences().monotone());
}

TEST(RingPipeline, ClaimRefusesToLapSynchronousStages) {
  ring_pipeline<frame> p(4, stage_graph::canonical());
  for (cycle_index c = 1; c <= 4; ++c) p.claim(c);
  EXPECT_THROW(p.claim(5), protocol_error);
}

TEST(RingPipeline, ClaimIsConstantStepsIndependentOfReaders) {
  ring_pipeline<frame> p(8, stage_graph::canonical());
  const auto w = p.writer("input");
  std::vector<ring_pipeline<frame>::read_txn> open;
  for (cycle_index c = 1; c <= 5000; ++c) {
    full_cycle(p, w, c);
    EXPECT_EQ(p.last_claim_steps(), 4u);
    if (c % 3 == 0) open.push_back(p.begin_read(p.position_of(c)));
  }
}

TEST(RingPipeline, TryReadReturnsOnlyCompletedCycles) {
  ring_pipeline<frame> p(4, stage_graph::canonical());
  const auto w = p.writer("input");
  p.claim(1);
  p.store(w, 1, make(1));
  EXPECT_FALSE(p.try_read(1)) << "not yet published by stage 3";
  p.publish_stage(stage_id::input, 1);
  p.publish_stage(stage_id::control, 1);
  p.publish_stage(stage_id::output, 1);
  auto f = p.try_read(1);
  ASSERT_TRUE(f);
  EXPECT_EQ(f->cycle, 1u);
  EXPECT_TRUE(intact(*f));
  EXPECT_FALSE(p.try_read(2));
}

TEST(RingPipeline, OverwrittenTransactionIsInvalid) {
  ring_pipeline<frame> p(4, stage_graph::canonical());
  const auto w = p.writer("input");
  full_cycle(p, w, 1);
  const auto txn = p.begin_read(p.position_of(1));
  EXPECT_EQ(txn.observed_stamp, 1u);
  for (cycle_index c = 2; c <= 5; ++c) full_cycle(p, w, c);  // cycle 5 reuses slot of 1
  (void)p.read(txn);
  EXPECT_FALSE(p.end_read(txn));
  EXPECT_FALSE(p.try_read(1));
  EXPECT_TRUE(p.try_read(5));
}

TEST(RingPipeline, StoreRequiresClaimedSlot) {
  ring_pipeline<frame> p(4, stage_graph::canonical());
  const auto w = p.writer("input");
  EXPECT_THROW(p.store(w, 1, make(1)), protocol_error);
  p.claim(1);
  p.store(w, 1, make(1));
  p.publish_stage(stage_id::input, 1);
  EXPECT_THROW(p.store(w, 1, make(1)), protocol_error);
}

TEST(RingPipeline, ReconfigureOnlyBetweenCycles) {
  ring_pipeline<frame> p(4, stage_graph::canonical());
  const auto w = p.writer("input");
  full_cycle(p, w, 1);
  graph_delta add;
  add.add.push_back({"ctl", stage_id::control, access_mode::read_write, false});
  p.reconfigure(add);
  EXPECT_NO_THROW((void)p.writer("ctl"));
  p.claim(2);
  graph_delta rm;
  rm.remove.push_back("ctl");
  EXPECT_THROW(p.reconfigure(rm), protocol_error);
  graph_delta producer;
  producer.remove.push_back("input");
  p.store(w, 2, make(2));
  p.publish_stage(stage_id::input, 2);
  p.publish_stage(stage_id::control, 2);
  p.publish_stage(stage_id::output, 2);
  EXPECT_THROW(p.reconfigure(producer), config_error);
  p.reconfigure(rm);
  EXPECT_THROW((void)p.writer("ctl"), config_error);
}

// Property: sequences stay monotone and the ring never exposes a frame of a different cycle.
TEST(RingPipeline, RandomizedInterleavingMatchesQueueModel) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    ring_pipeline<frame> p(4, stage_graph::canonical());
    const auto w = p.writer("input");
    // independent model: a FIFO of cycles between each pair of stages
    std::deque<cycle_index> q1, q2, q3;
    cycle_index next = 1;
    std::vector<cycle_index> out_model, out_ring;
    for (int step = 0; step < 2000; ++step) {
      const int op = static_cast<int>(rng() % 4);
      if (op == 0 && p.produced() - p.completed(stage_id::output) < p.capacity()) {
        p.claim(next);
        p.store(w, next, make(next));
        q1.push_back(next++);
      } else if (op == 1 && !q1.empty()) {
        p.publish_stage(stage_id::input, q1.front());
        q2.push_back(q1.front());
        q1.pop_front();
      } else if (op == 2 && !q2.empty()) {
        p.publish_stage(stage_id::control, q2.front());
        q3.push_back(q2.front());
        q2.pop_front();
      } else if (op == 3 && !q3.empty()) {
        const auto c = q3.front();
        q3.pop_front();
        p.publish_stage(stage_id::output, c);
        out_model.push_back(c);
        auto f = p.try_read(c);
        ASSERT_TRUE(f);
        EXPECT_EQ(f->cycle, c);
        EXPECT_TRUE(intact(*f));
        out_ring.push_back(f->cycle);
      }
      ASSERT_TRUE(p.sequences().monotone());
    }
    EXPECT_EQ(out_model, out_ring);
  }
}

TEST(RingPipeline, ConcurrentReadersNeverValidateTornFrames) {
  ring_pipeline<frame> p(4, stage_graph::canonical());
  const auto w = p.writer("input");
  std::atomic<bool> stop{false};
  std::atomic<std::uint64_t> validated{0}, torn{0};
  std::thread reader([&] {
    std::mt19937 rng(3);
    while (!stop.load(std::memory_order_relaxed)) {
      const auto t = p.begin_read(rng() % 4);
      const auto c = p.read(t);
      if (p.end_read(t)) {
        validated.fetch_add(1, std::memory_order_relaxed);
        if (!c.checksum_ok || c.frame.cycle != t.observed_stamp || !intact(c.frame)) torn.fetch_add(1);
      }
    }
  });
  for (cycle_index c = 1; c <= 200000; ++c) full_cycle(p, w, c);
  stop.store(true);
  reader.join();
  EXPECT_EQ(torn.load(), 0u);
  EXPECT_GT(validated.load(), 0u);
}
