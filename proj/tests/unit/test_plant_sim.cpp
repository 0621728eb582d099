#include <gtest/gtest.h>

#include "abcycle/plant_sim.hpp"

using namespace abcycle;

TEST(Plant, NoiselessRecurrence) {
  plant_config c;
  c.a = 0.5;
  c.b = 2.0;
  c.x0 = 1.0;
  first_order_plant p(c);
  EXPECT_EQ(p.sense(), 1.0);
  EXPECT_EQ(p.step(0.25), 1.0);  // 0.5 + 0.5
  EXPECT_EQ(p.step(0.0), 0.5);
  EXPECT_EQ(p.state(), 0.5);
}

TEST(Plant, ValidationRejectsUnstableAndBadIds) {
  plant_config c;
  c.a = 1.0;
  EXPECT_THROW(first_order_plant{c}, config_error);
  c.allow_unstable = true;
  EXPECT_NO_THROW(first_order_plant{c});
  plant_config d;
  d.asset = 0;
  EXPECT_THROW(first_order_plant{d}, config_error);
  plant_config e;
  e.measurement_noise.stddev = -1;
  EXPECT_THROW(first_order_plant{e}, config_error);
}

TEST(Plant, SeededNoiseIsReproducibleAndSeparate) {
  plant_config c;
  c.measurement_noise = {0.1, 42};
  c.process_noise = {0.05, 43};
  first_order_plant p1(c), p2(c);
  for (int i = 0; i < 100; ++i) {
    ASSERT_EQ(p1.sense(), p2.sense());
    ASSERT_EQ(p1.step(0.3), p2.step(0.3));
  }
  // measurement noise does not perturb the true state
  plant_config quiet = c;
  quiet.measurement_noise = {0.0, 0};
  first_order_plant a(c), b(quiet);
  for (int i = 0; i < 50; ++i) {
    (void)a.sense();
    ASSERT_EQ(a.step(0.1), b.step(0.1));
  }
}

TEST(Plant, DivergenceThrows) {
  plant_config c;
  c.a = 0.5;
  c.b = 1e308;
  first_order_plant p(c);
  EXPECT_THROW(p.step(1e308), std::runtime_error);
}

TEST(ActuatorPort, OneWritePerCycle) {
  actuator_port port({1}, nullptr);
  port.actuate(1, 1, 0.5, 1);
  port.actuate(1, 1, 0.7, 1);
  ASSERT_EQ(port.faults().size(), 1u);
  EXPECT_EQ(port.last_value(1), 0.5);
  EXPECT_EQ(port.write_count(1), 1u);
}

TEST(ActuatorPort, SkippedCycleIsAFault) {
  actuator_port port({1}, nullptr);
  port.actuate(1, 1, 0.5, 1);
  port.actuate(3, 1, 0.5, 1);
  ASSERT_EQ(port.faults().size(), 1u);
  EXPECT_NE(port.faults()[0].what.find("skipped"), std::string::npos);
}

TEST(ActuatorPort, BlockedServiceIsRefused) {
  actuator_port port({1}, [](asset_id, cycle_index, service_id s) { return s == 1; });
  port.actuate(1, 1, 0.5, 1);
  port.actuate(2, 1, 9.0, 2);
  ASSERT_EQ(port.faults().size(), 1u);
  EXPECT_EQ(port.last_value(1), 0.5);
  EXPECT_EQ(port.last_source(1), 1u);
  EXPECT_TRUE(port.log().back().held);
}

TEST(ActuatorPort, HoldRepeatsPreviousValue) {
  actuator_port port({1, 2}, nullptr);
  port.actuate(1, 1, 0.25, 1);
  port.hold(2, 1);
  EXPECT_EQ(port.last_value(1), 0.25);
  EXPECT_EQ(port.write_count(1), 2u);
  EXPECT_TRUE(port.faults().empty());
  EXPECT_THROW(port.actuate(1, 3, 0.0, 1), config_error);
}
