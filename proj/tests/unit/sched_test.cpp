#include "flatland/sched.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

using flatland::AlrsConfig;
using flatland::AlrsState;
using flatland::alrs_step;
using flatland::AlrsStepResult;
using flatland::cosine_lr;

namespace {

AlrsState state_past_warmup(double lr, double last_loss, AlrsConfig cfg = {}) {
  AlrsState s(cfg);
  s.epoch = 10;
  s.lr = lr;
  s.curr_loss = last_loss;
  s.losses_seen = 1;
  return s;
}

}  // namespace

TEST(AlrsConfigTest, Validation) {
  AlrsConfig ok;
  EXPECT_NO_THROW(ok.validate());

  AlrsConfig c = ok;
  c.warmup_epochs = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);

  c = ok;
  c.target_lr = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);

  c = ok;
  c.decay_rate = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.decay_rate = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);

  c = ok;
  c.slope_threshold = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);

  c = ok;
  c.diff_threshold = -0.2;
  EXPECT_THROW(c.validate(), std::invalid_argument);

  c = ok;
  c.min_lr = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);

  c = ok;
  c.min_lr = c.target_lr;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(AlrsTest, WarmupRampIsLinearWithExactEndpoints) {
  AlrsState s{AlrsConfig{}};
  // epoch 0: no loss yet, rate is exactly zero
  AlrsStepResult r = alrs_step(s, std::nullopt);
  EXPECT_EQ(r.lr, 0.0);
  EXPECT_FALSE(r.terminate);
  EXPECT_FALSE(r.decayed);

  r = alrs_step(s, 2.0);
  EXPECT_EQ(r.lr, 0.02);

  r = alrs_step(s, 1.8);
  EXPECT_DOUBLE_EQ(r.lr, 0.04);
  r = alrs_step(s, 1.6);
  EXPECT_DOUBLE_EQ(r.lr, 0.06);
  r = alrs_step(s, 1.4);
  EXPECT_DOUBLE_EQ(r.lr, 0.08);

  // final warmup epoch returns the target literally
  r = alrs_step(s, 1.2);
  EXPECT_EQ(r.lr, 0.1);
  EXPECT_EQ(s.epoch, 6);
}

TEST(AlrsTest, WarmupNeverTerminatesEvenBelowMinRate) {
  AlrsState s{AlrsConfig{}};
  // rates 0 and 0.02 both sit below... no: only epoch 0's zero does; that
  // is the case the ramp must survive.
  AlrsStepResult r = alrs_step(s, std::nullopt);
  EXPECT_EQ(r.lr, 0.0);
  EXPECT_FALSE(r.terminate);
}

TEST(AlrsTest, PlateauDecaysByAlpha) {
  AlrsState s = state_past_warmup(0.1, 1.000);
  const AlrsStepResult r = alrs_step(s, 0.999);
  EXPECT_DOUBLE_EQ(r.lr, 0.09);
  EXPECT_TRUE(r.decayed);
  EXPECT_FALSE(r.terminate);
  EXPECT_EQ(s.epoch, 11);
  EXPECT_DOUBLE_EQ(s.lr, 0.09);
  EXPECT_DOUBLE_EQ(s.prev_loss, 1.000);
  EXPECT_DOUBLE_EQ(s.curr_loss, 0.999);
}

TEST(AlrsTest, SteepDescentKeepsRate) {
  AlrsState s = state_past_warmup(0.1, 2.0);
  const AlrsStepResult r = alrs_step(s, 1.0);
  EXPECT_DOUBLE_EQ(r.lr, 0.1);
  EXPECT_FALSE(r.decayed);
}

TEST(AlrsTest, DecayBelowMinRateTerminates) {
  AlrsState s = state_past_warmup(1e-4, 1.0);
  const AlrsStepResult r = alrs_step(s, 1.0);
  EXPECT_DOUBLE_EQ(r.lr, 9e-5);
  EXPECT_TRUE(r.decayed);
  EXPECT_TRUE(r.terminate);
}

TEST(AlrsTest, BothThresholdsMustHold) {
  // relative condition fails, absolute holds
  {
    AlrsState s = state_past_warmup(0.1, 0.35);
    EXPECT_FALSE(alrs_step(s, 0.25).decayed);
  }
  // relative holds, absolute fails
  {
    AlrsState s = state_past_warmup(0.1, 10.5);
    EXPECT_FALSE(alrs_step(s, 10.0).decayed);
  }
  // both hold
  {
    AlrsState s = state_past_warmup(0.1, 1.15);
    EXPECT_TRUE(alrs_step(s, 1.0).decayed);
  }
  // exactly at the threshold: strict comparison, no decay. 1.25 - 1.0 is
  // exact in binary, so delta lands on the threshold with no rounding.
  {
    AlrsConfig cfg;
    cfg.slope_threshold = 0.25;
    cfg.diff_threshold = 0.25;
    AlrsState s = state_past_warmup(0.1, 1.25, cfg);
    EXPECT_FALSE(alrs_step(s, 1.0).decayed);
  }
  {
    AlrsConfig cfg;
    cfg.slope_threshold = 0.25;
    cfg.diff_threshold = 0.25;
    AlrsState s = state_past_warmup(0.1, 1.2499999, cfg);
    EXPECT_TRUE(alrs_step(s, 1.0).decayed);
  }
}

TEST(AlrsTest, PlateauTriggerIsSymmetricInSign) {
  AlrsState down = state_past_warmup(0.1, 1.0);
  AlrsState up = state_past_warmup(0.1, 1.0);
  EXPECT_TRUE(alrs_step(down, 0.9).decayed);
  EXPECT_TRUE(alrs_step(up, 1.1).decayed);
}

TEST(AlrsTest, ProseRuleDecaysWheneverLossFailsToImprove) {
  AlrsConfig cfg;
  cfg.prose_decrease_rule = true;

  AlrsState worse = state_past_warmup(0.1, 1.0, cfg);
  EXPECT_TRUE(alrs_step(worse, 1.5).decayed);

  AlrsState flat = state_past_warmup(0.1, 1.0, cfg);
  EXPECT_TRUE(alrs_step(flat, 1.0).decayed);

  // any improvement, however small, keeps the rate
  AlrsState better = state_past_warmup(0.1, 1.0, cfg);
  EXPECT_FALSE(alrs_step(better, 1.0 - 1e-9).decayed);

  // the default rule decays on the same tiny improvement
  AlrsState def = state_past_warmup(0.1, 1.0);
  EXPECT_TRUE(alrs_step(def, 1.0 - 1e-9).decayed);
}

TEST(AlrsTest, NoDecayBeforeTwoLossesExist) {
  AlrsConfig cfg;
  cfg.warmup_epochs = 0;
  AlrsState s(cfg);

  AlrsStepResult r = alrs_step(s, std::nullopt);
  EXPECT_DOUBLE_EQ(r.lr, 0.1);
  EXPECT_FALSE(r.decayed);

  // first loss: still only one data point
  r = alrs_step(s, 1.0);
  EXPECT_FALSE(r.decayed);
  EXPECT_DOUBLE_EQ(r.lr, 0.1);

  // second loss completes the pair
  r = alrs_step(s, 1.0);
  EXPECT_TRUE(r.decayed);
}

TEST(AlrsTest, NonFiniteLossRejectedWithoutStateChange) {
  AlrsState s = state_past_warmup(0.05, 1.25);
  const AlrsState before = s;
  EXPECT_THROW(alrs_step(s, std::numeric_limits<double>::quiet_NaN()), std::invalid_argument);
  EXPECT_THROW(alrs_step(s, std::numeric_limits<double>::infinity()), std::invalid_argument);
  EXPECT_EQ(s.epoch, before.epoch);
  EXPECT_EQ(s.lr, before.lr);
  EXPECT_EQ(s.prev_loss, before.prev_loss);
  EXPECT_EQ(s.curr_loss, before.curr_loss);
  EXPECT_EQ(s.losses_seen, before.losses_seen);
}

// A 20-epoch scripted run. The decay epochs were worked out by hand from
// the two-threshold rule and cross-checked with an independent script; the
// rate trail must match a sequential alpha-multiplication mirror bit for
// bit.
TEST(AlrsTest, ScriptedRunMatchesExpectedDecaySchedule) {
  const std::vector<double> losses = {3.0, 2.0,  1.2,  1.19,  1.18,  0.9,   0.88, 0.87, 1.0, 0.99,
                                      0.5, 0.49, 0.485, 0.3,  0.29,  0.288, 0.287, 0.15, 0.149, 0.148};
  const std::vector<int> expected_decays = {7, 8, 9, 10, 12, 13, 15, 16, 17, 19, 20};

  AlrsState s{AlrsConfig{}};
  std::vector<int> decays;
  double mirror = 0.1;
  for (int e = 0; e <= static_cast<int>(losses.size()); ++e) {
    const std::optional<double> loss =
        e == 0 ? std::nullopt : std::optional<double>(losses[static_cast<std::size_t>(e - 1)]);
    const AlrsStepResult r = alrs_step(s, loss);
    ASSERT_FALSE(r.terminate);
    if (r.decayed) decays.push_back(e);
    if (e >= 6) {
      if (r.decayed) mirror = 0.9 * mirror;
      ASSERT_EQ(r.lr, mirror) << "epoch " << e;
    }
    ASSERT_LE(r.lr, 0.1);
  }
  EXPECT_EQ(decays, expected_decays);
  EXPECT_DOUBLE_EQ(s.lr, 0.03138105960900001);
}

TEST(AlrsTest, RateIsMonotoneAfterWarmup) {
  AlrsState s{AlrsConfig{}};
  double last = std::numeric_limits<double>::infinity();
  // alternating noisy losses around a slow descent
  for (int e = 0; e <= 30; ++e) {
    const std::optional<double> loss =
        e == 0 ? std::nullopt : std::optional<double>(2.0 / (1.0 + 0.1 * e) + (e % 2 ? 0.05 : 0.0));
    const AlrsStepResult r = alrs_step(s, loss);
    if (e > 5) {
      EXPECT_LE(r.lr, last);
      EXPECT_TRUE(r.lr == last || r.lr == 0.9 * last);
    }
    last = r.lr;
    if (r.terminate) break;
  }
}

TEST(AlrsTest, ConstantLossRunsDownToTermination) {
  AlrsConfig cfg;
  cfg.warmup_epochs = 0;
  AlrsState s(cfg);

  double mirror = 0.1;
  int calls = 0;
  int decays = 0;
  for (;;) {
    const AlrsStepResult r =
        alrs_step(s, calls == 0 ? std::nullopt : std::optional<double>(1.0));
    if (r.decayed) {
      ++decays;
      mirror = 0.9 * mirror;
    }
    ASSERT_EQ(r.lr, mirror);
    if (r.terminate) break;
    ++calls;
    ASSERT_LT(calls, 200) << "schedule failed to terminate";
  }
  // decays start on the third call; 66 of them push 0.1 below 1e-4
  EXPECT_EQ(decays, 66);
  EXPECT_EQ(calls, 67);
  EXPECT_GT(s.lr, 9.5e-5);
  EXPECT_LT(s.lr, 1e-4);
}

TEST(AlrsTest, ZeroWarmupStartsAtTarget) {
  AlrsConfig cfg;
  cfg.warmup_epochs = 0;
  AlrsState s(cfg);
  const AlrsStepResult r = alrs_step(s, std::nullopt);
  EXPECT_EQ(r.lr, 0.1);
}

TEST(CosineTest, EndpointsAreExact) {
  EXPECT_EQ(cosine_lr(0, 10, 0.1, 1e-4), 0.1);
  EXPECT_EQ(cosine_lr(10, 10, 0.1, 1e-4), 1e-4);
  EXPECT_EQ(cosine_lr(0, 1, 0.5, 0.001), 0.5);
  EXPECT_EQ(cosine_lr(1, 1, 0.5, 0.001), 0.001);
}

TEST(CosineTest, MidpointIsHalfway) {
  EXPECT_NEAR(cosine_lr(5, 10, 0.1, 0.0), 0.05, 1e-15);
  EXPECT_NEAR(cosine_lr(50, 100, 0.2, 0.1), 0.15, 1e-15);
}

TEST(CosineTest, StrictlyDecreasing) {
  double last = cosine_lr(0, 40, 0.1, 1e-4);
  for (int e = 1; e <= 40; ++e) {
    const double lr = cosine_lr(e, 40, 0.1, 1e-4);
    EXPECT_LT(lr, last) << "epoch " << e;
    last = lr;
  }
}

TEST(CosineTest, Validation) {
  EXPECT_THROW(cosine_lr(0, 0, 0.1, 1e-4), std::invalid_argument);
  EXPECT_THROW(cosine_lr(0, -3, 0.1, 1e-4), std::invalid_argument);
  EXPECT_THROW(cosine_lr(-1, 10, 0.1, 1e-4), std::invalid_argument);
  EXPECT_THROW(cosine_lr(11, 10, 0.1, 1e-4), std::invalid_argument);
}
