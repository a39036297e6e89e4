#include "flatland/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "flatland/rng.hpp"
#include "flatland/tape.hpp"
#include "flatland/tensor.hpp"

namespace {

using flatland::channel_schedule;
using flatland::PyramidSpec;
using flatland::RngStream;
using flatland::ShakeDropConfig;
using flatland::TapeT;
using flatland::TensorT;
using flatland::WidePyramidNetT;

using DModel = WidePyramidNetT<double>;
using DTape = TapeT<double>;
using DTensor = TensorT<double>;

// small enough to keep forward passes cheap: two blocks, 8px interior
PyramidSpec tiny_spec() {
  PyramidSpec spec;
  spec.input_resolution = 8;
  spec.base_channels = 4;
  spec.total_channel_add = 4;
  spec.num_stages = 2;
  spec.blocks_per_stage = 1;
  return spec;
}

DTensor random_images(int n, int res, std::uint64_t seed) {
  DTensor x({n, 3, res, res});
  RngStream rng(seed);
  for (auto& v : x.data) v = rng.uniform(0.0, 1.0);
  return x;
}

TEST(RoundHalfUpTest, Values) {
  EXPECT_EQ(flatland::round_half_up(0.5), 1);
  EXPECT_EQ(flatland::round_half_up(1.5), 2);
  EXPECT_EQ(flatland::round_half_up(2.4), 2);
  EXPECT_EQ(flatland::round_half_up(2.6), 3);
  EXPECT_EQ(flatland::round_half_up(-0.5), 0);
  EXPECT_EQ(flatland::round_half_up(-1.5), -1);
  EXPECT_EQ(flatland::round_half_up(3.0), 3);
}

TEST(PyramidSpecTest, Validation) {
  EXPECT_NO_THROW(PyramidSpec{}.validate());

  PyramidSpec s;
  s.input_resolution = 0;
  EXPECT_THROW(s.validate(), std::invalid_argument);

  s = PyramidSpec{};
  s.stem_downsample_factor = 3;
  EXPECT_THROW(s.validate(), std::invalid_argument);

  s = PyramidSpec{};
  s.input_resolution = 18;
  s.stem_downsample_factor = 4;
  EXPECT_THROW(s.validate(), std::invalid_argument);

  s = PyramidSpec{};
  s.base_channels = 0;
  EXPECT_THROW(s.validate(), std::invalid_argument);

  s = PyramidSpec{};
  s.total_channel_add = -1;
  EXPECT_THROW(s.validate(), std::invalid_argument);

  s = PyramidSpec{};
  s.num_stages = 0;
  EXPECT_THROW(s.validate(), std::invalid_argument);

  s = PyramidSpec{};
  s.blocks_per_stage = 0;
  EXPECT_THROW(s.validate(), std::invalid_argument);

  s = PyramidSpec{};
  s.bottleneck_ratio = 0;
  EXPECT_THROW(s.validate(), std::invalid_argument);

  s = PyramidSpec{};
  s.widen_factor = 0.0;
  EXPECT_THROW(s.validate(), std::invalid_argument);

  // three stages halve twice: 8 -> 4 -> 2 and 4 -> 2 -> 1 both work,
  // 6 strands at 3 after one halving
  s = PyramidSpec{};
  s.num_stages = 3;
  s.input_resolution = 8;
  EXPECT_NO_THROW(s.validate());
  s.input_resolution = 4;
  EXPECT_NO_THROW(s.validate());
  s.input_resolution = 6;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(ChannelScheduleTest, LinearRampWithRounding) {
  PyramidSpec s;  // base 8, add 16 over 6 blocks
  EXPECT_EQ(channel_schedule(s, 1), 11);
  EXPECT_EQ(channel_schedule(s, 2), 13);
  EXPECT_EQ(channel_schedule(s, 3), 16);
  EXPECT_EQ(channel_schedule(s, 4), 19);
  EXPECT_EQ(channel_schedule(s, 5), 21);
  EXPECT_EQ(channel_schedule(s, 6), 24);

  EXPECT_THROW(channel_schedule(s, 0), std::invalid_argument);
  EXPECT_THROW(channel_schedule(s, 7), std::invalid_argument);

  s.base_channels = 0;
  EXPECT_THROW(channel_schedule(s, 1), std::invalid_argument);
}

TEST(ChannelScheduleTest, WidenFactorScalesRoundedCounts) {
  PyramidSpec s;
  s.widen_factor = 2.0;
  EXPECT_EQ(channel_schedule(s, 1), 22);
  EXPECT_EQ(channel_schedule(s, 6), 48);

  // widen applies to the already rounded base count: 1.5 * 11 rounds up
  s.widen_factor = 1.5;
  EXPECT_EQ(channel_schedule(s, 1), 17);
}

TEST(ChannelScheduleTest, MonotoneNonDecreasing) {
  PyramidSpec s;
  s.base_channels = 5;
  s.total_channel_add = 23;
  s.num_stages = 3;
  s.blocks_per_stage = 3;
  int prev = 0;
  for (int k = 1; k <= s.total_blocks(); ++k) {
    const int c = channel_schedule(s, k);
    EXPECT_GE(c, prev);
    prev = c;
  }
  EXPECT_EQ(prev, s.base_channels + s.total_channel_add);
}

TEST(ModelTest, ConstructorValidation) {
  EXPECT_NO_THROW(DModel(tiny_spec(), 5, ShakeDropConfig{}, 1));
  EXPECT_THROW(DModel(tiny_spec(), 1, ShakeDropConfig{}, 1), std::invalid_argument);

  PyramidSpec bad = tiny_spec();
  bad.base_channels = 0;
  EXPECT_THROW(DModel(bad, 5, ShakeDropConfig{}, 1), std::invalid_argument);

  ShakeDropConfig sd;
  sd.gate_prob = -1.0;
  EXPECT_THROW(DModel(tiny_spec(), 5, sd, 1), std::invalid_argument);
}

TEST(ModelTest, Accessors) {
  DModel m(tiny_spec(), 5, ShakeDropConfig{}, 42);
  EXPECT_EQ(m.num_classes(), 5);
  EXPECT_EQ(m.init_seed(), 42u);
  EXPECT_EQ(m.interior_resolution(), 8);
  EXPECT_EQ(m.spec().num_stages, 2);
  EXPECT_TRUE(m.is_training());
  EXPECT_FALSE(m.is_folded());
  m.set_train(false);
  EXPECT_FALSE(m.is_training());
}

TEST(ModelTest, ParameterNamesAndOrder) {
  DModel m(tiny_spec(), 5, ShakeDropConfig{}, 1);
  const auto params = m.parameters();

  // stem 3, each block 4 bn pairs + 3 conv kernels, head bn pair + fc pair
  ASSERT_EQ(params.size(), 3u + 2u * 11u + 4u);

  EXPECT_EQ(params[0]->id, "stem.conv.w");
  EXPECT_EQ(params[1]->id, "stem.bn.gamma");
  EXPECT_EQ(params[2]->id, "stem.bn.beta");
  EXPECT_EQ(params[3]->id, "block01.bn1.gamma");
  EXPECT_EQ(params[4]->id, "block01.bn1.beta");
  EXPECT_EQ(params[5]->id, "block01.conv1.w");
  EXPECT_EQ(params[6]->id, "block01.bn2.gamma");
  EXPECT_EQ(params[8]->id, "block01.conv2.w");
  EXPECT_EQ(params[11]->id, "block01.conv3.w");
  EXPECT_EQ(params[14]->id, "block02.bn1.gamma");
  EXPECT_EQ(params[params.size() - 4]->id, "head.bn.gamma");
  EXPECT_EQ(params[params.size() - 2]->id, "head.fc.w");
  EXPECT_EQ(params[params.size() - 1]->id, "head.fc.b");

  std::set<std::string> ids;
  for (const auto* p : params) ids.insert(p->id);
  EXPECT_EQ(ids.size(), params.size());
}

TEST(ModelTest, BufferNamesCoverEveryBatchNorm) {
  DModel m(tiny_spec(), 5, ShakeDropConfig{}, 1);
  const auto bufs = m.buffers();
  // stem + 4 per block + head, a mean and a var each
  ASSERT_EQ(bufs.size(), 2u * (1u + 2u * 4u + 1u));
  EXPECT_EQ(bufs[0].first, "stem.bn.running_mean");
  EXPECT_EQ(bufs[1].first, "stem.bn.running_var");
  EXPECT_EQ(bufs[2].first, "block01.bn1.running_mean");
  EXPECT_EQ(bufs.back().first, "head.bn.running_var");

  for (const auto& [name, t] : bufs) {
    if (name.find("running_mean") != std::string::npos) {
      for (double v : t->data) EXPECT_EQ(v, 0.0);
    } else {
      for (double v : t->data) EXPECT_EQ(v, 1.0);
    }
  }
}

TEST(ModelTest, BlockWiringFollowsSchedule) {
  PyramidSpec spec;  // defaults: 3 stages, 2 blocks each
  DModel m(spec, 10, ShakeDropConfig{}, 1);
  const auto& blocks = m.blocks();
  ASSERT_EQ(blocks.size(), 6u);

  int cin = 8;  // stem channels at widen 1
  for (int k = 1; k <= 6; ++k) {
    const auto& blk = blocks[static_cast<std::size_t>(k - 1)];
    EXPECT_EQ(blk.index, k);
    EXPECT_EQ(blk.in_channels, cin);
    EXPECT_EQ(blk.out_channels, channel_schedule(spec, k));
    EXPECT_EQ(blk.width, flatland::round_half_up(blk.out_channels / 4.0));
    cin = blk.out_channels;

    // stage entries other than the first downsample
    const bool entry = (k - 1) % 2 == 0 && k > 2;
    EXPECT_EQ(blk.stride, entry ? 2 : 1);

    EXPECT_EQ(blk.conv1.w.value.shape, (std::vector<int>{blk.width, blk.in_channels, 1, 1}));
    EXPECT_EQ(blk.conv2.w.value.shape, (std::vector<int>{blk.width, blk.width, 3, 3}));
    EXPECT_EQ(blk.conv3.w.value.shape, (std::vector<int>{blk.out_channels, blk.width, 1, 1}));
    EXPECT_EQ(blk.conv2.stride, blk.stride);
  }
}

TEST(ModelTest, InitIsSeededAndScaled) {
  PyramidSpec spec;
  DModel a(spec, 10, ShakeDropConfig{}, 7);
  DModel b(spec, 10, ShakeDropConfig{}, 7);
  DModel c(spec, 10, ShakeDropConfig{}, 8);

  auto pa = a.parameters();
  auto pb = b.parameters();
  auto pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->value.data, pb[i]->value.data) << pa[i]->id;
  }
  EXPECT_NE(pa[0]->value.data, pc[0]->value.data);

  // every conv kernel is zero-mean with std sqrt(2 / (kh * kw * c_out));
  // pooling the draws normalized by their expected std gives a unit normal
  // sample large enough for tight bounds
  double mean = 0.0;
  double sq = 0.0;
  double count = 0.0;
  for (auto* p : pa) {
    if (p->id.find("conv") == std::string::npos || p->value.shape.size() != 4) continue;
    const double expect =
        std::sqrt(2.0 / (p->value.dim(2) * p->value.dim(3) * p->value.dim(0)));
    double ksq = 0.0;
    for (double v : p->value.data) {
      const double z = v / expect;
      mean += z;
      sq += z * z;
      ksq += z * z;
      count += 1.0;
    }
    // loose per-kernel scale check, sized for the smallest kernels
    const double n = static_cast<double>(p->value.data.size());
    EXPECT_NEAR(std::sqrt(ksq / n), 1.0, 4.0 / std::sqrt(2.0 * n) + 0.02) << p->id;
  }
  mean /= count;
  const double var = sq / count - mean * mean;
  EXPECT_NEAR(mean, 0.0, 4.0 / std::sqrt(count));
  EXPECT_NEAR(var, 1.0, 4.0 * std::sqrt(2.0 / count));

  // classifier: gaussian weights, zero bias
  EXPECT_EQ(pa.back()->id, "head.fc.b");
  for (double v : pa.back()->value.data) EXPECT_EQ(v, 0.0);
}

TEST(ModelTest, ForwardShapesAtEveryResolutionFactor) {
  DModel m(tiny_spec(), 5, ShakeDropConfig{}, 3);
  m.set_train(false);
  for (const int res : {8, 16, 32}) {
    const DTensor logits = m.predict_logits(random_images(2, res, 99));
    EXPECT_EQ(logits.shape, (std::vector<int>{2, 5})) << "res " << res;
    for (double v : logits.data) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(ModelTest, ForwardInputValidation) {
  DModel m(tiny_spec(), 5, ShakeDropConfig{}, 3);
  m.set_train(false);
  EXPECT_THROW(m.predict_logits(DTensor({2, 3, 8})), std::invalid_argument);
  EXPECT_THROW(m.predict_logits(random_images(1, 12, 1)), std::invalid_argument);
  EXPECT_THROW(m.predict_logits(random_images(1, 24, 1)), std::invalid_argument);
  EXPECT_THROW(m.predict_logits(random_images(1, 64, 1)), std::invalid_argument);
  EXPECT_THROW(m.predict_logits(DTensor({2, 1, 8, 8})), std::invalid_argument);
  EXPECT_THROW(m.predict_logits(DTensor({2, 3, 8, 16})), std::invalid_argument);
}

TEST(ModelTest, EvalForwardIsDeterministic) {
  DModel m(tiny_spec(), 5, ShakeDropConfig{}, 3);
  m.set_train(false);
  const DTensor x = random_images(3, 8, 5);
  const DTensor a = m.predict_logits(x);
  const DTensor b = m.predict_logits(x);
  EXPECT_EQ(a.data, b.data);

  DTape t;
  const int out = m.forward(t, t.constant(x));
  EXPECT_EQ(t.value(out).data, a.data);
}

TEST(ModelTest, TrainForwardReproducibleUnderStepContext) {
  const DTensor x = random_images(3, 8, 5);
  const DModel::StepContext ctx{11, 4};

  const auto run = [&](const DModel::StepContext& c) {
    DModel m(tiny_spec(), 5, ShakeDropConfig{}, 3);
    DTape t;
    const int out = m.forward(t, t.constant(x), c);
    return t.value(out).data;
  };

  EXPECT_EQ(run(ctx), run(ctx));
  EXPECT_NE(run(ctx), run({11, 5}));
  EXPECT_NE(run(ctx), run({12, 4}));
}

TEST(ModelTest, TrainForwardUpdatesRunningStats) {
  DModel m(tiny_spec(), 5, ShakeDropConfig{}, 3);
  DTape t;
  const int out = m.forward(t, t.constant(random_images(4, 8, 5)), {1, 0});
  (void)out;
  bool moved = false;
  for (const auto& [name, buf] : m.buffers()) {
    if (name.find("running_mean") == std::string::npos) continue;
    for (double v : buf->data) moved = moved || v != 0.0;
  }
  EXPECT_TRUE(moved);
}

TEST(ModelTest, FloatInstantiationProducesFiniteLogits) {
  flatland::WidePyramidNet m(PyramidSpec{}, 10, ShakeDropConfig{}, 17);
  m.set_train(false);
  TensorT<float> x({1, 3, 16, 16});
  RngStream rng(2);
  for (auto& v : x.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
  const TensorT<float> logits = m.predict_logits(x);
  EXPECT_EQ(logits.shape, (std::vector<int>{1, 10}));
  for (float v : logits.data) EXPECT_TRUE(std::isfinite(v));
}

}  // namespace
