#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "flatland/model.hpp"
#include "flatland/rng.hpp"
#include "flatland/tensor.hpp"

namespace {

using flatland::fold_batchnorm;
using flatland::PyramidSpec;
using flatland::RngStream;
using flatland::ShakeDropConfig;
using flatland::TensorT;
using flatland::WidePyramidNetT;

using DModel = WidePyramidNetT<double>;
using DTensor = TensorT<double>;

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

/// Push the normalization state away from its identity init so folding has
/// something nontrivial to absorb.
void scribble_stats(DModel& m, std::uint64_t seed) {
  RngStream rng(seed);
  for (auto& [name, buf] : m.buffers()) {
    const bool is_var = name.find("running_var") != std::string::npos;
    for (auto& v : buf->data) v = is_var ? rng.uniform(0.5, 2.0) : rng.uniform(-0.5, 0.5);
  }
  for (auto* p : m.parameters()) {
    if (p->id.find("gamma") != std::string::npos) {
      for (auto& v : p->value.data) v = rng.uniform(0.7, 1.3);
    } else if (p->id.find(".beta") != std::string::npos) {
      for (auto& v : p->value.data) v = rng.uniform(-0.3, 0.3);
    }
  }
}

TEST(FoldBatchNormTest, RejectsTrainingMode) {
  DModel m(tiny_spec(), 5, ShakeDropConfig{}, 1);
  EXPECT_THROW(fold_batchnorm(m), std::runtime_error);
  m.set_train(false);
  EXPECT_NO_THROW(fold_batchnorm(m));
}

TEST(FoldBatchNormTest, FoldedModelDropsNormalizationState) {
  DModel m(tiny_spec(), 5, ShakeDropConfig{}, 1);
  m.set_train(false);
  DModel f = fold_batchnorm(m);

  EXPECT_TRUE(f.is_folded());
  EXPECT_FALSE(f.is_training());
  EXPECT_TRUE(f.buffers().empty());

  // what is left: biased convs and the classifier
  const auto params = f.parameters();
  ASSERT_EQ(params.size(), 2u + 2u * 6u + 2u);
  EXPECT_EQ(params[0]->id, "stem.conv.w");
  EXPECT_EQ(params[1]->id, "stem.conv.b");
  EXPECT_EQ(params[2]->id, "block01.conv1.w");
  EXPECT_EQ(params[3]->id, "block01.conv1.b");
  EXPECT_EQ(params[params.size() - 2]->id, "head.fc.w");
  for (const auto* p : params) {
    EXPECT_EQ(p->id.find("bn"), std::string::npos) << p->id;
  }

  EXPECT_THROW(f.set_train(true), std::runtime_error);
}

TEST(FoldBatchNormTest, SourceModelIsUntouched) {
  DModel m(tiny_spec(), 5, ShakeDropConfig{}, 1);
  scribble_stats(m, 4);
  m.set_train(false);
  const std::vector<double> stem_before = m.parameters()[0]->value.data;

  DModel f = fold_batchnorm(m);
  (void)f;
  EXPECT_FALSE(m.is_folded());
  EXPECT_EQ(m.parameters()[0]->value.data, stem_before);
  EXPECT_EQ(m.buffers().size(), 20u);
}

TEST(FoldBatchNormTest, MatchesUnfoldedAtInit) {
  DModel m(tiny_spec(), 5, ShakeDropConfig{}, 2);
  m.set_train(false);
  DModel f = fold_batchnorm(m);

  const DTensor x = random_images(4, 8, 21);
  const DTensor a = m.predict_logits(x);
  const DTensor b = f.predict_logits(x);
  ASSERT_EQ(a.shape, b.shape);
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    EXPECT_NEAR(a.data[i], b.data[i], 1e-9);
  }
}

TEST(FoldBatchNormTest, MatchesUnfoldedWithSettledStats) {
  DModel m(tiny_spec(), 5, ShakeDropConfig{}, 2);
  scribble_stats(m, 77);
  m.set_train(false);
  DModel f = fold_batchnorm(m);

  for (const std::uint64_t seed : {31u, 32u, 33u}) {
    const DTensor x = random_images(4, 8, seed);
    const DTensor a = m.predict_logits(x);
    const DTensor b = f.predict_logits(x);
    for (std::size_t i = 0; i < a.data.size(); ++i) {
      EXPECT_NEAR(a.data[i], b.data[i], 1e-9);
    }
  }
}

TEST(FoldBatchNormTest, MatchesUnfoldedAcrossResolutions) {
  DModel m(tiny_spec(), 5, ShakeDropConfig{}, 2);
  scribble_stats(m, 13);
  m.set_train(false);
  DModel f = fold_batchnorm(m);

  for (const int res : {8, 16, 32}) {
    const DTensor x = random_images(2, res, 50 + static_cast<std::uint64_t>(res));
    const DTensor a = m.predict_logits(x);
    const DTensor b = f.predict_logits(x);
    for (std::size_t i = 0; i < a.data.size(); ++i) {
      EXPECT_NEAR(a.data[i], b.data[i], 1e-9) << "res " << res;
    }
  }
}

TEST(FoldBatchNormTest, FoldingTwiceIsIdentity) {
  DModel m(tiny_spec(), 5, ShakeDropConfig{}, 2);
  scribble_stats(m, 8);
  m.set_train(false);
  DModel f1 = fold_batchnorm(m);
  DModel f2 = fold_batchnorm(f1);

  EXPECT_TRUE(f2.is_folded());
  const auto p1 = f1.parameters();
  const auto p2 = f2.parameters();
  ASSERT_EQ(p1.size(), p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i) {
    EXPECT_EQ(p1[i]->value.data, p2[i]->value.data) << p1[i]->id;
  }
}

TEST(FoldBatchNormTest, FloatModelStaysClose) {
  WidePyramidNetT<float> m(tiny_spec(), 5, ShakeDropConfig{}, 6);
  m.set_train(false);
  WidePyramidNetT<float> f = fold_batchnorm(m);

  TensorT<float> x({4, 3, 8, 8});
  RngStream rng(3);
  for (auto& v : x.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
  const TensorT<float> a = m.predict_logits(x);
  const TensorT<float> b = f.predict_logits(x);
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    EXPECT_NEAR(a.data[i], b.data[i], 1e-4);
  }
}

}  // namespace
