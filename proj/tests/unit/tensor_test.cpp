#include "flatland/tensor.hpp"

#include <gtest/gtest.h>

#include <stdexcept>
#include <vector>

using flatland::shape_numel;
using flatland::shape_str;
using flatland::Tensor;
using flatland::TensorT;

TEST(ShapeHelpers, StrAndNumel) {
  EXPECT_EQ(shape_str({2, 3, 4}), "[2, 3, 4]");
  EXPECT_EQ(shape_str({7}), "[7]");
  EXPECT_EQ(shape_numel({2, 3, 4}), 24);
  EXPECT_EQ(shape_numel({1}), 1);
  EXPECT_THROW(shape_numel({}), std::invalid_argument);
  EXPECT_THROW(shape_numel({2, 0}), std::invalid_argument);
  EXPECT_THROW(shape_numel({-1, 3}), std::invalid_argument);
}

TEST(TensorTest, FillConstructor) {
  Tensor t({2, 3}, 1.5f);
  EXPECT_EQ(t.ndim(), 2);
  EXPECT_EQ(t.numel(), 6);
  EXPECT_EQ(t.dim(0), 2);
  EXPECT_EQ(t.dim(1), 3);
  for (std::int64_t i = 0; i < t.numel(); ++i) EXPECT_EQ(t[i], 1.5f);
  EXPECT_THROW(t.dim(2), std::out_of_range);
  EXPECT_THROW(t.dim(-1), std::out_of_range);
}

TEST(TensorTest, FromValidatesLength) {
  Tensor t = Tensor::from({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
  EXPECT_EQ(t.numel(), 4);
  EXPECT_EQ(t[3], 4.0f);
  EXPECT_THROW(Tensor::from({2, 2}, {1.0f, 2.0f}), std::invalid_argument);
  EXPECT_THROW(Tensor::from({2}, {1.0f, 2.0f, 3.0f}), std::invalid_argument);
}

// at4 must match the flat row-major NCHW index, checked against a manual
// stride computation over every element.
TEST(TensorTest, At4MatchesFlatIndex) {
  const int N = 2, C = 3, H = 4, W = 5;
  Tensor t({N, C, H, W});
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(i);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int h = 0; h < H; ++h) {
        for (int w = 0; w < W; ++w) {
          const std::int64_t flat = ((static_cast<std::int64_t>(n) * C + c) * H + h) * W + w;
          ASSERT_EQ(t.at4(n, c, h, w), static_cast<float>(flat));
        }
      }
    }
  }
  t.at4(1, 2, 3, 4) = -7.0f;
  EXPECT_EQ(t[t.numel() - 1], -7.0f);
}

TEST(TensorTest, At2MatchesFlatIndex) {
  Tensor t({3, 4});
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(i);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) {
      ASSERT_EQ(t.at2(r, c), static_cast<float>(r * 4 + c));
    }
  }
}

TEST(TensorTest, SameShape) {
  Tensor a({2, 3});
  Tensor b({2, 3});
  Tensor c({3, 2});
  EXPECT_TRUE(a.same_shape(b));
  EXPECT_FALSE(a.same_shape(c));
}

TEST(TensorTest, CastConvertsElementwise) {
  TensorT<double> d = Tensor::from({3}, {0.5f, -1.25f, 2.0f}).cast<double>();
  EXPECT_EQ(d.shape, (std::vector<int>{3}));
  EXPECT_EQ(d.data[0], 0.5);
  EXPECT_EQ(d.data[1], -1.25);
  EXPECT_EQ(d.data[2], 2.0);

  Tensor back = d.cast<float>();
  EXPECT_EQ(back.data[1], -1.25f);
}

TEST(TensorTest, RequireHelpers) {
  Tensor t({2, 3});
  EXPECT_NO_THROW(flatland::require_shape(t, {2, 3}, "x"));
  EXPECT_NO_THROW(flatland::require_ndim(t, 2, "x"));
  try {
    flatland::require_shape(t, {3, 2}, "input");
    FAIL() << "expected throw";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("input"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[3, 2]"), std::string::npos);
  }
  EXPECT_THROW(flatland::require_ndim(t, 4, "x"), std::invalid_argument);
}
