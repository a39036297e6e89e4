#include "flatland/rng.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

using flatland::mix64;
using flatland::RngStream;

// Reference values computed with an independent reimplementation of the
// splitmix64 finalizer (Python, 64-bit modular arithmetic).
TEST(Mix64, KnownValues) {
  EXPECT_EQ(mix64(0ull), 0x0ull);
  EXPECT_EQ(mix64(1ull), 0x5692161d100b05e5ull);
  EXPECT_EQ(mix64(0x9e3779b97f4a7c15ull), 0xe220a8397b1dcdafull);
  EXPECT_EQ(mix64(0xdeadbeefull), 0x4e062702ec929eeaull);
}

TEST(Mix64, IsInjectiveOnSample) {
  std::vector<std::uint64_t> outs;
  for (std::uint64_t x = 0; x < 4096; ++x) outs.push_back(mix64(x));
  std::sort(outs.begin(), outs.end());
  EXPECT_EQ(std::adjacent_find(outs.begin(), outs.end()), outs.end());
}

TEST(RngStreamTest, DrawsMatchReference) {
  RngStream s(42);
  EXPECT_EQ(s.next_u64(), 0xb37e3d2ef53314ceull);
  EXPECT_EQ(s.next_u64(), 0xa71ab2e324760508ull);
  EXPECT_EQ(s.next_u64(), 0xd89aeace9a256850ull);
  EXPECT_EQ(s.next_u64(), 0xa8567e432884a784ull);

  RngStream keyed(42, 7);
  EXPECT_EQ(keyed.next_u64(), 0x556b1f7ccd0b88e1ull);
  EXPECT_EQ(keyed.next_u64(), 0x1ceafe52eabb1e9aull);
}

TEST(RngStreamTest, SameKeyReproducesSequence) {
  RngStream a(123, 4, 5, 6, 7);
  RngStream b(123, 4, 5, 6, 7);
  for (int i = 0; i < 32; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(RngStreamTest, EveryKeyComponentMatters) {
  const std::uint64_t base = RngStream(9, 1, 2, 3, 4).next_u64();
  EXPECT_NE(RngStream(10, 1, 2, 3, 4).next_u64(), base);
  EXPECT_NE(RngStream(9, 2, 2, 3, 4).next_u64(), base);
  EXPECT_NE(RngStream(9, 1, 3, 3, 4).next_u64(), base);
  EXPECT_NE(RngStream(9, 1, 2, 4, 4).next_u64(), base);
  EXPECT_NE(RngStream(9, 1, 2, 3, 5).next_u64(), base);
}

TEST(RngStreamTest, ChildMatchesReferenceAndIgnoresParentPosition) {
  RngStream parent(42);
  EXPECT_EQ(parent.child(3, 4).next_u64(), 0xe61c2761866937e6ull);

  // Advancing the parent must not shift the child's stream.
  parent.next_u64();
  parent.next_u64();
  parent.next_u64();
  EXPECT_EQ(parent.child(3, 4).next_u64(), 0xe61c2761866937e6ull);
}

TEST(RngStreamTest, ChildDiffersFromParentAndSiblings) {
  RngStream parent(42);
  RngStream c0 = parent.child(0);
  RngStream c1 = parent.child(1);
  EXPECT_NE(c0.next_u64(), c1.next_u64());
  EXPECT_NE(parent.child(0).next_u64(), RngStream(42).next_u64());
}

TEST(RngStreamTest, UniformStaysInUnitInterval) {
  RngStream s(7);
  double mn = 1.0;
  double mx = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double u = s.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    mn = std::min(mn, u);
    mx = std::max(mx, u);
  }
  EXPECT_LT(mn, 0.01);
  EXPECT_GT(mx, 0.99);

  RngStream s42(42);
  EXPECT_DOUBLE_EQ(s42.uniform(), 0.7011450042384235);
}

TEST(RngStreamTest, UniformRangeRespectsBounds) {
  RngStream s(11);
  for (int i = 0; i < 1000; ++i) {
    const double u = s.uniform(-2.5, 3.5);
    ASSERT_GE(u, -2.5);
    ASSERT_LT(u, 3.5);
  }
}

TEST(RngStreamTest, UniformIntCoversInclusiveRange) {
  RngStream s(5);
  std::vector<int> seen(6, 0);
  for (int i = 0; i < 3000; ++i) {
    const std::int64_t v = s.uniform_int(-2, 3);
    ASSERT_GE(v, -2);
    ASSERT_LE(v, 3);
    ++seen[static_cast<std::size_t>(v + 2)];
  }
  for (int count : seen) EXPECT_GT(count, 0);
  EXPECT_EQ(s.uniform_int(4, 4), 4);
  EXPECT_THROW(s.uniform_int(2, 1), std::invalid_argument);
}

TEST(RngStreamTest, BernoulliDegenerateProbabilities) {
  RngStream s(3);
  for (int i = 0; i < 200; ++i) EXPECT_FALSE(s.bernoulli(0.0));
  for (int i = 0; i < 200; ++i) EXPECT_TRUE(s.bernoulli(1.0));
}

TEST(RngStreamTest, BernoulliTracksProbability) {
  RngStream s(17);
  int hits = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) hits += s.bernoulli(0.3) ? 1 : 0;
  // SE is sqrt(.3*.7/20000) ~ 0.0032; a 0.02 band is over six sigma.
  EXPECT_NEAR(static_cast<double>(hits) / n, 0.3, 0.02);
}

TEST(RngStreamTest, NormalMoments) {
  RngStream s(29);
  const int n = 40000;
  double sum = 0.0;
  double sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = s.normal();
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  EXPECT_NEAR(mean, 0.0, 0.05);
  EXPECT_NEAR(var, 1.0, 0.1);
}

TEST(RngStreamTest, GammaMomentsBothBranches) {
  RngStream s(31);
  const int n = 20000;
  double sum_big = 0.0;
  for (int i = 0; i < n; ++i) sum_big += s.gamma(2.5);
  EXPECT_NEAR(sum_big / n, 2.5, 0.15);

  // shape < 1 goes through the boost recursion.
  double sum_small = 0.0;
  for (int i = 0; i < n; ++i) {
    const double g = s.gamma(0.5);
    ASSERT_GT(g, 0.0);
    sum_small += g;
  }
  EXPECT_NEAR(sum_small / n, 0.5, 0.1);

  EXPECT_THROW(s.gamma(0.0), std::invalid_argument);
  EXPECT_THROW(s.gamma(-1.0), std::invalid_argument);
}

TEST(RngStreamTest, BetaSymmetricCaseMatchesUniformMoments) {
  RngStream s(37);
  const int n = 20000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double b = s.beta(1.0, 1.0);
    ASSERT_GE(b, 0.0);
    ASSERT_LE(b, 1.0);
    sum += b;
  }
  EXPECT_NEAR(sum / n, 0.5, 0.02);
}

TEST(RngStreamTest, ShuffleIsDeterministicPermutation) {
  std::vector<int> v(100);
  std::iota(v.begin(), v.end(), 0);
  std::vector<int> w = v;

  RngStream a(55, 1);
  RngStream b(55, 1);
  a.shuffle(v);
  b.shuffle(w);
  EXPECT_EQ(v, w);

  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  std::vector<int> expect(100);
  std::iota(expect.begin(), expect.end(), 0);
  EXPECT_EQ(sorted, expect);

  std::vector<int> other(100);
  std::iota(other.begin(), other.end(), 0);
  RngStream c(56, 1);
  c.shuffle(other);
  EXPECT_NE(other, v);
}
