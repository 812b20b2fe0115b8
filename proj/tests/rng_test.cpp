#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "hedonic/rng.hpp"

namespace hedonic {
namespace {

// Published SplitMix64 reference outputs (state 0 and state 1234567).
TEST(RngTest, MatchesSplitMix64ReferenceValues) {
  Rng zero(0);
  EXPECT_EQ(zero.next_u64(), 0xE220A8397B1DCDAFULL);
  Rng r(1234567);
  EXPECT_EQ(r.next_u64(), 6457827717110365317ULL);
  EXPECT_EQ(r.next_u64(), 3203168211198807973ULL);
  EXPECT_EQ(r.next_u64(), 9817491932198370423ULL);
  EXPECT_EQ(r.next_u64(), 4593380528125082431ULL);
  EXPECT_EQ(r.next_u64(), 16408922859458223821ULL);
}

TEST(RngTest, EqualSeedsGiveEqualStreams) {
  Rng a(42), b(42);
  for (int i = 0; i < 10000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
  Rng c(43);
  Rng d(42);
  int same = 0;
  for (int i = 0; i < 1000; ++i) same += c.next_u64() == d.next_u64();
  EXPECT_EQ(same, 0);
}

TEST(RngTest, UniformStaysInRangeWithSensibleMoments) {
  Rng rng(7);
  double sum = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
  }
  EXPECT_NEAR(sum / n, 0.5, 0.01);
}

TEST(RngTest, UniformIndexCoversRangeEvenly) {
  Rng rng(8);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) ++counts[rng.uniform_index(7)];
  for (int c : counts) EXPECT_NEAR(c, 10000, 500);
  EXPECT_THROW(rng.uniform_index(0), std::invalid_argument);
}

TEST(RngTest, NormalMoments) {
  Rng rng(9);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(RngTest, TruncatedNormalIsBounded) {
  Rng rng(10);
  for (int i = 0; i < 20000; ++i) {
    const double z = rng.truncated_normal(0.5);
    ASSERT_LE(std::abs(z), 1.0);
  }
}

TEST(RngTest, ShuffleIsAPermutationAndDeterministic) {
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto a = v, b = v;
  Rng r1(11), r2(11);
  r1.shuffle(a);
  r2.shuffle(b);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, v);
  std::sort(a.begin(), a.end());
  EXPECT_EQ(a, v);
}

TEST(RngTest, DeriveDoesNotAdvanceAndSeparatesStreams) {
  Rng rng(12);
  rng.next_u64();
  const auto counter = rng.counter();
  Rng c0 = rng.derive(0), c1 = rng.derive(1), c0again = rng.derive(0);
  EXPECT_EQ(rng.counter(), counter);
  EXPECT_EQ(c0.next_u64(), c0again.next_u64());
  EXPECT_NE(c0.seed(), c1.seed());
}

}  // namespace
}  // namespace hedonic
