// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <set>

#include "ss3d/core.hpp"

using namespace ss3d;

TEST(Seeding, SplitmixMatchesReferenceStream) {
  // First output of the reference splitmix64 generator seeded with 0.
  EXPECT_EQ(splitmix64(0), 0xE220A8397B1DCDAFull);
}

TEST(Seeding, FnvMatchesReferenceValues) {
  EXPECT_EQ(hash_string(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(hash_string("a"), 0xaf63dc4c8601ec8cull);
}

TEST(Seeding, MixSeedSeparatesTags) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 20; ++a) {
    for (std::uint64_t b = 0; b < 20; ++b) seen.insert(mix_seed(a, b));
  }
  EXPECT_EQ(seen.size(), 400u);
  EXPECT_NE(mix_seed(1, 2), mix_seed(2, 1));
  EXPECT_EQ(mix_seed(1, 2, 3), mix_seed(mix_seed(1, 2), 3));
}

TEST(Rng, EngineIsMersenneTwister64) {
  Rng rng(5489);
  std::uint64_t v = 0;
  for (int i = 0; i < 10000; ++i) v = rng.next_u64();
  EXPECT_EQ(v, 9981545732273789042ull);
}

TEST(Rng, UniformStaysInRange) {
  Rng rng(3);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const int k = rng.uniform_int(-2, 2);
    ASSERT_GE(k, -2);
    ASSERT_LE(k, 2);
  }
}

TEST(Rng, NormalMomentsAreStandard) {
  Rng rng(11);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, PoissonMeanMatchesRate) {
  Rng rng(5);
  double s = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) s += rng.poisson(2.5);
  EXPECT_NEAR(s / n, 2.5, 0.03);
  EXPECT_EQ(rng.poisson(0.0), 0);
}

TEST(Rng, ShuffleIsPermutation) {
  Rng rng(8);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  rng.shuffle(v);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.normal(), b.normal());
}

TEST(ParallelFor, ResultsIndependentOfWorkerCount) {
  auto run = [](unsigned workers) {
    std::vector<std::uint64_t> out(997);
    parallel_for(out.size(), workers, [&](std::size_t i) {
      Rng rng(mix_seed(9, i));
      out[i] = rng.next_u64();
    });
    return out;
  };
  const auto one = run(1);
  EXPECT_EQ(run(4), one);
  EXPECT_EQ(run(16), one);
}

TEST(ParallelFor, PropagatesExceptions) {
  EXPECT_THROW(parallel_for(100, 4,
                            [](std::size_t i) {
                              if (i == 57) throw Error(ErrorCode::EmptyInput, "boom");
                            }),
               Error);
}

TEST(Classes, NamesRoundTrip) {
  for (ClassId c : kAllClasses) EXPECT_EQ(parse_class(class_name(c)), c);
  EXPECT_FALSE(parse_class("Van").has_value());
}

TEST(Errors, CarryCodeAndName) {
  const Error e(ErrorCode::ChecksumMismatch, "bad crc");
  EXPECT_EQ(e.code(), ErrorCode::ChecksumMismatch);
  EXPECT_NE(std::string(e.what()).find("ChecksumMismatch"), std::string::npos);
}
