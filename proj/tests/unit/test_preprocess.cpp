#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "dynenc/gradcheck.hpp"
#include "dynenc/preprocess.hpp"
#include "test_util.hpp"

using namespace dynenc;
using dynenc::testing::rand_tensor;

TEST(InstanceNormalize, ConstantWindowUsesEpsGuard) {
  auto [y, s] = instance_normalize({1, 1, 1}, 1);
  EXPECT_EQ(y, (std::vector<double>{0, 0, 0}));
  EXPECT_EQ(s.std[0], kNormEps);
  EXPECT_EQ(s.mean[0], 1.0);
}

TEST(InstanceNormalize, PopulationStandardization) {
  auto [y, s] = instance_normalize({1, 2, 3}, 1);
  EXPECT_NEAR(y[0], -1.2247, 1e-4);
  EXPECT_NEAR(y[1], 0.0, 1e-15);
  EXPECT_NEAR(y[2], 1.2247, 1e-4);
  EXPECT_NEAR(s.std[0], std::sqrt(2.0 / 3.0), 1e-15);
}

TEST(InstanceNormalize, PerDimensionStatistics) {
  // [T=3][V=2]: dim 0 = 1,2,3; dim 1 = 10,10,10.
  auto [y, s] = instance_normalize({1, 10, 2, 10, 3, 10}, 2);
  EXPECT_NEAR(s.mean[0], 2.0, 1e-15);
  EXPECT_NEAR(s.mean[1], 10.0, 1e-15);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_NEAR(y[4], 1.2247, 1e-4);
}

TEST(InstanceNormalize, DenormalizeInvertsWithinTolerance) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng = make_stream(seed, "test.norm");
    const std::size_t dims = 1 + seed % 3, T = 5 + seed % 20;
    std::vector<double> x(T * dims);
    const double scale = std::pow(10.0, static_cast<double>(seed % 7) - 3);
    for (auto& v : x) v = uniform(rng, -5, 5) * scale + 100 * scale;
    auto [y, s] = instance_normalize(x, dims);
    auto back = denormalize(y, s);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back[i], x[i], 1e-9 * std::max(1.0, std::abs(x[i])));
    for (std::size_t v = 0; v < dims; ++v) {
      double m = 0, q = 0;
      for (std::size_t t = 0; t < T; ++t) m += y[t * dims + v];
      for (std::size_t t = 0; t < T; ++t) q += y[t * dims + v] * y[t * dims + v];
      EXPECT_NEAR(m / static_cast<double>(T), 0.0, 1e-12);
      EXPECT_NEAR(q / static_cast<double>(T), 1.0, 1e-9);
    }
  }
}

TEST(InstanceNormalize, RejectsMalformedInput) {
  EXPECT_THROW(instance_normalize({}, 1), std::invalid_argument);
  EXPECT_THROW(instance_normalize({1, 2, 3}, 2), std::invalid_argument);
}

TEST(Patchify, PaperSettingsGiveFourteenPatches) {
  std::vector<double> x(100);
  for (std::size_t i = 0; i < 100; ++i) x[i] = static_cast<double>(i);
  auto p = patchify(x, 1, {25, 6});
  EXPECT_EQ(p.shape(), (Shape{14, 25, 1}));
  EXPECT_EQ(p.at(1, 0, 0), 6.0);
  EXPECT_EQ(p.at(12, 0, 0), 72.0);
  EXPECT_EQ(p.at(13, 0, 0), 75.0);  // right-aligned final patch
  EXPECT_EQ(p.at(13, 24, 0), 99.0);
}

TEST(Patchify, FullWindowGivesTwoIdenticalPatches) {
  std::vector<double> x{1, 2, 3, 4, 5};
  auto p = patchify(x, 1, {5, 2});
  ASSERT_EQ(p.dim(0), 2u);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(p.at(0, k, 0), p.at(1, k, 0));
}

TEST(Patchify, CountFormulaAndCoverageExhaustive) {
  for (std::size_t t_in = 1; t_in <= 60; ++t_in)
    for (std::size_t lp = 1; lp <= t_in; ++lp)
      for (std::size_t r = 1; r <= lp; ++r) {
        PatchConfig c{lp, r};
        auto off = c.offsets(t_in);
        ASSERT_EQ(off.size(), (t_in - lp) / r + 2);
        std::vector<bool> seen(t_in, false);
        for (auto o : off) {
          ASSERT_LE(o + lp, t_in);
          for (std::size_t k = 0; k < lp; ++k) seen[o + k] = true;
        }
        for (bool s : seen) ASSERT_TRUE(s) << t_in << " " << lp << " " << r;
      }
}

TEST(Patchify, MultidimensionalPatchesKeepTimeMajorLayout) {
  std::vector<double> x{0, 10, 1, 11, 2, 12, 3, 13};  // [4][2]
  auto p = patchify(x, 2, {2, 2});
  EXPECT_EQ(p.shape(), (Shape{3, 2, 2}));
  EXPECT_EQ(p.at(1, 0, 1), 12.0);
  EXPECT_EQ(p.at(2, 1, 0), 3.0);
}

TEST(Patchify, RejectsInvalidConfig) {
  std::vector<double> x(10, 0.0);
  EXPECT_THROW(patchify(x, 1, {11, 1}), std::invalid_argument);
  EXPECT_THROW(patchify(x, 1, {5, 0}), std::invalid_argument);
  EXPECT_THROW(patchify(x, 1, {5, 6}), std::invalid_argument);
}

TEST(Project, IdentityWeightFlattens) {
  auto patches = rand_tensor({3, 2, 2}, 1, -1, 1, false);
  auto y = project(patches, Tensor::identity(4), "sys");
  EXPECT_EQ(y.shape(), (Shape{3, 4}));
  EXPECT_EQ(y.values(), patches.values());
}

TEST(Project, ZeroPatchGivesZeroToken) {
  auto y = project(Tensor::zeros({2, 5, 1}), rand_tensor({8, 5}, 2), "sys");
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Project, ShapeMismatchNamesSystem) {
  try {
    project(Tensor::zeros({2, 5, 1}), Tensor::zeros({8, 4}), "gene/b=1");
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("gene/b=1"), std::string::npos);
  }
}

TEST(Project, GradientOfSquaredNormMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto patches = rand_tensor({4, 3, 2}, seed, -1, 1, false);
    auto w = rand_tensor({5, 6}, 100 + seed);
    auto f = [&] { return sum(square(project(patches, w, "s"))); };
    EXPECT_LT(finite_diff_check(f, {w}), 1e-5);
  }
}

TEST(Pipeline, AnyDimensionalityMapsToTokensOfModelWidth) {
  for (std::size_t dims : {1, 2, 5}) {
    std::vector<double> x(40 * dims);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(0.1 * static_cast<double>(i));
    auto [xn, s] = instance_normalize(x, dims);
    PatchConfig pc{8, 4};
    auto tok = project(patchify(xn, dims, pc), rand_tensor({16, 8 * dims}, dims), "s");
    EXPECT_EQ(tok.shape(), (Shape{pc.count(40), 16}));
  }
}
