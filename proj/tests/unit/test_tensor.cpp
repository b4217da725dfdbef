#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>

#include "dynenc/gradcheck.hpp"
#include "dynenc/tensor.hpp"
#include "test_util.hpp"

using namespace dynenc;
using dynenc::testing::rand_tensor;

TEST(Tensor, ReluClipsNegatives) {
  auto y = relu(Tensor::vector({-1, 0, 2}));
  EXPECT_EQ(y.values(), (std::vector<double>{0, 0, 2}));
}

TEST(Tensor, MatmulByIdentity) {
  auto y = matmul(Tensor::identity(2), Tensor::matrix({{3}, {4}}));
  EXPECT_EQ(y.shape(), (Shape{2, 1}));
  EXPECT_EQ(y.values(), (std::vector<double>{3, 4}));
}

TEST(Tensor, CosineOfOrthogonalVectorsIsZero) {
  EXPECT_DOUBLE_EQ(cosine_sim(Tensor::vector({1, 0}), Tensor::vector({0, 1})).item(), 0.0);
}

TEST(Tensor, FactoryRejectsSizeMismatch) {
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
}

TEST(Tensor, ShapeErrorNamesOpAndShapes) {
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Tensor, BroadcastsBiasRow) {
  auto y = add(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::vector({10, 20}));
  EXPECT_EQ(y.values(), (std::vector<double>{11, 22, 13, 24}));
}

TEST(Tensor, LnAndDivClampDegenerateArguments) {
  EXPECT_DOUBLE_EQ(ln(Tensor::vector({0.0})).item(), std::log(kClampMin));
  auto q = div(Tensor::vector({1.0, 1.0}), Tensor::vector({0.0, -1e-20}));
  EXPECT_TRUE(std::isfinite(q.at(0)));
  EXPECT_GT(q.at(0), 0);
  EXPECT_LT(q.at(1), 0);  // sign of the denominator is kept
  auto c = cosine_sim(Tensor::vector({0, 0}), Tensor::vector({1, 0}));
  EXPECT_TRUE(std::isfinite(c.item()));
}

TEST(Tensor, OpsProduceFreshBuffers) {
  auto a = Tensor::vector({1, 2, 3, 4});
  auto r = reshape(a, {2, 2});
  r.mutable_data()[0] = 99;
  EXPECT_EQ(a.at(0), 1);
  auto s = slice(reshape(a, {4, 1}), 0, 2);
  s.mutable_data()[0] = 42;
  EXPECT_EQ(a.at(0), 1);
}

TEST(Backward, SquareAtThree) {
  TapeScope scope;
  auto x = Tensor::scalar(3.0, true);
  backward(sum(square(x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, MatmulSumMatchesFiniteDifferences) {
  auto A = rand_tensor({3, 3}, 1), B = rand_tensor({3, 3}, 2);
  double err = finite_diff_check([&] { return sum(matmul(A, B)); }, {A, B}, 1e-5);
  EXPECT_LT(err, 1e-6);
  // d sum(AB) / dA_ij = sum_k B_jk
  TapeScope scope;
  backward(sum(matmul(A, B)));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      EXPECT_NEAR(A.grad()[i * 3 + j], B.at(j, 0) + B.at(j, 1) + B.at(j, 2), 1e-12);
}

TEST(Backward, IndependentLeafGetsNoGradient) {
  TapeScope scope;
  auto x = Tensor::vector({1, 2}, true);
  auto y = Tensor::vector({3, 4}, true);
  backward(sum(square(y)));
  EXPECT_FALSE(x.has_grad());
  EXPECT_TRUE(y.has_grad());
}

TEST(Backward, RejectsNonScalarRoot) {
  TapeScope scope;
  auto x = Tensor::vector({1, 2}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), TapeError);
}

TEST(Backward, RejectsRootNotOnTape) {
  TapeScope scope;
  EXPECT_THROW(backward(Tensor::scalar(1.0)), TapeError);
  auto x = Tensor::vector({1, 2}, true);
  auto r = sum(x);
  active_tape().clear();
  EXPECT_THROW(backward(r), TapeError);
}

TEST(Backward, RepeatedCallsAccumulate) {
  TapeScope scope;
  auto x = Tensor::vector({1, -2}, true);
  auto r = sum(square(x));
  backward(r);
  backward(r);
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -8.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Backward, LinearInRoots) {
  auto x = rand_tensor({4}, 7);
  auto f1 = [&] { return sum(tanh(x)); };
  auto f2 = [&] { return sum(mul(x, x)); };
  std::vector<double> g1, g2, g12;
  {
    TapeScope s;
    backward(f1());
    g1.assign(x.grad().begin(), x.grad().end());
    x.zero_grad();
  }
  {
    TapeScope s;
    backward(f2());
    g2.assign(x.grad().begin(), x.grad().end());
    x.zero_grad();
  }
  {
    TapeScope s;
    backward(add(f1(), f2()));
    g12.assign(x.grad().begin(), x.grad().end());
    x.zero_grad();
  }
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g12[i], g1[i] + g2[i], 1e-14);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  TapeScope scope;
  auto x = Tensor::vector({1, 2}, true);
  std::size_t before = active_tape().size();
  {
    NoGradGuard ng;
    auto y = sum(square(x));
    EXPECT_EQ(active_tape().size(), before);
  }
  auto y = sum(square(x));
  EXPECT_GT(active_tape().size(), before);
}

TEST(Backward, ReluSubgradientAtKinkIsZero) {
  TapeScope scope;
  auto x = Tensor::vector({0.0, 1.0, -1.0}, true);
  backward(sum(relu(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_EQ(x.grad()[2], 0.0);
}

TEST(Tensor, ForwardIsDeterministic) {
  auto run = [] {
    auto W = rand_tensor({6, 6}, 11), x = rand_tensor({4, 6}, 12);
    return softmax(matmul(layer_norm(x), W)).values();
  };
  EXPECT_EQ(run(), run());
}

TEST(FiniteDiff, TanhOfLinearMap) {
  auto W = rand_tensor({4, 4}, 3), x = rand_tensor({4, 1}, 4);
  EXPECT_LT(finite_diff_check([&] { return sum(tanh(matmul(W, x))); }, {W, x}), 1e-5);
}

TEST(FiniteDiff, StationaryPoint) {
  auto x = Tensor::zeros({3}, true);
  EXPECT_LT(finite_diff_check([&] { return sum(square(x)); }, {x}), 1e-9);
}

TEST(FiniteDiff, RejectsNonFiniteOutputAndBadStep) {
  auto x = Tensor::vector({1.0}, true);
  EXPECT_THROW(finite_diff_check([&] { return scale(sum(x), std::nan("")); }, {x}),
               std::runtime_error);
  EXPECT_THROW(finite_diff_check([&] { return sum(x); }, {x}, 0.0), std::invalid_argument);
}

// Every differentiable op against central differences. Each case wraps the
// op output in a random linear functional so no gradient is trivially flat.
namespace {

struct Input {
  Shape shape;
  double lo = -1.0, hi = 1.0;
};

struct OpCase {
  const char* name;
  std::vector<Input> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> op;
};

std::vector<OpCase> op_cases() {
  using V = const std::vector<Tensor>&;
  return {
      {"add", {{{3, 4}}, {{4}}}, [](V p) { return add(p[0], p[1]); }},
      {"sub", {{{3, 4}}, {{3, 4}}}, [](V p) { return sub(p[0], p[1]); }},
      {"mul", {{{2, 5}}, {{2, 5}}}, [](V p) { return mul(p[0], p[1]); }},
      {"div", {{{2, 3}}, {{2, 3}, 0.5, 2.0}}, [](V p) { return div(p[0], p[1]); }},
      {"scale", {{{4}}}, [](V p) { return scale(p[0], -2.5); }},
      {"add_scalar", {{{4}}}, [](V p) { return add_scalar(p[0], 0.3); }},
      {"relu", {{{6}}}, [](V p) { return relu(p[0]); }},
      {"tanh", {{{6}}}, [](V p) { return tanh(p[0]); }},
      {"exp", {{{6}}}, [](V p) { return exp(p[0]); }},
      {"ln", {{{6}, 0.2, 3.0}}, [](V p) { return ln(p[0]); }},
      {"abs", {{{6}}}, [](V p) { return abs(p[0]); }},
      {"square", {{{6}}}, [](V p) { return square(p[0]); }},
      {"sum", {{{3, 2}}}, [](V p) { return sum(p[0]); }},
      {"mean", {{{3, 2}}}, [](V p) { return mean(p[0]); }},
      {"sum_last", {{{3, 4}}}, [](V p) { return sum_last(p[0]); }},
      {"norm2", {{{5}}}, [](V p) { return norm2(p[0]); }},
      {"row_norm2", {{{3, 4}}}, [](V p) { return row_norm2(p[0]); }},
      {"cosine_sim", {{{3, 4}}, {{3, 4}}}, [](V p) { return cosine_sim(p[0], p[1]); }},
      {"matmul", {{{3, 4}}, {{4, 2}}}, [](V p) { return matmul(p[0], p[1]); }},
      {"transpose", {{{3, 4}}}, [](V p) { return transpose(p[0]); }},
      {"reshape", {{{3, 4}}}, [](V p) { return reshape(p[0], {2, 6}); }},
      {"concat", {{{2, 3}}, {{1, 3}}}, [](V p) { return concat({p[0], p[1]}); }},
      {"slice", {{{5, 2}}}, [](V p) { return slice(p[0], 1, 4); }},
      {"gather_rows", {{{4, 3}}}, [](V p) { return gather_rows(p[0], {3, 0, 3, 1}); }},
      {"softmax", {{{3, 5}}}, [](V p) { return softmax(p[0]); }},
      {"layer_norm", {{{3, 6}}}, [](V p) { return layer_norm(p[0]); }},
      {"depthwise_conv1d", {{{8, 3}}, {{3, 3}}}, [](V p) { return depthwise_conv1d(p[0], p[1], 4); }},
      {"attention", {{{6, 4}}, {{6, 4}}, {{6, 4}}},
       [](V p) { return attention(p[0], p[1], p[2], 3, 2); }},
      {"linear_combination", {{{2, 2}}, {{2, 2}}, {{2, 2}}},
       [](V p) { return linear_combination({p[0], p[1], p[2]}, {0.5, -1.0, 2.0}); }},
      {"weighted_sum", {{{4}}}, [](V p) { return weighted_sum(p[0], {1, -2, 0.5, 3}); }},
  };
}

}  // namespace

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesCentralDifferencesOver100Seeds) {
  const auto c = op_cases().at(GetParam());
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::vector<Tensor> p;
    for (std::size_t k = 0; k < c.inputs.size(); ++k)
      p.push_back(rand_tensor(c.inputs[k].shape, seed * 31 + k, c.inputs[k].lo, c.inputs[k].hi));
    Tensor probe;
    {
      NoGradGuard ng;
      probe = c.op(p);
    }
    Tensor w = rand_tensor(probe.shape(), seed + 5000, -1, 1, false);
    worst = std::max(worst, finite_diff_check([&] { return sum(mul(c.op(p), w)); }, p));
  }
  EXPECT_LT(worst, 1e-4) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, 30),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           return std::string(op_cases().at(info.param).name);
                         });
