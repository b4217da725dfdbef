#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "dynenc/gradcheck.hpp"
#include "dynenc/preprocess.hpp"
#include "dynenc/seqmodel.hpp"
#include "dynenc/training.hpp"
#include "test_util.hpp"

using namespace dynenc;
using dynenc::testing::rand_tensor;

namespace {

EncoderConfig small_cfg(std::size_t d = 8, std::size_t layers = 1) {
  EncoderConfig c;
  c.model_dim = d;
  c.n_layers = layers;
  c.n_heads = 2;
  c.ff_dim = 2 * d;
  return c;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

}  // namespace

TEST(EncoderConfig, ValidationAndJson) {
  EncoderConfig c;
  c.validate();
  EXPECT_EQ(EncoderConfig::from_json(c.to_json()).to_json(), c.to_json());
  c.n_heads = 5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = EncoderConfig{};
  c.conv_kernel = 4;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(parse_conv_mode("diagonal"), std::invalid_argument);
}

TEST(InitParams, DeterministicPerSeed) {
  auto a = init_params(small_cfg(), 1), b = init_params(small_cfg(), 1), c = init_params(small_cfg(), 2);
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (const auto& [name, t] : a.tensors) EXPECT_EQ(t.values(), b.get(name).values()) << name;
  EXPECT_NE(a.get("encoder.layer0.attn.wq").values(), c.get("encoder.layer0.attn.wq").values());
  EXPECT_NE(a.get("ode.w_g").values(), c.get("ode.w_g").values());
}

TEST(InitParams, FiniteAndWithinUnitBound) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto p = init_params(EncoderConfig{}, seed);
    ensure_system(p, "heat", HeadShape{1, 25, 14, 100, 50});
    for (const auto& [name, t] : p.tensors)
      for (double v : t.values()) {
        ASSERT_TRUE(std::isfinite(v)) << name;
        ASSERT_LE(std::abs(v), 1.0) << name;
      }
  }
}

TEST(InitParams, IndependentOfCreationOrder) {
  auto a = init_params(small_cfg(), 3), b = init_params(small_cfg(), 3);
  HeadShape h{1, 4, 3, 10, 5};
  ensure_system(a, "x", h);
  ensure_system(a, "y", h);
  ensure_system(b, "y", h);
  ensure_system(b, "x", h);
  EXPECT_EQ(a.get("system.x.w_r").values(), b.get("system.x.w_r").values());
  EXPECT_NE(a.get("system.x.w_r").values(), a.get("system.y.w_r").values());
}

TEST(InitParams, BackboneNamingContract) {
  EXPECT_TRUE(is_backbone_param("encoder.layer0.attn.wq"));
  EXPECT_TRUE(is_backbone_param("decoder.ln_f.g"));
  EXPECT_FALSE(is_backbone_param("encoder.conv.w"));
  EXPECT_FALSE(is_backbone_param("ode.w_g"));
  EXPECT_FALSE(is_backbone_param("system.heat.w_dp"));
}

TEST(EnsureSystem, ShapesAndMismatch) {
  auto p = init_params(small_cfg(16), 0);
  ensure_system(p, "heat", HeadShape{2, 5, 4, 20, 10});
  EXPECT_EQ(p.get("system.heat.w_dp").shape(), (Shape{16, 10}));
  EXPECT_EQ(p.get("system.heat.w_r").shape(), (Shape{40, 64}));
  EXPECT_EQ(p.get("system.heat.w_f").shape(), (Shape{20, 64}));
  ensure_system(p, "heat", HeadShape{2, 5, 4, 20, 10});
  EXPECT_THROW(ensure_system(p, "heat", HeadShape{2, 5, 4, 21, 10}), ShapeError);
  ensure_system(p, "nof", HeadShape{1, 5, 4, 20, 0});
  EXPECT_FALSE(p.has("system.nof.w_f"));
}

TEST(Encode, ZeroLayersAndIdentityConvIsIdentity) {
  for (auto mode : {ConvMode::cross_token, ConvMode::per_token}) {
    auto c = small_cfg(8, 0);
    c.conv_kernel = 1;
    c.conv_mode = mode;
    auto p = init_params(c, 0);
    p.tensors["encoder.conv.w"] =
        mode == ConvMode::cross_token ? Tensor::full({1, 8}, 1.0) : Tensor::identity(8);
    auto tokens = rand_tensor({5, 8}, 1, -1, 1, false);
    EXPECT_EQ(encode(tokens, p).values(), tokens.values());
  }
}

TEST(Encode, PositionSensitive) {
  auto p = init_params(small_cfg(), 4);
  auto tokens = rand_tensor({4, 8}, 2, -1, 1, false);
  std::vector<std::size_t> perm{2, 0, 3, 1};
  auto permuted = gather_rows(tokens, perm);
  auto z = encode(tokens, p), zp = encode(permuted, p);
  // Undo the permutation on the output; an order-blind encoder would match.
  auto back = gather_rows(zp, {1, 3, 0, 2});
  EXPECT_GT(max_abs_diff(z, back), 1e-3);
}

TEST(Encode, BatchedSequencesAreIndependent) {
  auto p = init_params(small_cfg(), 5);
  auto a = rand_tensor({4, 8}, 3, -1, 1, false), b = rand_tensor({4, 8}, 4, -1, 1, false);
  auto z = encode(concat({a, b}), p, 4);
  EXPECT_LT(max_abs_diff(slice(z, 0, 4), encode(a, p)), 1e-12);
  EXPECT_LT(max_abs_diff(slice(z, 4, 8), encode(b, p)), 1e-12);
}

TEST(Encode, ConvGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto p = init_params(small_cfg(8, 1), seed);
    auto tokens = rand_tensor({4, 8}, 50 + seed, -1, 1, false);
    auto f = [&] { return sum(encode(tokens, p)); };
    // sum(LN(x)) is ~0 in every row, so weight the output to get a useful signal.
    auto w = rand_tensor({4, 8}, 70 + seed, -1, 1, false);
    auto g = [&] { return sum(mul(encode(tokens, p), w)); };
    EXPECT_LT(finite_diff_check(g, {p.get("encoder.conv.w")}), 1e-4);
    EXPECT_LT(finite_diff_check(f, {p.get("encoder.conv.w")}), 1e-4);
  }
}

TEST(Encode, ErrorsOnBadInput) {
  auto p = init_params(small_cfg(), 0);
  EXPECT_THROW(encode(Tensor::zeros({4, 7}), p), ShapeError);
  EXPECT_THROW(encode(Tensor::zeros({5, 8}), p, 2), ShapeError);
  auto bad = Tensor::zeros({2, 8});
  bad.mutable_data()[0] = NAN;
  EXPECT_THROW(encode(bad, p), NonFiniteError);
}

TEST(Decode, ReconstructionShapeFromHeadDefinition) {
  auto c = small_cfg(16, 1);
  c.n_heads = 4;
  auto p = init_params(c, 0);
  ensure_system(p, "s", HeadShape{1, 25, 14, 100, 50});
  auto z = rand_tensor({14, 16}, 1, -1, 1, false);
  auto r = decode_reconstruct(z, p, p.get("system.s.w_r"), 1);
  EXPECT_EQ(r.shape(), (Shape{100, 1}));
  auto f = decode_forecast(z, p, p.get("system.s.w_f"), 1);
  EXPECT_EQ(f.shape(), (Shape{50, 1}));
  EXPECT_EQ(decode_reconstruct(z, p, p.get("system.s.w_r"), 1).values(), r.values());
}

TEST(Decode, ZeroHeadGivesZeroOutput) {
  auto p = init_params(small_cfg(), 0);
  auto z = Tensor::zeros({3, 8});
  for (double v : decode_reconstruct(z, p, Tensor::zeros({12, 24}), 2).values()) EXPECT_EQ(v, 0.0);
  for (double v : decode_forecast(rand_tensor({3, 8}, 1), p, Tensor::zeros({6, 24}), 1).values())
    EXPECT_EQ(v, 0.0);
}

TEST(Decode, ForecastRespondsToLatent) {
  auto p = init_params(small_cfg(), 0);
  auto w = rand_tensor({6, 24}, 2, -1, 1, false);
  auto a = decode_forecast(rand_tensor({3, 8}, 3), p, w, 1);
  auto b = decode_forecast(rand_tensor({3, 8}, 4), p, w, 1);
  EXPECT_GT(max_abs_diff(a, b), 1e-6);
}

TEST(Decode, HeadShapeMismatchThrows) {
  auto p = init_params(small_cfg(), 0);
  EXPECT_THROW(decode_reconstruct(Tensor::zeros({3, 8}), p, Tensor::zeros({12, 23}), 1), ShapeError);
  EXPECT_THROW(decode_reconstruct(Tensor::zeros({3, 8}), p, Tensor::zeros({5, 24}), 2), ShapeError);
}

TEST(Checkpoint, RoundTripPreservesEveryTensor) {
  auto dir = dynenc::testing::temp_dir("ckpt");
  auto p = init_params(small_cfg(), 9);
  ensure_system(p, "heat", HeadShape{1, 4, 3, 10, 5});
  save_checkpoint(dir, p, 17, Json{{"note", "x"}});
  auto c = load_checkpoint(dir);
  EXPECT_EQ(c.step, 17u);
  EXPECT_EQ(c.params.seed, 9u);
  EXPECT_EQ(c.extra.at("note"), "x");
  EXPECT_EQ(c.params.cfg.to_json(), p.cfg.to_json());
  ASSERT_EQ(c.params.tensors.size(), p.tensors.size());
  for (const auto& [name, t] : p.tensors) {
    EXPECT_EQ(c.params.get(name).shape(), t.shape()) << name;
    EXPECT_EQ(c.params.get(name).values(), t.values()) << name;
  }
  EXPECT_THROW(load_checkpoint(dir / "none"), IoError);
}

// Encode/decode round trip on a fixed toy batch: 200 Adam steps must halve
// the reconstruction loss (median over 10 seeds).
TEST(Training, ReconstructionLossHalves) {
  const std::size_t T = 24, V = 1;
  PatchConfig pc{8, 4};
  const std::size_t P = pc.count(T);
  std::vector<double> ratios;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto p = init_params(small_cfg(8, 1), seed);
    ensure_system(p, "toy", HeadShape{V, pc.patch_len, P, T, 0});
    std::vector<std::vector<double>> xs;
    for (int b = 0; b < 4; ++b) {
      std::vector<double> x(T);
      for (std::size_t t = 0; t < T; ++t) x[t] = std::sin(0.3 * (b + 1) * static_cast<double>(t) + b);
      xs.push_back(instance_normalize(x, V).first);
    }
    auto loss = [&] {
      std::vector<Tensor> tokens, targets;
      for (auto& x : xs) {
        tokens.push_back(project(patchify(x, V, pc), p.get("system.toy.w_dp"), "toy"));
        targets.push_back(Tensor::from({1, T}, x));
      }
      Tensor h = decode(encode(concat(tokens), p, P), p, P);
      return l1_loss(apply_head(h, p.get("system.toy.w_r"), P, "toy"), concat(targets));
    };
    Adam opt;
    auto lr = group_lr(1e-3, 1e-2);
    double first = 0, last = 0;
    for (int k = 0; k < 200; ++k) {
      TapeScope scope;
      Tensor l = loss();
      if (k == 0) first = l.item();
      backward(l);
      opt.step(p, lr);
    }
    {
      NoGradGuard ng;
      last = loss().item();
    }
    ratios.push_back(last / first);
  }
  std::nth_element(ratios.begin(), ratios.begin() + 5, ratios.end());
  EXPECT_LE(ratios[5], 0.5);
}
