#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "vprop/adam.hpp"
#include "vprop/checkpoint.hpp"
#include "vprop/loss.hpp"
#include "vprop/network.hpp"

using namespace vprop;
using vprop::testing::random_tensor;

TEST(Dense, IdentityWeightsPassInputThrough) {
  LayerParams<double> p({2, 2}, {2});
  p.weights = Tensor<double>({2, 2}, {1, 0, 0, 1});
  const std::vector<double> x{3, -1};
  EXPECT_EQ(dense_forward<double>(x, p), (std::vector<double>{3, -1}));
}

TEST(Dense, HandMultiply) {
  LayerParams<double> p({2, 2}, {2});
  p.weights = Tensor<double>({2, 2}, {1, 2, 3, 4});
  const std::vector<double> x{1, 1};
  EXPECT_EQ(dense_forward<double>(x, p), (std::vector<double>{3, 7}));
}

TEST(Dense, ZeroInputGivesBias) {
  LayerParams<double> p({3, 2}, {3});
  p.weights = Tensor<double>({3, 2}, {1, 2, 3, 4, 5, 6});
  p.bias = Tensor<double>({3}, {0.5, -1, 2});
  const std::vector<double> x{0, 0};
  EXPECT_EQ(dense_forward<double>(x, p), (std::vector<double>{0.5, -1, 2}));
}

TEST(Dense, ShapeMismatchNamesBothShapes) {
  LayerParams<double> p({2, 3}, {2});
  const std::vector<double> x{1, 2};
  try {
    dense_forward<double>(x, p);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("2x3"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("2"), std::string::npos);
  }
  Dense<double> d(3, 2);
  EXPECT_THROW(d.infer(Tensor<double>({1, 4})), DimensionError);
}

TEST(Conv2d, UnitKernelIsIdentity) {
  std::mt19937_64 rng(1);
  const auto img = random_tensor({1, 5, 4}, rng);
  const Tensor<double> k({1, 1, 1, 1}, {1.0});
  EXPECT_EQ(conv2d_forward(img, k, 1, 0), img);
}

TEST(Conv2d, OnesKernelOnConstantImage) {
  const double c = 0.7;
  const Tensor<double> img({1, 5, 5}, c);
  const Tensor<double> k({1, 1, 3, 3}, 1.0);
  const auto out = conv2d_forward(img, k, 1, 0);
  ASSERT_EQ(out.shape(), (Shape{1, 3, 3}));
  // oracle: direct 3x3 summation of a constant
  double expected = 0;
  for (int i = 0; i < 9; ++i) expected += c;
  for (double v : out.vec()) EXPECT_DOUBLE_EQ(v, expected);
}

TEST(Conv2d, DeltaKernelCrops) {
  std::mt19937_64 rng(2);
  const auto img = random_tensor({1, 6, 7}, rng);
  Tensor<double> k({1, 1, 3, 3});
  k[0] = 1.0;  // top-left tap
  const auto out = conv2d_forward(img, k, 1, 0);
  ASSERT_EQ(out.shape(), (Shape{1, 4, 5}));
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 5; ++x) EXPECT_EQ(out[y * 5 + x], img[y * 7 + x]);
}

TEST(Conv2d, KernelLargerThanPaddedInput) {
  const Tensor<double> img({1, 2, 2});
  const Tensor<double> k({1, 1, 5, 5});
  EXPECT_THROW(conv2d_forward(img, k, 1, 1), DimensionError);
  EXPECT_NO_THROW(conv2d_forward(img, k, 1, 2));
}

TEST(Conv2d, OutputShapeFormulaOverGrid) {
  for (std::size_t h : {3u, 4u, 7u, 16u})
    for (std::size_t k : {1u, 2u, 3u, 4u})
      for (std::size_t s : {1u, 2u, 3u})
        for (std::size_t p : {0u, 1u, 2u}) {
          if (k > h + 2 * p) continue;
          Conv2d<double> conv(2, 3, k, s, p);
          const Shape out = conv.infer(Tensor<double>({2, 2, h, h + 1})).shape();
          EXPECT_EQ(out, (Shape{2, 3, (h + 2 * p - k) / s + 1, (h + 1 + 2 * p - k) / s + 1}));
        }
}

namespace {

void expect_gradients_match(Layer<double>& layer, const Shape& in, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  layer.init(rng);
  if (auto* p = layer.params())
    for (auto& v : p->bias.vec()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  const auto x = random_tensor(in, rng);
  const auto rep = vprop::testing::check_layer_gradients(layer, x, rng);
  EXPECT_LT(rep.max_rel_error, 1e-4) << layer_kind_name(layer.kind()) << " seed " << seed << ": " << rep.worst;
}

}  // namespace

TEST(Gradients, DenseMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t in = 1 + seed % 5, out = 1 + (seed * 3) % 4, batch = 1 + seed % 3;
    Dense<double> d(in, out);
    expect_gradients_match(d, {batch, in}, seed);
  }
}

TEST(Gradients, Conv2dMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t k = 1 + seed % 3, s = 1 + seed % 2, p = seed % 2;
    Conv2d<double> c(1 + seed % 2, 2, k, s, p);
    expect_gradients_match(c, {1 + seed % 2, 1 + seed % 2, 5, 6}, seed);
  }
}

TEST(Gradients, ConvTransposeMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t k = 2 + seed % 3, s = 1 + seed % 2, p = seed % 2;
    ConvTranspose2d<double> c(2, 1 + seed % 2, k, s, p);
    expect_gradients_match(c, {1 + seed % 2, 2, 3, 4}, seed);
  }
}

TEST(Gradients, ActivationsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    LeakyRelu<double> lr;
    expect_gradients_match(lr, {2, 3 + seed}, seed);
    Sigmoid<double> sg;
    expect_gradients_match(sg, {2, 3 + seed}, seed);
    Reshape<double> rs({3, 2});
    expect_gradients_match(rs, {2, 6}, seed);
  }
}

TEST(Gradients, SequentialStackMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    Sequential<double> net;
    net.add<Conv2d<double>>(1, 2, 3, 2, 1).add<LeakyRelu<double>>().add<Reshape<double>>(Shape{2 * 4 * 4});
    net.add<Dense<double>>(32, 3).add<Sigmoid<double>>();
    net.init(rng);
    const auto x = random_tensor({2, 1, 8, 8}, rng);
    const auto target = random_tensor({2, 3}, rng);
    auto loss = [&](const Tensor<double>& in) {
      const auto y = net.infer(in);
      return mse_loss<double>(y.values(), target.values()).value;
    };
    net.zero_grad();
    const auto y = net.forward(x);
    const auto l = mse_loss<double>(y.values(), target.values());
    const auto gx = net.backward(Tensor<double>(y.shape(), l.grad));
    const auto numeric = vprop::testing::numeric_gradient(
        [&](const std::vector<double>& v) { return loss(Tensor<double>(x.shape(), v)); }, std::vector<double>(x.vec().begin(), x.vec().end()));
    for (std::size_t i = 0; i < numeric.size(); ++i)
      EXPECT_LT(vprop::testing::rel_error(gx[i], numeric[i]), 1e-4) << "seed " << seed << " input " << i;
  }
}

TEST(Backward, PerfectFitGivesZeroGradients) {
  Sequential<double> net;
  net.add<Dense<double>>(2, 2);
  net.parameters()[0]->weights = Tensor<double>({2, 2}, {1, 0, 0, 1});
  const Tensor<double> x({1, 2}, {0.3, -0.8});
  net.zero_grad();
  const auto y = net.forward(x);
  const auto l = mse_loss<double>(y.values(), x.values());
  net.backward(Tensor<double>(y.shape(), l.grad));
  for (double g : net.parameters()[0]->grad_weights.vec()) EXPECT_EQ(g, 0.0);
  for (double g : net.parameters()[0]->grad_bias.vec()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, ScalingLossScalesGradients) {
  std::mt19937_64 rng(5);
  auto net = make_mlp<double>(4, {5}, 3);
  net.init(rng);
  const auto x = random_tensor({3, 4}, rng);
  auto grads_for = [&](double k) {
    net.zero_grad();
    const auto y = net.forward(x);
    Tensor<double> g(y.shape(), 1.0);
    for (auto& v : g.vec()) v *= k;
    net.backward(g);
    return net.parameters()[0]->grad_weights;
  };
  const auto g1 = grads_for(1.0);
  const auto g3 = grads_for(3.0);
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g3[i], 3.0 * g1[i], 1e-12);
}

TEST(Backward, BeforeForwardIsStateError) {
  auto net = make_mlp<double>(2, {3}, 1);
  EXPECT_THROW(net.backward(Tensor<double>({1, 1})), StateError);
  Dense<double> d(2, 1);
  EXPECT_THROW(d.backward(Tensor<double>({1, 1})), StateError);
}

TEST(Adam, ZeroGradientIsIdentity) {
  std::mt19937_64 rng(3);
  auto net = make_mlp<double>(3, {4}, 2);
  net.init(rng);
  const auto before = net;
  Adam<double> opt(net.parameters(), AdamConfig{});
  opt.zero_grad();
  for (int i = 0; i < 5; ++i) opt.step();
  EXPECT_TRUE(net.same_parameters(before));
  EXPECT_EQ(opt.states()[0].step_count, 5u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  LayerParams<double> p({1, 1}, {1});
  p.weights[0] = 0.5;
  p.grad_weights[0] = 1.0;
  AdamState<double> s(p, AdamConfig{0.001, 0.9, 0.999, 1e-8, 0.0});
  adam_step(p, s);
  // m = 0.1, v = 0.001; bias-corrected both equal 1 -> step = lr / (1 + eps)
  EXPECT_NEAR(0.5 - p.weights[0], 0.001 / (1 + 1e-8), 1e-12);
  EXPECT_NEAR(0.5 - p.weights[0], 0.001, 1e-6);
  EXPECT_EQ(s.step_count, 1u);
}

TEST(Adam, EqualGradientsGiveEqualUpdates) {
  LayerParams<double> p({1, 2}, {1});
  p.weights = Tensor<double>({1, 2}, {0.25, 0.25});
  p.grad_weights = Tensor<double>({1, 2}, {-0.3, -0.3});
  AdamState<double> s(p, AdamConfig{});
  for (int i = 0; i < 3; ++i) adam_step(p, s);
  EXPECT_EQ(p.weights[0], p.weights[1]);
}

TEST(Adam, SecondMomentStaysNonNegative) {
  std::mt19937_64 rng(4);
  LayerParams<double> p({3, 3}, {3});
  AdamState<double> s(p, AdamConfig{});
  for (int i = 0; i < 20; ++i) {
    p.grad_weights = random_tensor({3, 3}, rng);
    adam_step(p, s);
    for (double v : s.second_moment_w.vec()) EXPECT_GE(v, 0.0);
  }
}

TEST(Adam, DecoupledWeightDecayShrinksWithZeroGradient) {
  LayerParams<double> p({1, 1}, {1});
  p.weights[0] = 2.0;
  AdamState<double> s(p, AdamConfig{0.1, 0.9, 0.999, 1e-8, 0.01});
  adam_step(p, s);
  EXPECT_DOUBLE_EQ(p.weights[0], 2.0 - 0.1 * 0.01 * 2.0);
}

TEST(Adam, NonFiniteGradientNamesLayer) {
  LayerParams<double> p({1, 1}, {1});
  p.grad_bias[0] = std::nan("");
  AdamState<double> s(p, AdamConfig{});
  try {
    adam_step(p, s, "decoder.3");
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.3"), std::string::npos);
  }
}

TEST(MseLoss, Examples) {
  const std::vector<double> a{1, 0}, z{0, 0};
  EXPECT_EQ(mse_loss<double>(z, z).value, 0.0);
  EXPECT_DOUBLE_EQ(mse_loss<double>(a, z).value, 0.5);
  EXPECT_DOUBLE_EQ(mse_loss<double>(z, a).value, 0.5);
  EXPECT_EQ(mse_loss<double>(a, z).grad, (std::vector<double>{1.0, 0.0}));
  const std::vector<double> three{1, 2, 3};
  EXPECT_THROW(mse_loss<double>(a, three), DimensionError);
}

TEST(MseLoss, NonNegativeZeroOnlyAtEquality) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> d(-2, 2);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> p(5), t(5);
    for (auto& v : p) v = d(rng);
    for (auto& v : t) v = d(rng);
    EXPECT_GT(mse_loss<double>(p, t).value, 0.0);
    EXPECT_EQ(mse_loss<double>(p, p).value, 0.0);
  }
}

TEST(KlDivergence, ClosedForms) {
  const std::vector<double> zero{0}, one{1}, ln4{std::log(4.0)};
  EXPECT_EQ(kl_diag_gaussian<double>(zero, zero).value, 0.0);
  EXPECT_DOUBLE_EQ(kl_diag_gaussian<double>(one, zero).value, 0.5);
  EXPECT_NEAR(kl_diag_gaussian<double>(zero, ln4).value, 0.5 * (4 - 1 - std::log(4.0)), 1e-15);
  EXPECT_NEAR(kl_diag_gaussian<double>(zero, ln4).value, 0.8069, 1e-4);
}

TEST(KlDivergence, NonNegativeAndGradientMatches) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> d(-2, 2);
  for (int i = 0; i < 50; ++i) {
    std::vector<double> mu(4), lv(4);
    for (auto& v : mu) v = d(rng);
    for (auto& v : lv) v = d(rng);
    const auto r = kl_diag_gaussian<double>(mu, lv);
    EXPECT_GT(r.value, 0.0);
    const auto gmu = vprop::testing::numeric_gradient(
        [&](const std::vector<double>& m) { return kl_diag_gaussian<double>(m, lv).value; }, mu);
    const auto glv = vprop::testing::numeric_gradient(
        [&](const std::vector<double>& l) { return kl_diag_gaussian<double>(mu, l).value; }, lv);
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_LT(vprop::testing::rel_error(r.grad_mu[j], gmu[j]), 1e-4);
      EXPECT_LT(vprop::testing::rel_error(r.grad_logvar[j], glv[j]), 1e-4);
    }
  }
}

namespace {
Sequential<double> small_convnet(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Sequential<double> net;
  net.add<Conv2d<double>>(1, 2, 3, 2, 1).add<LeakyRelu<double>>().add<Reshape<double>>(Shape{32});
  net.add<Dense<double>>(32, 4).add<Sigmoid<double>>();
  net.init(rng);
  return net;
}
}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  auto net = small_convnet(11);
  const auto bytes = save_params(net);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "PRB1");
  auto other = small_convnet(99);
  ASSERT_FALSE(other.same_parameters(net));
  load_params<double>(bytes, other);
  EXPECT_TRUE(other.same_parameters(net));
  std::mt19937_64 rng(1);
  const auto x = random_tensor({3, 1, 8, 8}, rng);
  EXPECT_EQ(net.infer(x), other.infer(x));
  EXPECT_EQ(save_params(other), bytes);
}

TEST(Checkpoint, WrongArchitectureLeavesModelUntouched) {
  auto net = small_convnet(11);
  const auto bytes = save_params(net);
  auto wrong = make_mlp<double>(32, {5}, 4);
  std::mt19937_64 rng(2);
  wrong.init(rng);
  const auto before = wrong;
  EXPECT_THROW(load_params<double>(bytes, wrong), LoadError);
  EXPECT_TRUE(wrong.same_parameters(before));

  // Same layer kinds, different widths: fails on shape, after some layers matched.
  auto a = make_mlp<double>(3, {4}, 2);
  auto b = make_mlp<double>(3, {5}, 2);
  a.init(rng);
  b.init(rng);
  const auto b_before = b;
  EXPECT_THROW(load_params<double>(save_params(a), b), LoadError);
  EXPECT_TRUE(b.same_parameters(b_before));
}

TEST(Checkpoint, CorruptHeaderAndTruncation) {
  auto net = small_convnet(3);
  auto bytes = save_params(net);
  auto bad_magic = bytes;
  bad_magic[1] ^= 0xFF;
  EXPECT_THROW(load_params<double>(bad_magic, net), LoadError);
  auto bad_version = bytes;
  bad_version[4] ^= 0x01;
  EXPECT_THROW(load_params<double>(bad_version, net), LoadError);
  std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 3);
  EXPECT_THROW(load_params<double>(cut, net), LoadError);
}
