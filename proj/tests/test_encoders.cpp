#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "vprop/encoders.hpp"

using namespace vprop;

namespace {

Configuration random_config(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Configuration c;
  for (auto& v : c.a) v = u(rng);
  return c;
}

Image render(const Configuration& c) {
  static const Image bg = static_background();
  return quantize(rasterize(forward_kinematics(c, default_geometry()), camera_preset("side"), bg));
}

LabeledImages labeled(std::size_t n, std::uint64_t seed, int traj0) {
  std::mt19937_64 rng(seed);
  LabeledImages s;
  s.split = "finetune";
  for (std::size_t i = 0; i < n; ++i) {
    s.configs.push_back(random_config(rng));
    s.images.push_back(render(s.configs.back()));
    s.trajectory_ids.push_back(traj0 + static_cast<int>(i / 20));
  }
  return s;
}

double l2(const LatentVector& a, const LatentVector& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.width(); ++i) s += (a.values[i] - b.values[i]) * (a.values[i] - b.values[i]);
  return std::sqrt(s);
}

DetectionSet blank() {
  DetectionSet d;
  for (std::size_t i = 0; i < kMarkerCount; ++i) d[i].id = static_cast<int>(i);
  return d;
}

}  // namespace

TEST(Fiducial, AllInvisibleIsZero) {
  const auto z = encode_fiducial(blank());
  EXPECT_EQ(z.values, std::vector<double>(128, 0.0));
}

TEST(Fiducial, SingleMarkerLayout) {
  DetectionSet d = blank();
  d[0].visible = true;
  d[0].corners = {0, 0, 1, 0, 1, 1, 0, 1};
  std::vector<double> expected(128, 0.0);
  const double head[] = {0, 0, 1, 0, 1, 1, 0, 1, 1};
  std::copy(std::begin(head), std::end(head), expected.begin());
  EXPECT_EQ(encode_fiducial(d).values, expected);
}

TEST(Fiducial, LayoutFuzz) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 2000; ++trial) {
    DetectionSet d = blank();
    const unsigned mask = static_cast<unsigned>(rng() & 1023u);
    for (std::size_t i = 0; i < kMarkerCount; ++i) {
      if (!(mask >> i & 1u)) continue;
      d[i].visible = true;
      for (auto& c : d[i].corners) c = u(rng);
    }
    const auto z = encode_fiducial(d);
    ASSERT_EQ(z.width(), 128u);
    for (std::size_t i = 0; i < kMarkerCount; ++i) {
      for (std::size_t k = 0; k < 8; ++k) ASSERT_EQ(z.values[9 * i + k], d[i].visible ? d[i].corners[k] : 0.0);
      ASSERT_EQ(z.values[9 * i + 8], d[i].visible ? 1.0 : 0.0);
    }
    for (std::size_t k = 90; k < 128; ++k) ASSERT_EQ(z.values[k], 0.0);
    // Hiding another marker never moves this marker's slot.
    for (std::size_t i = 0; i < kMarkerCount; ++i) {
      DetectionSet e = d;
      e[(i + 3) % kMarkerCount] = MarkerDetection{static_cast<int>((i + 3) % kMarkerCount), false, {}};
      const auto ze = encode_fiducial(e);
      for (std::size_t k = 0; k < 9; ++k) ASSERT_EQ(ze.values[9 * i + k], z.values[9 * i + k]);
    }
  }
}

TEST(Fiducial, RejectsBadInput) {
  DetectionSet d = blank();
  EXPECT_THROW(encode_fiducial(std::span<const MarkerDetection>(d.data(), 9)), ValidationError);
  std::swap(d[2], d[3]);
  EXPECT_THROW(encode_fiducial(d), ValidationError);
}

TEST(Vae, ShapesAndDeterministicMean) {
  VaeModel<double> m(128);
  Rng rng(3);
  m.init(rng);
  EXPECT_EQ(m.encoder().output_shape({2, 1, 64, 64}), (Shape{2, 1024}));
  EXPECT_EQ(m.decoder().output_shape({2, 128}), (Shape{2, 1, 64, 64}));
  std::mt19937_64 g(4);
  const Image img = render(random_config(g));
  const auto a = encode_vae(m, img), b = encode_vae(m, img);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.width(), 128u);
  EXPECT_THROW(encode_vae(m, Image(32, 32)), ValidationError);
}

TEST(Vae, TrainingPreconditions) {
  VaeHyper h;
  h.epochs = 1;
  EXPECT_THROW(train_conv_vae<double>({}, 128, h), ValidationError);
  std::vector<Image> few(50, static_background());
  EXPECT_THROW(train_conv_vae<double>(few, 128, h), ValidationError);
  std::vector<Image> mixed(120, static_background());
  mixed[7] = Image(32, 32);
  EXPECT_THROW(train_conv_vae<double>(mixed, 128, h), ValidationError);
}

TEST(Vae, ShortRunLogsAndDeterminism) {
  std::mt19937_64 g(5);
  std::vector<Image> imgs;
  for (int i = 0; i < 128; ++i) imgs.push_back(render(random_config(g)));
  VaeHyper h;
  h.epochs = 4;
  h.seed = 9;
  const auto a = train_conv_vae<double>(imgs, 128, h);
  const auto b = train_conv_vae<double>(imgs, 128, h);
  ASSERT_EQ(a.log.size(), 4u);
  for (const auto& e : a.log) {
    EXPECT_GE(e.kl, 0.0);
    EXPECT_GE(e.reconstruction, 0.0);
  }
  EXPECT_LT(a.log.back().reconstruction, a.log.front().reconstruction);
  EXPECT_EQ(a.log, b.log);
  auto na = a.model.networks(), nb = b.model.networks();
  for (std::size_t i = 0; i < na.size(); ++i) EXPECT_TRUE(na[i]->same_parameters(*nb[i]));
  EXPECT_TRUE(a.model.has_decoder());
  EXPECT_GT(l2(encode_vae(a.model, imgs[0]), encode_vae(a.model, static_background())), 0.0);
}

TEST(Backbone, FeaturesShapeDeterminismVariance) {
  const auto bb = build_backbone<double>(11);
  const auto bb2 = build_backbone<double>(11);
  EXPECT_EQ(bb.feature_width(), 1024u);
  EXPECT_TRUE(bb.network().same_parameters(bb2.network()));
  std::mt19937_64 g(6);
  std::vector<Image> imgs;
  for (int i = 0; i < 100; ++i) imgs.push_back(render(random_config(g)));
  const auto f = bb.features(imgs);
  EXPECT_EQ(f, bb2.features(imgs));
  ASSERT_EQ(f[0].size(), 1024u);
  double var = 0;
  for (std::size_t j = 0; j < 1024; ++j) {
    double m = 0, s = 0;
    for (const auto& r : f) m += r[j];
    m /= 100;
    for (const auto& r : f) s += (r[j] - m) * (r[j] - m);
    var += s / 100;
  }
  EXPECT_GT(var, 0.0);
  EXPECT_FALSE(build_backbone<double>(12).network().same_parameters(bb.network()));
}

TEST(Reductor, TrainingKeepsOnlyReductorAndFreezesBackbone) {
  const auto bb = build_backbone<double>(21);
  const auto before = bb.network();
  const LabeledImages ft = labeled(200, 7, 0);
  ReductorHyper h;
  h.training.max_epochs = 15;
  h.training.seed = 3;
  const auto r = train_reductor(bb, ft, 128, h);
  EXPECT_TRUE(bb.network().same_parameters(before));
  EXPECT_EQ(r.model.network().parameter_count(), 1024u * 512 + 512 + 512u * 128 + 128);
  EXPECT_EQ(r.model.network().output_shape({1, 1024}), (Shape{1, 128}));
  EXPECT_LT(r.log.back().train_loss, r.log.front().train_loss);
  EXPECT_LT(best_validation_loss(r.log), r.log.front().val_loss);

  const auto z1 = encode_backbone(bb, r.model, ft.images[0]);
  EXPECT_EQ(z1.width(), 128u);
  EXPECT_EQ(z1, encode_backbone(bb, r.model, ft.images[0]));
  EXPECT_GT(l2(z1, encode_backbone(bb, r.model, ft.images[1])), 0.0);
  EXPECT_THROW(encode_backbone(build_backbone<double>(22), r.model, ft.images[0]), ValidationError);
}

TEST(Reductor, OverlapWithRegressionSplitIsProtocolError) {
  const auto bb = build_backbone<double>(21);
  const LabeledImages ft = labeled(60, 8, 10);
  const std::vector<int> regression{1, 2, 12};
  ReductorHyper h;
  h.training.max_epochs = 1;
  EXPECT_THROW(train_reductor(bb, ft, 128, h, regression), ProtocolError);
  const std::vector<int> disjoint{1, 2, 3};
  EXPECT_NO_THROW(train_reductor(bb, ft, 128, h, disjoint));
}

TEST(EncoderContainer, RoundTripsEveryKind) {
  std::mt19937_64 g(9);
  const Image img = render(random_config(g));
  DetectionSet det = blank();
  det[3].visible = true;
  det[3].corners = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};

  VaeModel<double> vae(256);
  Rng rng(1);
  vae.init(rng);
  const auto bb = build_backbone<double>(5);
  ReductorHyper h;
  const auto red = random_reductor(bb, 128, h);

  std::vector<Encoder<double>> encs{Encoder<double>::fiducial(), Encoder<double>::from_vae(vae),
                                    Encoder<double>::from_backbone(bb, red)};
  VaeModel<double> deployed = vae;
  deployed.discard_decoder();
  encs.push_back(Encoder<double>::from_vae(deployed));
  for (const auto& e : encs) {
    const auto bytes = e.save();
    const auto back = Encoder<double>::load(bytes);
    EXPECT_EQ(back.descriptor().kind, e.descriptor().kind);
    EXPECT_EQ(back.width(), e.width());
    EXPECT_EQ(back.encode(img, det), e.encode(img, det));
    EXPECT_EQ(back.save(), bytes);
    const Image one[] = {img};
    const DetectionSet ds[] = {det};
    EXPECT_EQ(e.encode_all(one, ds).front(), e.encode(img, det));
  }
  auto bytes = encs[1].save();
  bytes.resize(bytes.size() - 8);
  EXPECT_THROW(Encoder<double>::load(bytes), LoadError);
  const std::vector<std::uint8_t> junk{'x', 'y'};
  EXPECT_THROW(Encoder<double>::load(junk), LoadError);
}
