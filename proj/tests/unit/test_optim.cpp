#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "acebert/errors.hpp"
#include "acebert/features.hpp"
#include "acebert/optim.hpp"
#include "acebert/synth.hpp"

using namespace acebert;

TEST(Adam, MatchesHandRolledUpdates) {
  // f(w) = sum (w - c)^2 with gradients written by hand each step.
  const std::vector<double> c = {3.0, -1.0, 0.5};
  auto w = Tensor::from({3}, {0.0f, 0.0f, 0.0f});
  w.set_requires_grad(true);
  Adam opt({w});
  std::vector<double> ref(3, 0.0), m(3, 0.0), v(3, 0.0);
  const double lr = 0.05;
  for (int t = 1; t <= 25; ++t) {
    auto g = w.mutable_grad();
    for (std::size_t i = 0; i < 3; ++i) g[i] = static_cast<float>(2.0 * (w.at(i) - c[i]));
    for (std::size_t i = 0; i < 3; ++i) {
      const double gi = 2.0 * (ref[i] - c[i]);
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.999 * v[i] + 0.001 * gi * gi;
      const double mh = m[i] / (1 - std::pow(0.9, t));
      const double vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
    opt.step(lr);
    opt.zero_grad();
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(w.at(i), ref[i], 1e-4);
  EXPECT_EQ(opt.steps(), 25u);
}

TEST(Adam, FirstStepMovesBySignTimesLr) {
  auto w = Tensor::from({2}, {1.0f, 1.0f});
  w.set_requires_grad(true);
  Adam opt({w});
  auto g = w.mutable_grad();
  g[0] = 40.0f;
  g[1] = -0.01f;
  opt.step(0.1);
  EXPECT_NEAR(w.at(0), 0.9f, 1e-6);
  EXPECT_NEAR(w.at(1), 1.1f, 1e-5);
}

TEST(Adam, SkipsParametersWithoutGradient) {
  auto a = Tensor::from({1}, {2.0f});
  auto b = Tensor::from({1}, {5.0f});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Adam opt({a, b});
  a.mutable_grad()[0] = 1.0f;
  const auto before = hash_tensors({b});
  opt.step(0.1);
  EXPECT_EQ(hash_tensors({b}), before);
  EXPECT_LT(a.at(0), 2.0f);
}

TEST(Adam, ClipScalesGlobalNorm) {
  // Adam is invariant to a constant gradient scale, so the clip only shows
  // once gradients of different norms meet in the moment estimates.
  auto w = Tensor::from({1}, {0.0f});
  w.set_requires_grad(true);
  Adam opt({w}, AdamConfig{0.9, 0.999, 1e-8, 1.0});
  const double grads[] = {50.0, 0.5};
  double ref = 0, m = 0, v = 0;
  for (int t = 1; t <= 2; ++t) {
    w.mutable_grad()[0] = static_cast<float>(grads[t - 1]);
    const double g = std::min(grads[t - 1], 1.0);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    ref -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    opt.step(0.1);
    opt.zero_grad();
  }
  EXPECT_NEAR(w.at(0), ref, 1e-6);
}

TEST(Schedule, WarmupThenLinearDecay) {
  const LinearSchedule s{1e-3, 100, 0.1};
  EXPECT_NEAR(s.at(0), 1e-4, 1e-12);
  EXPECT_NEAR(s.at(9), 1e-3, 1e-12);
  EXPECT_NEAR(s.at(10), 1e-3, 1e-12);
  EXPECT_NEAR(s.at(55), 0.5e-3, 1e-12);
  EXPECT_NEAR(s.at(99), 1e-3 / 90, 1e-12);
  EXPECT_EQ(s.at(100), 0.0);
  double prev = 1.0;
  for (std::size_t t = 10; t <= 100; ++t) {
    EXPECT_LE(s.at(t), prev);
    prev = s.at(t);
  }
  const LinearSchedule flat{2e-3, 10, 0.0};
  EXPECT_NEAR(flat.at(0), 2e-3, 1e-12);
}

TEST(Hash, SensitiveToAnyBit) {
  auto t = Tensor::from({3}, {1.0f, 2.0f, 3.0f});
  const auto h = hash_tensors({t});
  EXPECT_EQ(hash_tensors({t.clone()}), h);
  t.mutable_data()[2] = std::nextafter(3.0f, 4.0f);
  EXPECT_NE(hash_tensors({t}), h);
}

TEST(Features, ShapesAndFullFrameSwitch) {
  const auto catalog = synth::gen_catalog(6, 3, 11);
  const auto extractor = vision::PatchFeatureExtractor::create(5, 128);
  ImageFeatureConfig cfg;
  const auto feats = compute_catalog_features(catalog, extractor, cfg);
  ASSERT_EQ(feats.size(), 6u);
  for (const auto& f : feats) {
    EXPECT_EQ(f.n_patch, 16u);
    EXPECT_EQ(f.patch_rows.size(), 16u * 128);
    EXPECT_EQ(f.n_pixel, 16u);
    EXPECT_EQ(f.pixel_rows.size(), 16u * 192);
  }
  cfg.use_roi = false;
  const auto full = compute_features(catalog[0].image(), extractor, cfg);
  EXPECT_EQ(full.roi, vision::full_frame(catalog[0].image()));
  cfg.pixel_patch = 5;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
