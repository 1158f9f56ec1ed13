#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "acebert/errors.hpp"
#include "acebert/grad_check.hpp"
#include "acebert/pretrain.hpp"

using namespace acebert;
using namespace acebert::pretrain;

namespace {

EncoderConfig desk() {
  EncoderConfig c;
  c.dropout = 0.0;
  return c;
}

struct Fixture {
  synth::Corpus corpus;
  std::vector<ProductFeatures> features;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    synth::CorpusConfig cc;
    cc.n_products = 120;
    cc.n_queries = 30;
    cc.seed = 3;
    Fixture out;
    out.corpus = synth::generate_corpus(cc);
    const auto extractor = vision::PatchFeatureExtractor::create(17, 128);
    out.features = compute_catalog_features(out.corpus.products, extractor, ImageFeatureConfig{});
    return out;
  }();
  return f;
}

InputSequence text_sequence(std::size_t n_text, std::size_t n_patch, std::size_t n_pixel) {
  ProductInputs in;
  for (std::size_t i = 0; i < n_text; ++i) in.title_ids.push_back(5 + static_cast<std::int64_t>(i));
  in.n_patch = n_patch;
  in.patch_rows.assign(n_patch * 128, 0.5f);
  in.n_pixel = n_pixel;
  in.pixel_rows.assign(n_pixel * 192, 0.25f);
  return make_product_sequence(in, 64, 128);
}

std::vector<Instance> make_batch_of(std::size_t n, std::uint64_t seed, const PretrainConfig& cfg = {}) {
  const auto& f = fixture();
  const auto pairs = sample_tip_pairs(f.corpus.products.size(), seed);
  std::vector<Instance> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(make_instance(f.corpus, f.features, pairs[i], cfg, desk(), seed * 31 + i));
  }
  return out;
}

double brute_kl(const std::vector<double>& raw, const std::vector<double>& pred) {
  const auto soft = [](const std::vector<double>& x) {
    const double m = *std::max_element(x.begin(), x.end());
    std::vector<double> e(x.size());
    double z = 0;
    for (std::size_t i = 0; i < x.size(); ++i) z += e[i] = std::exp(x[i] - m);
    for (auto& v : e) v /= z;
    return e;
  };
  const auto p = soft(raw);
  const auto q = soft(pred);
  double kl = 0;
  for (std::size_t i = 0; i < p.size(); ++i) kl += p[i] * std::log(std::max(p[i], 1e-8) / std::max(q[i], 1e-8));
  return kl;
}

}  // namespace

TEST(Masking, CountRule) {
  EXPECT_EQ(masked_count(20, 0.15), 3u);
  EXPECT_EQ(masked_count(7, 0.15), 1u);
  EXPECT_EQ(masked_count(1, 0.15), 1u);
  EXPECT_EQ(masked_count(0, 0.15), 0u);
  EXPECT_EQ(masked_count(16, 0.15), 2u);
}

TEST(Masking, DeterministicAndConfinedToText) {
  const auto seq = text_sequence(20, 16, 16);
  const auto a = plan_masks(seq, 42, 256);
  const auto b = plan_masks(seq, 42, 256);
  EXPECT_EQ(a.text_positions, b.text_positions);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_EQ(a.patch_indices, b.patch_indices);
  EXPECT_EQ(a.text_positions.size(), 3u);
  EXPECT_EQ(a.patch_indices.size(), 2u);
  const auto pixels = seq.pixel_positions();
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto plan = plan_masks(seq, s, 256);
    for (auto p : plan.text_positions) {
      EXPECT_EQ(seq.segment_ids[p], kSegText);
      EXPECT_GE(seq.token_ids[p], synth::Vocabulary::kNumSpecial);
      EXPECT_EQ(std::count(pixels.begin(), pixels.end(), p), 0);
    }
    const auto masked = apply_masks(seq, plan);
    for (auto p : pixels) EXPECT_EQ(masked.token_ids[p], seq.token_ids[p]);
    EXPECT_EQ(masked.pixel_rows, seq.pixel_rows);
    EXPECT_EQ(std::accumulate(masked.patch_zeroed.begin(), masked.patch_zeroed.end(), 0), 2);
  }
}

TEST(Masking, ReplacementMixIsEightyTenTen) {
  const auto seq = text_sequence(40, 0, 0);
  std::size_t mask = 0, random = 0, keep = 0;
  for (std::uint64_t s = 0; s < 2000; ++s) {
    const auto plan = plan_masks(seq, s, 256);
    for (std::size_t i = 0; i < plan.actions.size(); ++i) {
      switch (plan.actions[i]) {
        case MaskAction::kMask:
          ++mask;
          EXPECT_EQ(plan.inputs[i], synth::Vocabulary::kMask);
          break;
        case MaskAction::kRandom:
          ++random;
          EXPECT_GE(plan.inputs[i], synth::Vocabulary::kNumSpecial);
          EXPECT_LT(plan.inputs[i], 256);
          break;
        case MaskAction::kKeep:
          ++keep;
          EXPECT_EQ(plan.inputs[i], plan.targets[i]);
          break;
      }
    }
  }
  const double n = static_cast<double>(mask + random + keep);
  EXPECT_NEAR(mask / n, 0.8, 0.02);
  EXPECT_NEAR(random / n, 0.1, 0.015);
  EXPECT_NEAR(keep / n, 0.1, 0.015);
}

TEST(MlmLoss, Oracles) {
  const std::int64_t t0[] = {0};
  EXPECT_NEAR(mlm_loss(TensorD::from({1, 2}, {2.0, 0.0}), t0).item(), -std::log(std::exp(2.0) / (std::exp(2.0) + 1)),
              1e-12);
  EXPECT_NEAR(mlm_loss(TensorD::from({1, 2}, {2.0, 0.0}), t0).item(), 0.1269, 1e-4);
  const std::int64_t t3[] = {3, 100, 255};
  EXPECT_NEAR(mlm_loss(Tensor::zeros({3, 256}), t3).item(), std::log(256.0), 1e-5);
  auto sharp = TensorD::zeros({1, 8});
  sharp.mutable_data()[4] = 60.0;
  const std::int64_t t4[] = {4};
  EXPECT_LT(mlm_loss(sharp, t4).item(), 1e-20);
  EXPECT_EQ(mlm_loss(Tensor(), std::span<const std::int64_t>{}).item(), 0.0f);
  const std::int64_t bad[] = {8};
  EXPECT_THROW(mlm_loss(TensorD::zeros({1, 8}), bad), IndexError);
}

TEST(MpmLoss, Oracles) {
  std::mt19937_64 rng(5);
  std::normal_distribution<float> n(0.0f, 2.0f);
  std::vector<float> v(3 * 128);
  for (auto& x : v) x = n(rng);
  const auto raw = Tensor::from({3, 128}, v);
  EXPECT_EQ(mpm_loss(Tensor::from({3, 128}, v), raw).item(), 0.0f);
  const auto one_hot = TensorD::from({1, 4}, {80.0, 0.0, 0.0, 0.0});
  EXPECT_NEAR(mpm_loss(TensorD::zeros({1, 4}), one_hot).item(), std::log(4.0), 1e-9);
  EXPECT_THROW(mpm_loss(Tensor::zeros({2, 4}), Tensor::zeros({2, 5})), ShapeError);
}

TEST(MpmLoss, NonNegativeAndMatchesBruteForce) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int> rows_d(1, 5), dim_d(2, 40);
    std::normal_distribution<double> n(0.0, 1.0 + trial % 4);
    const int rows = rows_d(rng), dim = dim_d(rng);
    std::vector<double> raw(rows * dim), pred(rows * dim);
    for (auto& x : raw) x = n(rng);
    for (auto& x : pred) x = n(rng);
    double expected = 0;
    for (int r = 0; r < rows; ++r) {
      expected += brute_kl({raw.begin() + r * dim, raw.begin() + (r + 1) * dim},
                           {pred.begin() + r * dim, pred.begin() + (r + 1) * dim});
    }
    expected /= rows;
    const auto got = mpm_loss(TensorD::from({std::size_t(rows), std::size_t(dim)}, pred),
                              TensorD::from({std::size_t(rows), std::size_t(dim)}, raw))
                         .item();
    EXPECT_GE(got, 0.0);
    EXPECT_NEAR(got, expected, 1e-9 * std::max(1.0, expected));
  }
}

TEST(MpmLoss, ShiftInvariantInRawLogits) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> raw(2 * 16), pred(2 * 16);
  for (auto& x : raw) x = n(rng);
  for (auto& x : pred) x = n(rng);
  auto shifted = raw;
  for (std::size_t i = 0; i < 16; ++i) shifted[i] += 7.5;
  for (std::size_t i = 16; i < 32; ++i) shifted[i] -= 3.0;
  const auto a = mpm_loss(TensorD::from({2, 16}, pred), TensorD::from({2, 16}, raw)).item();
  const auto b = mpm_loss(TensorD::from({2, 16}, pred), TensorD::from({2, 16}, shifted)).item();
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(TipLoss, Oracles) {
  const int one[] = {1};
  const int zero[] = {0};
  EXPECT_NEAR(tip_loss(TensorD::from({1, 1}, {0.5}), one).item(), std::log(2.0), 1e-12);
  EXPECT_NEAR(tip_loss(TensorD::from({1, 1}, {1.0 - 1e-9}), one).item(), 0.0, 2e-7);
  EXPECT_NEAR(tip_loss(TensorD::from({1, 1}, {0.9}), zero).item(), 2.302585, 1e-6);
  EXPECT_NEAR(tip_loss(TensorD::from({1, 1}, {0.0}), one).item(), -std::log(1e-7), 1e-9);
  const int mixed[] = {1, 0};
  EXPECT_NEAR(tip_loss(TensorD::from({2, 1}, {0.8, 0.3}), mixed).item(),
              -(std::log(0.8) + std::log(0.7)) / 2, 1e-12);
}

TEST(TipPairs, RatioAndNoSelfNegatives) {
  const auto pairs = sample_tip_pairs(100, 4);
  ASSERT_EQ(pairs.size(), 400u);
  std::vector<int> pos(100, 0), neg(100, 0);
  double label_sum = 0;
  for (const auto& p : pairs) {
    label_sum += p.label;
    if (p.label == 1) {
      EXPECT_EQ(p.title_product, p.image_product);
      ++pos[p.title_product];
    } else {
      EXPECT_NE(p.title_product, p.image_product);
      ++neg[p.title_product];
    }
  }
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(pos[i], 1);
    EXPECT_EQ(neg[i], 3);
  }
  EXPECT_NEAR(label_sum / pairs.size(), 0.25, 0.01);
  EXPECT_THROW(sample_tip_pairs(1, 0), ConfigError);
  EXPECT_THROW(sample_tip_pairs(0, 0), ConfigError);
  const auto again = sample_tip_pairs(100, 4);
  for (std::size_t i = 0; i < pairs.size(); ++i) EXPECT_EQ(again[i].image_product, pairs[i].image_product);
}

TEST(TipPairs, NegativeImagesRoughlyUniform) {
  std::vector<int> hits(10, 0);
  for (std::uint64_t s = 0; s < 300; ++s) {
    for (const auto& p : sample_tip_pairs(10, s)) {
      if (p.label == 0) ++hits[p.image_product];
    }
  }
  // 9000 negatives over 10 images.
  for (int h : hits) EXPECT_NEAR(h, 900, 120);
}

TEST(Instance, MasksOnlyAlignedPairs) {
  const auto& f = fixture();
  const PretrainConfig cfg;
  const auto pos = make_instance(f.corpus, f.features, {3, 3, 1}, cfg, desk(), 1);
  const auto neg = make_instance(f.corpus, f.features, {3, 9, 0}, cfg, desk(), 1);
  EXPECT_FALSE(pos.plan.text_positions.empty());
  EXPECT_EQ(pos.plan.patch_indices.size(), 2u);
  EXPECT_TRUE(neg.plan.text_positions.empty());
  EXPECT_TRUE(neg.plan.patch_indices.empty());
  EXPECT_EQ(neg.seq.patch_rows, f.features[9].patch_rows);
  PretrainConfig text_only;
  text_only.use_patch = false;
  text_only.use_pixel = false;
  const auto t = make_instance(f.corpus, f.features, {3, 3, 1}, text_only, desk(), 1);
  EXPECT_EQ(t.seq.dense_count(), 0u);
  EXPECT_TRUE(t.plan.patch_indices.empty());
}

TEST(Losses, InitialMlmNearUniform) {
  const auto params = ModelParams<float>::init(desk(), 11);
  const auto batch = make_batch_of(32, 8);
  NoGradScope no_grad;
  const auto losses = compute_losses(batch, params, desk());
  EXPECT_NEAR(losses.mlm.item(), std::log(256.0), 0.1 * std::log(256.0));
  EXPECT_GE(losses.mpm.item(), 0.0f);
  EXPECT_GE(losses.tip.item(), 0.0f);
}

TEST(Losses, HeadGradientsPassFiniteDifferences) {
  const auto params = ModelParams<float>::init(desk(), 12).cast<double>();
  const auto batch = make_batch_of(6, 2);
  const std::function<TensorD()> loss = [&] { return compute_losses(batch, params, desk()).total(); };
  const std::pair<const char*, TensorD> heads[] = {
      {"mlm.w", params.mlm_w}, {"mlm.b", params.mlm_b}, {"mpm.w", params.mpm_w},
      {"mpm.b", params.mpm_b}, {"tip.w", params.tip_w}, {"tip.b", params.tip_b},
  };
  for (const auto& [name, t] : heads) {
    const auto report = check_parameter_gradient<double>(loss, t, 1e-4, sample_indices(t.numel(), 16, 3));
    EXPECT_LT(report.max_rel_error, 1e-3) << name;
  }
}

TEST(Step, NonNegativeAndDeterministic) {
  const auto base = ModelParams<float>::init(desk(), 13);
  const auto batch = make_batch_of(8, 5);
  auto run = [&] {
    auto p = base.clone();
    p.set_requires_grad(true);
    Adam opt(p.encoder_group());
    const auto l = pretrain_step(batch, p, opt, 1e-3, desk());
    EXPECT_GE(l.mlm, 0.0);
    EXPECT_GE(l.mpm, 0.0);
    EXPECT_GE(l.tip, 0.0);
    return hash_tensors(p.encoder_group());
  };
  const auto h1 = run();
  EXPECT_EQ(h1, run());
  EXPECT_NE(h1, hash_tensors(base.encoder_group()));
}

TEST(Step, NonFiniteNamesComponent) {
  auto p = ModelParams<float>::init(desk(), 14);
  p.set_requires_grad(true);
  Adam opt(p.encoder_group());
  const auto batch = make_batch_of(8, 6);
  p.tip_b.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  const auto before = hash_tensors(p.encoder_group());
  try {
    pretrain_step(batch, p, opt, 1e-3, desk());
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("L_TIP"), std::string::npos) << e.what();
  }
  EXPECT_EQ(hash_tensors(p.encoder_group()), before);
}

TEST(Run, LogFormatAndFrozenExtractor) {
  const auto& f = fixture();
  auto extractor = vision::PatchFeatureExtractor::create(17, 128);
  const auto extractor_copy = extractor;
  auto params = ModelParams<float>::init(desk(), 15);
  PretrainConfig cfg;
  cfg.steps = 3;
  cfg.batch_size = 4;
  std::ostringstream log;
  const auto history = run_pretraining(f.corpus, f.features, desk(), cfg, params, &log);
  EXPECT_EQ(history.size(), 3u);
  EXPECT_EQ(extractor, extractor_copy);
  std::istringstream in(log.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step\tL_MLM\tL_MPM\tL_TIP\tlr");
  int rows = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), '\t'), 4);
    ++rows;
  }
  EXPECT_EQ(rows, 3);
}

TEST(Run, EveryComponentDecreases) {
  const auto& f = fixture();
  auto params = ModelParams<float>::init(desk(), 16);
  PretrainConfig cfg;
  cfg.steps = 200;
  cfg.batch_size = 16;
  EncoderConfig enc = desk();
  const auto h = run_pretraining(f.corpus, f.features, enc, cfg, params);
  auto window = [&](std::size_t begin, double StepLosses::*field) {
    double s = 0;
    for (std::size_t i = begin; i < begin + 20; ++i) s += h[i].*field;
    return s / 20;
  };
  for (auto field : {&StepLosses::mlm, &StepLosses::mpm, &StepLosses::tip}) {
    EXPECT_LT(window(180, field), window(0, field));
  }
}
