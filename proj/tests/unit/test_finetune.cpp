#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "acebert/errors.hpp"
#include "acebert/finetune.hpp"
#include "acebert/grad_check.hpp"
#include "acebert/retrieval.hpp"

using namespace acebert;
using namespace acebert::finetune;

namespace {

EncoderConfig desk() {
  EncoderConfig c;
  c.dropout = 0.0;
  return c;
}

TensorD rows(std::size_t n, std::size_t d, std::vector<double> v) { return TensorD::from({n, d}, std::move(v)); }

// n unit rows of width d, all equal.
TensorD identical(std::size_t n, std::size_t d) {
  std::vector<double> v(n * d, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * d] = 1.0;
  return rows(n, d, v);
}

TensorD random_unit(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<double> v(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0;
    for (std::size_t j = 0; j < d; ++j) {
      v[i * d + j] = g(rng);
      norm += v[i * d + j] * v[i * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) v[i * d + j] /= std::sqrt(norm);
  }
  return rows(n, d, v);
}

const synth::Corpus& corpus() {
  static const synth::Corpus c = [] {
    synth::CorpusConfig cc;
    cc.seed = 11;
    return synth::generate_corpus(cc);
  }();
  return c;
}

struct Small {
  synth::Corpus corpus;
  std::vector<ProductFeatures> features;
};

const Small& small() {
  static const Small s = [] {
    synth::CorpusConfig cc;
    cc.n_products = 120;
    cc.n_queries = 40;
    cc.seed = 5;
    Small out;
    out.corpus = synth::generate_corpus(cc);
    const auto extractor = vision::PatchFeatureExtractor::create(9, 128);
    out.features = compute_catalog_features(out.corpus.products, extractor, ImageFeatureConfig{});
    return out;
  }();
  return s;
}

}  // namespace

TEST(HotQueries, OrderedByCountThenId) {
  std::vector<synth::Click> clicks = {{7, 1, 0, 2}, {3, 1, 0, 5}, {9, 1, 0, 2}};
  const auto table = compute_hot_queries(clicks);
  EXPECT_EQ(table.at(1), (std::vector<std::int64_t>{3, 7, 9}));
}

TEST(HotQueries, CountsAggregateAcrossDays) {
  std::vector<synth::Click> clicks = {{4, 2, 0, 1}, {4, 2, 1, 1}, {4, 2, 2, 1}, {1, 2, 0, 2}};
  EXPECT_EQ(compute_hot_queries(clicks).at(2), (std::vector<std::int64_t>{4, 1}));
}

TEST(HotQueries, KeepsAtMostTen) {
  std::vector<synth::Click> clicks;
  for (int q = 0; q < 14; ++q) clicks.push_back({q, 0, 0, 20 - q});
  const auto list = compute_hot_queries(clicks).at(0);
  ASSERT_EQ(list.size(), 10u);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(list[i], i);
}

TEST(HotQueries, EmptyLogGivesEmptyTable) { EXPECT_TRUE(compute_hot_queries({}).empty()); }

TEST(HotQueries, TableExportIsSortedTsv) {
  std::vector<synth::Click> clicks = {{1, 5, 0, 1}, {2, 3, 0, 3}, {4, 3, 0, 1}};
  std::ostringstream out;
  write_hot_query_table(out, compute_hot_queries(clicks));
  EXPECT_EQ(out.str(), "3\t2,4\n5\t1\n");
}

TEST(HotQueries, ProductSequenceFollowsTableOrder) {
  const auto& s = small();
  const auto pid = s.corpus.products[0].id;
  HotQueryTable hot{{pid, {s.corpus.queries[2].id, s.corpus.queries[0].id}}};
  FinetuneConfig cfg;
  const SequenceBuilder builder(s.corpus, s.features, hot, cfg, desk());
  const auto seq = builder.product(pid);
  const auto& vocab = s.corpus.vocab;
  std::vector<std::int64_t> hot_tokens;
  for (std::size_t i = 0; i < seq.length(); ++i) {
    if (seq.segment_ids[i] == 1 && seq.token_ids[i] != vocab.id("[SEP]")) hot_tokens.push_back(seq.token_ids[i]);
  }
  std::vector<std::int64_t> expected;
  for (int q : {2, 0}) {
    for (const auto& t : s.corpus.queries[q].tokens) expected.push_back(vocab.id(t));
  }
  EXPECT_EQ(hot_tokens, expected);
}

TEST(HotQueries, DisabledBuilderIgnoresTable) {
  const auto& s = small();
  const auto pid = s.corpus.products[0].id;
  HotQueryTable hot{{pid, {s.corpus.queries[0].id}}};
  FinetuneConfig on, off;
  off.use_hot_query = false;
  const SequenceBuilder with(s.corpus, s.features, hot, on, desk());
  const SequenceBuilder without(s.corpus, s.features, hot, off, desk());
  EXPECT_GT(with.product(pid).length(), without.product(pid).length());
}

TEST(BatchProbabilities, IdenticalRowsAreUniform) {
  const auto p = batch_probabilities(identical(5, 4), identical(5, 4), 20.0);
  for (double v : p.data()) EXPECT_NEAR(v, 0.2, 1e-12);
}

TEST(BatchProbabilities, TwoByTwoClosedForm) {
  const auto q = rows(2, 2, {1, 0, 0, 1});
  const auto a = rows(2, 2, {1, 0, 0, 1});
  const auto p = batch_probabilities(q, a, 1.0);
  const double e = std::exp(1.0);
  EXPECT_NEAR(p.at(0), e / (e + 1), 1e-6);
  EXPECT_NEAR(p.at(1), 1 / (e + 1), 1e-6);
  EXPECT_NEAR(p.at(0), 0.731, 5e-4);
}

TEST(BatchProbabilities, SmallGammaApproachesUniform) {
  const auto p = batch_probabilities(random_unit(6, 8, 1), random_unit(6, 8, 2), 1e-9);
  for (double v : p.data()) EXPECT_NEAR(v, 1.0 / 6, 1e-8);
}

TEST(BatchProbabilities, RowsSumToOne) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto p = batch_probabilities(random_unit(7, 16, seed), random_unit(7, 16, seed + 100), 20.0);
    for (std::size_t i = 0; i < 7; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 7; ++j) s += p.at(i * 7 + j);
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  }
}

TEST(BatchProbabilities, RejectsNonUnitRows) {
  EXPECT_THROW(batch_probabilities(rows(2, 2, {2, 0, 0, 1}), identical(2, 2), 1.0), Error);
}

TEST(SemanticMatching, IdenticalEmbeddingsGiveTwoLogW) {
  for (std::size_t w : {2u, 4u, 9u}) {
    EXPECT_NEAR(semantic_matching_loss(identical(w, 3), identical(w, 3), 20.0).item(), 2 * std::log(double(w)), 1e-6);
  }
  EXPECT_NEAR(semantic_matching_loss(identical(4, 3), identical(4, 3), 20.0).item(), 2.7726, 1e-4);
}

TEST(SemanticMatching, SeparatedPairsNearZero) {
  // Antipodal pair: diagonal cosine 1, off-diagonal -1.
  const auto q = rows(2, 1, {1, -1});
  EXPECT_NEAR(semantic_matching_loss(q, q, 10.0).item(), 2 * std::log1p(std::exp(-20.0)), 1e-12);
  // W=4 with the same cosine pattern: 2 ln(1 + 3e^-20), about 1.24e-8.
  EXPECT_NEAR(2 * std::log1p(3 * std::exp(-20.0)), 1.2366e-8, 1e-11);
}

TEST(SemanticMatching, SymmetricUnderSwap) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto q = random_unit(6, 12, seed), a = random_unit(6, 12, seed + 50);
    EXPECT_NEAR(semantic_matching_loss(q, a, 20.0).item(), semantic_matching_loss(a, q, 20.0).item(), 1e-10);
  }
}

TEST(SemanticMatching, MatchesDirectSum) {
  const auto q = random_unit(5, 8, 3), a = random_unit(5, 8, 4);
  const double gamma = 7.0;
  double total = 0;
  for (int dir = 0; dir < 2; ++dir) {
    const auto& x = dir == 0 ? q : a;
    const auto& y = dir == 0 ? a : q;
    for (std::size_t i = 0; i < 5; ++i) {
      std::vector<double> s(5);
      for (std::size_t j = 0; j < 5; ++j) {
        for (std::size_t k = 0; k < 8; ++k) s[j] += gamma * x.at(i * 8 + k) * y.at(j * 8 + k);
      }
      double z = 0;
      for (double v : s) z += std::exp(v);
      total += std::log(z) - s[i];
    }
  }
  EXPECT_NEAR(semantic_matching_loss(q, a, gamma).item(), total / 5, 1e-9);
}

TEST(Adversarial, HalfScoresGiveTwoLogTwo) {
  const auto half = TensorD::full({4, 1}, 0.5);
  EXPECT_NEAR(adversarial_loss_from_scores(half, half).item(), 2 * std::log(2.0), 1e-6);
}

TEST(Adversarial, PerfectAndInvertedDiscriminators) {
  const auto ones = TensorD::full({3, 1}, 1.0), zeros = TensorD::full({3, 1}, 0.0);
  EXPECT_NEAR(adversarial_loss_from_scores(ones, zeros).item(), 0.0, 1e-6);
  const double inverted = adversarial_loss_from_scores(zeros, ones).item();
  EXPECT_NEAR(inverted, -2 * std::log(1e-7), 1e-6);
  EXPECT_NEAR(inverted, 32.2, 0.05);
}

TEST(Adversarial, HeadGradientMatchesFiniteDifferences) {
  const auto params = ModelParams<double>::init(desk(), 4);
  const auto q = random_unit(6, 32, 18), a = random_unit(6, 32, 19);
  params.set_requires_grad(true);
  // A small step keeps perturbations clear of ReLU kinks in the hidden layer.
  const std::function<TensorD()> loss = [&] { return adversarial_loss(q, a, params); };
  for (const auto& w : {params.disc_w1, params.disc_b1, params.disc_w2, params.disc_b2}) {
    const auto r = check_parameter_gradient<double>(loss, w, 1e-6, sample_indices(w.numel(), 12, 1));
    EXPECT_LT(r.max_rel_error, 1e-3);
  }
}

TEST(Adversarial, DiscriminatorPhasesApproachLinearProbe) {
  // Two overlapping Gaussian clouds on the sphere, frozen; the
  // discriminator alone is trained and compared with a logistic probe.
  const std::size_t n = 400, d = 32;
  std::mt19937_64 rng(21);
  std::normal_distribution<float> g;
  std::vector<float> qv(n * d), av(n * d);
  auto fill = [&](std::vector<float>& v, float shift) {
    for (std::size_t i = 0; i < n; ++i) {
      float norm = 0;
      for (std::size_t j = 0; j < d; ++j) {
        v[i * d + j] = g(rng) + (j == 0 ? shift : 0.0f);
        norm += v[i * d + j] * v[i * d + j];
      }
      for (std::size_t j = 0; j < d; ++j) v[i * d + j] /= std::sqrt(norm);
    }
  };
  fill(qv, 1.5f);
  fill(av, -1.5f);
  const double probe = retrieval::linear_probe_accuracy(qv, av, d, 3);

  const auto params = ModelParams<float>::init(desk(), 6);
  params.set_requires_grad(true);
  Adam opt(params.discriminator_group(), AdamConfig{});
  const auto q = Tensor::from({n, d}, qv), a = Tensor::from({n, d}, av);
  for (int step = 0; step < 300; ++step) {
    GradTape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = adversarial_loss(q, a, params);
    }
    opt.zero_grad();
    tape.backward(loss);
    opt.step(1e-2);
  }
  NoGradScope frozen;
  const auto dq = discriminate(q, params), da = discriminate(a, params);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) correct += (dq.at(i) > 0.5f) + (da.at(i) < 0.5f);
  const double acc = double(correct) / (2 * n);
  EXPECT_GT(probe, 0.85);
  EXPECT_GE(acc, probe - 0.05);
}

TEST(Pairs, DistinctAndCategorised) {
  const auto& c = corpus();
  const auto pairs = build_pairs(c, c.train_clicks());
  std::set<std::pair<std::int64_t, std::int64_t>> seen;
  for (const auto& p : pairs) {
    EXPECT_TRUE(seen.insert({p.query_id, p.product_id}).second);
    EXPECT_EQ(p.category, c.products[static_cast<std::size_t>(p.product_id)].category);
  }
  EXPECT_FALSE(pairs.empty());
}

TEST(Partitions, SingleCoversEverything) {
  const auto& c = corpus();
  const auto pairs = build_pairs(c, c.train_clicks());
  const auto parts = partition_dataset(pairs, 1, 1);
  ASSERT_EQ(parts.size(), 1u);
  EXPECT_EQ(parts[0].members.size(), pairs.size());
}

TEST(Partitions, DisjointCoverWithBalancedSizes) {
  const auto& c = corpus();
  const auto pairs = build_pairs(c, c.train_clicks());
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (std::size_t p : {4u, 16u}) {
      const auto parts = partition_dataset(pairs, p, seed);
      ASSERT_EQ(parts.size(), p);
      std::set<std::size_t> all;
      for (const auto& part : parts) {
        const double expected = double(pairs.size()) / p;
        EXPECT_LE(std::abs(double(part.members.size()) - expected), 0.1 * expected);
        std::size_t indexed = 0;
        for (const auto& [cat, members] : part.by_category) {
          indexed += members.size();
          for (auto m : members) EXPECT_EQ(pairs[m].category, cat);
        }
        EXPECT_EQ(indexed, part.members.size());
        for (auto m : part.members) EXPECT_TRUE(all.insert(m).second);
      }
      EXPECT_EQ(all.size(), pairs.size());
    }
  }
}

TEST(Partitions, RejectsBadCounts) {
  const auto& c = corpus();
  const auto pairs = build_pairs(c, c.train_clicks());
  EXPECT_THROW(partition_dataset(pairs, 0, 1), ConfigError);
  EXPECT_THROW(partition_dataset(pairs, pairs.size() + 1, 1), ConfigError);
}

TEST(Sampling, BatchHasDistinctQueries) {
  const auto& c = corpus();
  const auto pairs = build_pairs(c, c.train_clicks());
  const auto parts = partition_dataset(pairs, 4, 2);
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const auto batch = sample_batch(pairs, parts, 16, rng);
    ASSERT_EQ(batch.size(), 16u);
    std::set<std::int64_t> queries;
    for (auto i : batch) queries.insert(pairs[i].query_id);
    EXPECT_EQ(queries.size(), 16u);
  }
}

TEST(Sampling, OneItemPartitionsCannotFillBatch) {
  const auto& c = corpus();
  const auto pairs = build_pairs(c, c.train_clicks());
  const auto parts = partition_dataset(pairs, pairs.size(), 1);
  std::mt19937_64 rng(1);
  EXPECT_THROW(sample_batch(pairs, parts, 2, rng), ConfigError);
}

TEST(Sampling, SingleCategoryIsAllHard) {
  std::vector<Pair> pairs;
  for (int i = 0; i < 64; ++i) pairs.push_back({i, i, 3});
  std::mt19937_64 rng(1);
  for (std::size_t p : {1u, 4u}) {
    const auto parts = partition_dataset(pairs, p, 7);
    EXPECT_DOUBLE_EQ(hard_negative_fraction(pairs, sample_batch(pairs, parts, 8, rng)), 1.0);
  }
}

TEST(Sampling, HardNegativeFractionRisesWithPartitions) {
  const auto& c = corpus();
  const auto pairs = build_pairs(c, c.train_clicks());
  double previous = -1;
  for (std::size_t p : {1u, 4u, 16u}) {
    const auto parts = partition_dataset(pairs, p, 5);
    std::mt19937_64 rng(9);
    double total = 0;
    for (int t = 0; t < 1000; ++t) total += hard_negative_fraction(pairs, sample_batch(pairs, parts, 16, rng));
    const double mean = total / 1000;
    EXPECT_GT(mean, previous) << "P=" << p;
    previous = mean;
  }
}

TEST(Minimax, PhasesFreezeTheOtherGroup) {
  const auto& s = small();
  FinetuneConfig cfg;
  cfg.batch_size = 4;
  const auto hot = compute_hot_queries(s.corpus.train_clicks());
  const SequenceBuilder builder(s.corpus, s.features, hot, cfg, desk());
  const auto pairs = build_pairs(s.corpus, s.corpus.train_clicks());
  const auto parts = partition_dataset(pairs, 1, 1);
  std::mt19937_64 rng(4);
  const auto batch = assemble(builder, pairs, sample_batch(pairs, parts, 4, rng));

  const auto params = ModelParams<float>::init(desk(), 2);
  params.set_requires_grad(true);
  Adam enc(params.encoder_group(), AdamConfig{}), disc(params.discriminator_group(), AdamConfig{});

  auto enc_hash = hash_tensors(params.encoder_group()), disc_hash = hash_tensors(params.discriminator_group());
  const auto l1 = minimax_step(batch, params, enc, disc, Phase::kEncoder, 1e-3, cfg, desk());
  EXPECT_EQ(hash_tensors(params.discriminator_group()), disc_hash);
  EXPECT_NE(hash_tensors(params.encoder_group()), enc_hash);
  EXPECT_GT(l1.adv, 0.0);

  enc_hash = hash_tensors(params.encoder_group());
  minimax_step(batch, params, enc, disc, Phase::kDiscriminator, 1e-3, cfg, desk());
  EXPECT_EQ(hash_tensors(params.encoder_group()), enc_hash);
  EXPECT_NE(hash_tensors(params.discriminator_group()), disc_hash);
}

TEST(Minimax, NonFiniteLossNamesPhase) {
  const auto& s = small();
  FinetuneConfig cfg;
  const SequenceBuilder builder(s.corpus, s.features, {}, cfg, desk());
  const auto pairs = build_pairs(s.corpus, s.corpus.train_clicks());
  const auto batch = assemble(builder, pairs, {0, 1, 2});
  auto params = ModelParams<float>::init(desk(), 2);
  params.set_requires_grad(true);
  Adam enc(params.encoder_group(), AdamConfig{}), disc(params.discriminator_group(), AdamConfig{});
  params.disc_b2.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    minimax_step(batch, params, enc, disc, Phase::kDiscriminator, 1e-3, cfg, desk());
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("discriminator phase"), std::string::npos);
  }
}

TEST(Finetune, ShortRunLowersMatchingLossAndLogs) {
  const auto& s = small();
  FinetuneConfig cfg;
  cfg.steps = 60;
  cfg.batch_size = 8;
  auto params = ModelParams<float>::init(desk(), 3);
  std::ostringstream log;
  const auto history = run_finetuning(s.corpus, s.features, desk(), cfg, params, &log);
  double first = 0, last = 0;
  std::size_t nf = 0, nl = 0;
  for (const auto& r : history) {
    if (r.phase != Phase::kEncoder) continue;
    if (r.step < 10) first += r.losses.main, ++nf;
    if (r.step >= cfg.steps - 10) last += r.losses.main, ++nl;
  }
  EXPECT_LT(last / nl, first / nf);
  EXPECT_EQ(log.str().substr(0, log.str().find('\n')), "step\tphase\tL_main\tL_adv\tlr");
}

TEST(Finetune, ConfigValidation) {
  FinetuneConfig c;
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.disc_every = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.gamma = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}
