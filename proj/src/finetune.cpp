#include "acebert/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <set>

#include "acebert/errors.hpp"
#include "acebert/ops.hpp"
#include "acebert/random.hpp"

namespace acebert::finetune {

HotQueryTable compute_hot_queries(const std::vector<synth::Click>& clicks, int limit) {
  if (limit < 0) throw ConfigError("hot_limit must be >= 0");
  return synth::hot_queries_by_product(clicks, limit);
}

void write_hot_query_table(std::ostream& out, const HotQueryTable& table) {
  std::vector<std::int64_t> ids;
  for (const auto& [pid, _] : table) ids.push_back(pid);
  std::sort(ids.begin(), ids.end());
  for (auto pid : ids) {
    out << pid << '\t';
    const auto& qs = table.at(pid);
    for (std::size_t i = 0; i < qs.size(); ++i) out << (i ? "," : "") << qs[i];
    out << '\n';
  }
}

void FinetuneConfig::validate() const {
  if (steps == 0) throw ConfigError("finetune.steps must be positive");
  if (batch_size < 2) throw ConfigError("finetune.batch_size must be >= 2");
  if (!(lr > 0)) throw ConfigError("finetune.lr must be positive");
  if (!(disc_lr > 0)) throw ConfigError("finetune.disc_lr must be positive");
  if (warmup_fraction < 0 || warmup_fraction >= 1) throw ConfigError("finetune.warmup_fraction must be in [0, 1)");
  if (!(gamma > 0)) throw ConfigError("finetune.gamma must be positive");
  if (adv_weight < 0) throw ConfigError("finetune.adv_weight must be >= 0");
  if (disc_every < 1) throw ConfigError("finetune.disc_every must be >= 1");
  if (partitions < 1) throw ConfigError("finetune.partitions must be >= 1");
  if (max_grad_norm < 0) throw ConfigError("finetune.max_grad_norm must be >= 0");
  if (hot_limit < 0) throw ConfigError("finetune.hot_limit must be >= 0");
  if (max_text_len < 4) throw ConfigError("finetune.max_text_len must be >= 4");
  if (max_query_len < 3) throw ConfigError("finetune.max_query_len must be >= 3");
}

SequenceBuilder::SequenceBuilder(const synth::Corpus& corpus, const std::vector<ProductFeatures>& features,
                                 HotQueryTable hot, const FinetuneConfig& config, const EncoderConfig& encoder)
    : corpus_(corpus), features_(features), hot_(std::move(hot)), config_(config), encoder_(encoder) {
  if (features.size() != corpus.products.size()) throw ConfigError("feature table does not match catalog");
  for (std::size_t i = 0; i < corpus.products.size(); ++i) product_index_[corpus.products[i].id] = i;
  for (std::size_t i = 0; i < corpus.queries.size(); ++i) query_index_[corpus.queries[i].id] = i;
}

std::size_t SequenceBuilder::product_index(std::int64_t id) const {
  const auto it = product_index_.find(id);
  if (it == product_index_.end()) throw IndexError("unknown product id " + std::to_string(id));
  return it->second;
}

std::size_t SequenceBuilder::query_index(std::int64_t id) const {
  const auto it = query_index_.find(id);
  if (it == query_index_.end()) throw IndexError("unknown query id " + std::to_string(id));
  return it->second;
}

InputSequence SequenceBuilder::query(std::int64_t query_id) const {
  return query_text(corpus_.queries[query_index(query_id)].tokens);
}

InputSequence SequenceBuilder::query_text(const std::vector<std::string>& tokens) const {
  return make_query_sequence(corpus_.vocab.encode(tokens), config_.max_query_len);
}

InputSequence SequenceBuilder::product(std::int64_t product_id, std::int64_t withheld_query) const {
  const auto idx = product_index(product_id);
  const auto& f = features_[idx];
  ProductInputs in;
  in.title_ids = corpus_.vocab.encode(corpus_.products[idx].title);
  if (config_.use_hot_query) {
    const auto it = hot_.find(product_id);
    if (it != hot_.end()) {
      for (auto qid : it->second) {
        if (qid == withheld_query) continue;
        in.hot_query_ids.push_back(corpus_.vocab.encode(corpus_.queries[query_index(qid)].tokens));
      }
    }
  }
  if (config_.use_patch) {
    in.patch_rows = f.patch_rows;
    in.n_patch = f.n_patch;
  }
  if (config_.use_pixel) {
    in.pixel_rows = f.pixel_rows;
    in.n_pixel = f.n_pixel;
  }
  return make_product_sequence(in, config_.max_text_len, encoder_.max_positions);
}

namespace {

template <class T>
void require_unit_rows(const BasicTensor<T>& x, const char* what) {
  if (x.rank() != 2) throw ShapeError(std::string(what) + " must be 2-D, got " + shape_str(x.shape()));
  const auto d = x.dim(1);
  const auto v = x.data();
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    double sq = 0;
    for (std::size_t j = 0; j < d; ++j) sq += static_cast<double>(v[r * d + j]) * v[r * d + j];
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-3) {
      throw Error(std::string(what) + " row " + std::to_string(r) + " is not unit norm");
    }
  }
}

template <class T>
BasicTensor<T> scaled_cosines(const BasicTensor<T>& q, const BasicTensor<T>& a, T gamma) {
  require_unit_rows(q, "query embeddings");
  require_unit_rows(a, "product embeddings");
  if (q.dim(0) != a.dim(0) || q.dim(1) != a.dim(1)) {
    throw ShapeError("query embeddings " + shape_str(q.shape()) + " vs product embeddings " + shape_str(a.shape()));
  }
  if (!(gamma > T(0))) throw ConfigError("gamma must be positive");
  return ops::scale(ops::matmul(q, ops::transpose(a)), gamma);
}

}  // namespace

template <class T>
BasicTensor<T> batch_probabilities(const BasicTensor<T>& queries, const BasicTensor<T>& products, T gamma) {
  return ops::softmax(scaled_cosines(queries, products, gamma));
}

template <class T>
BasicTensor<T> semantic_matching_loss(const BasicTensor<T>& queries, const BasicTensor<T>& products, T gamma) {
  const auto s = scaled_cosines(queries, products, gamma);
  const std::size_t w = s.dim(0);
  std::vector<std::int64_t> diag(w);
  std::iota(diag.begin(), diag.end(), 0);
  const auto q_to_a = ops::sum(ops::pick(ops::log_softmax(s), diag));
  const auto a_to_q = ops::sum(ops::pick(ops::log_softmax(ops::transpose(s)), diag));
  return ops::scale(ops::add(q_to_a, a_to_q), T(-1) / static_cast<T>(w));
}

template <class T>
BasicTensor<T> adversarial_loss_from_scores(const BasicTensor<T>& query_scores, const BasicTensor<T>& product_scores) {
  if (query_scores.shape() != product_scores.shape() || query_scores.numel() == 0) {
    throw ShapeError("discriminator scores " + shape_str(query_scores.shape()) + " vs " +
                     shape_str(product_scores.shape()));
  }
  constexpr T lo = T(1e-7);
  const auto dq = ops::clamp(query_scores, lo, T(1) - lo);
  const auto da = ops::clamp(product_scores, lo, T(1) - lo);
  const auto q_term = ops::sum(ops::log(dq));
  const auto a_term = ops::sum(ops::log(ops::add_scalar(ops::scale(da, T(-1)), T(1))));
  return ops::scale(ops::add(q_term, a_term), T(-1) / static_cast<T>(query_scores.numel()));
}

template <class T>
BasicTensor<T> adversarial_loss(const BasicTensor<T>& queries, const BasicTensor<T>& products,
                                const ModelParams<T>& params) {
  return adversarial_loss_from_scores(discriminate(queries, params), discriminate(products, params));
}

std::vector<Pair> build_pairs(const synth::Corpus& corpus, const std::vector<synth::Click>& clicks) {
  std::unordered_map<std::int64_t, int> category;
  for (const auto& p : corpus.products) category[p.id] = p.category;
  std::set<std::pair<std::int64_t, std::int64_t>> seen;
  std::vector<Pair> out;
  for (const auto& c : clicks) {
    if (!seen.insert({c.query_id, c.product_id}).second) continue;
    const auto it = category.find(c.product_id);
    if (it == category.end()) throw IndexError("click references unknown product " + std::to_string(c.product_id));
    out.push_back({c.query_id, c.product_id, it->second});
  }
  return out;
}

std::vector<Partition> partition_dataset(const std::vector<Pair>& pairs, std::size_t partition_count,
                                         std::uint64_t seed) {
  if (partition_count < 1) throw ConfigError("partition count must be >= 1");
  if (partition_count > pairs.size()) {
    throw ConfigError("partition count " + std::to_string(partition_count) + " exceeds dataset size " +
                      std::to_string(pairs.size()));
  }
  std::mt19937_64 rng(seed);
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < pairs.size(); ++i) groups[pairs[i].category].push_back(i);
  std::vector<int> order;
  for (auto& [cat, members] : groups) {
    order.push_back(cat);
    std::shuffle(members.begin(), members.end(), rng);
  }
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> flat;
  flat.reserve(pairs.size());
  for (int cat : order) flat.insert(flat.end(), groups[cat].begin(), groups[cat].end());

  std::vector<Partition> out(partition_count);
  const auto n = pairs.size();
  for (std::size_t p = 0; p < partition_count; ++p) {
    auto& part = out[p];
    part.id = static_cast<int>(p);
    for (std::size_t i = p * n / partition_count; i < (p + 1) * n / partition_count; ++i) {
      part.members.push_back(flat[i]);
      part.by_category[pairs[flat[i]].category].push_back(flat[i]);
    }
  }
  return out;
}

std::vector<std::size_t> sample_batch(const std::vector<Pair>& pairs, const std::vector<Partition>& partitions,
                                      std::size_t batch_size, std::mt19937_64& rng) {
  std::vector<std::size_t> eligible;
  for (std::size_t p = 0; p < partitions.size(); ++p) {
    std::set<std::int64_t> queries;
    for (auto i : partitions[p].members) {
      queries.insert(pairs[i].query_id);
      if (queries.size() >= batch_size) break;
    }
    if (queries.size() >= batch_size) eligible.push_back(p);
  }
  if (eligible.empty()) {
    throw ConfigError("no partition holds " + std::to_string(batch_size) +
                      " distinct queries; use a smaller batch size or fewer partitions");
  }
  std::uniform_int_distribution<std::size_t> pick_part(0, eligible.size() - 1);
  auto members = partitions[eligible[pick_part(rng)]].members;
  std::vector<std::size_t> batch;
  std::set<std::int64_t> used;
  for (std::size_t i = 0; i < members.size() && batch.size() < batch_size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, members.size() - 1);
    std::swap(members[i], members[pick(rng)]);
    if (used.insert(pairs[members[i]].query_id).second) batch.push_back(members[i]);
  }
  return batch;
}

double hard_negative_fraction(const std::vector<Pair>& pairs, const std::vector<std::size_t>& batch) {
  if (batch.size() < 2) return 0.0;
  std::size_t same = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (std::size_t j = 0; j < batch.size(); ++j) {
      if (i != j && pairs[batch[i]].category == pairs[batch[j]].category) ++same;
    }
  }
  return static_cast<double>(same) / static_cast<double>(batch.size() * (batch.size() - 1));
}

BatchSequences assemble(const SequenceBuilder& builder, const std::vector<Pair>& pairs,
                        const std::vector<std::size_t>& batch) {
  BatchSequences out;
  for (auto i : batch) {
    out.queries.push_back(builder.query(pairs[i].query_id));
    out.products.push_back(builder.product(pairs[i].product_id, pairs[i].query_id));
  }
  return out;
}

namespace {

struct TowerOutputs {
  Tensor queries, products;
};

TowerOutputs run_towers(const BatchSequences& batch, const ModelParams<float>& params, const EncoderConfig& encoder,
                        DropoutContext dropout) {
  std::vector<const InputSequence*> qs, ps;
  for (const auto& s : batch.queries) qs.push_back(&s);
  for (const auto& s : batch.products) ps.push_back(&s);
  const auto qb = make_batch(qs, encoder);
  const auto pb = make_batch(ps, encoder);
  return {pool_embedding(encode_hidden(qb, params, encoder, dropout), qb, params),
          pool_embedding(encode_hidden(pb, params, encoder, dropout), pb, params)};
}

void require_finite(double v, const char* phase, const char* name) {
  if (!std::isfinite(v)) throw NumericError(std::string("finetune ") + phase + " phase: non-finite " + name);
}

}  // namespace

PhaseLosses minimax_step(const BatchSequences& batch, const ModelParams<float>& params, Adam& encoder_opt,
                         Adam& disc_opt, Phase phase, double lr, const FinetuneConfig& config,
                         const EncoderConfig& encoder, DropoutContext dropout) {
  const float gamma = static_cast<float>(config.gamma);
  const char* tag = phase == Phase::kEncoder ? "encoder" : "discriminator";
  const bool adversarial = config.use_adversarial && config.adv_weight > 0;
  PhaseLosses out;
  GradTape tape;
  Tensor objective;
  try {
    TapeScope scope(tape);
    if (phase == Phase::kEncoder) {
      const auto towers = run_towers(batch, params, encoder, dropout);
      const auto main = semantic_matching_loss(towers.queries, towers.products, gamma);
      out.main = main.item();
      objective = main;
      if (adversarial) {
        const auto adv = adversarial_loss(towers.queries, towers.products, params);
        out.adv = adv.item();
        objective = ops::sub(main, ops::scale(adv, static_cast<float>(config.adv_weight)));
      }
    } else {
      TowerOutputs towers;
      {
        NoGradScope frozen;
        towers = run_towers(batch, params, encoder, dropout);
        out.main = semantic_matching_loss(towers.queries, towers.products, gamma).item();
      }
      objective = adversarial_loss(towers.queries.detach(), towers.products.detach(), params);
      out.adv = objective.item();
    }
  } catch (const NumericError& e) {
    throw NumericError(std::string("finetune ") + tag + " phase: " + e.what());
  }
  require_finite(out.main, tag, "L_main");
  require_finite(out.adv, tag, "L_adv");

  encoder_opt.zero_grad();
  disc_opt.zero_grad();
  {
    TapeScope scope(tape);
    tape.backward(objective);
  }
  if (phase == Phase::kEncoder) {
    encoder_opt.step(lr);
  } else {
    disc_opt.step(lr);
  }
  encoder_opt.zero_grad();
  disc_opt.zero_grad();
  return out;
}

std::vector<StepRecord> run_finetuning(const synth::Corpus& corpus, const std::vector<ProductFeatures>& features,
                                       const EncoderConfig& encoder, const FinetuneConfig& config,
                                       ModelParams<float>& params, std::ostream* log) {
  config.validate();
  encoder.validate();
  const auto train = corpus.train_clicks();
  HotQueryTable hot;
  if (config.use_hot_query) hot = compute_hot_queries(train, config.hot_limit);
  const SequenceBuilder builder(corpus, features, std::move(hot), config, encoder);
  const auto pairs = build_pairs(corpus, train);
  const auto parts = partition_dataset(pairs, config.partitions, derive_seed(config.seed, "finetune.partition"));

  params.set_requires_grad(true);
  const AdamConfig adam{0.9, 0.999, 1e-8, config.max_grad_norm};
  Adam encoder_opt(params.encoder_group(), adam);
  Adam disc_opt(params.discriminator_group(), adam);
  const LinearSchedule schedule{config.lr, config.steps, config.warmup_fraction};
  std::mt19937_64 batch_rng(derive_seed(config.seed, "finetune.batch"));
  std::mt19937_64 drop_rng(derive_seed(config.seed, "finetune.dropout"));
  const DropoutContext dropout{encoder.dropout, encoder.dropout > 0 ? &drop_rng : nullptr};
  const bool adversarial = config.use_adversarial && config.adv_weight > 0;

  if (log) *log << "step\tphase\tL_main\tL_adv\tlr\n";
  std::vector<StepRecord> history;
  const auto record = [&](std::size_t step, Phase phase, const PhaseLosses& l, double lr) {
    history.push_back({step, phase, l, lr});
    if (log) {
      *log << step << '\t' << (phase == Phase::kEncoder ? "encoder" : "discriminator") << '\t'
           << std::setprecision(6) << l.main << '\t' << l.adv << '\t' << lr << '\n';
    }
  };
  for (std::size_t step = 0; step < config.steps; ++step) {
    const double lr = schedule.at(step);
    const auto batch = assemble(builder, pairs, sample_batch(pairs, parts, config.batch_size, batch_rng));
    record(step, Phase::kEncoder,
           minimax_step(batch, params, encoder_opt, disc_opt, Phase::kEncoder, lr, config, encoder, dropout), lr);
    if (adversarial && (step + 1) % static_cast<std::size_t>(config.disc_every) == 0) {
      const auto disc_batch = assemble(builder, pairs, sample_batch(pairs, parts, config.batch_size, batch_rng));
      record(step, Phase::kDiscriminator,
             minimax_step(disc_batch, params, encoder_opt, disc_opt, Phase::kDiscriminator, config.disc_lr, config,
                          encoder, dropout),
             config.disc_lr);
    }
  }
  return history;
}

#define ACEBERT_INSTANTIATE_FINETUNE(T)                                                                       \
  template BasicTensor<T> batch_probabilities(const BasicTensor<T>&, const BasicTensor<T>&, T);               \
  template BasicTensor<T> semantic_matching_loss(const BasicTensor<T>&, const BasicTensor<T>&, T);            \
  template BasicTensor<T> adversarial_loss_from_scores(const BasicTensor<T>&, const BasicTensor<T>&);         \
  template BasicTensor<T> adversarial_loss(const BasicTensor<T>&, const BasicTensor<T>&, const ModelParams<T>&);

ACEBERT_INSTANTIATE_FINETUNE(float)
ACEBERT_INSTANTIATE_FINETUNE(double)

}  // namespace acebert::finetune
