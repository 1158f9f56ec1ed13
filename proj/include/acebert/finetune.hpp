#pragma once

// Dual-encoder fine-tuning: in-batch softmax matching in both directions,
// hot-query product augmentation, a domain discriminator trained in
// alternation with the encoder, and the partitioned in-batch negative
// sampler.

#include <cstdint>
#include <map>
#include <ostream>
#include <random>
#include <unordered_map>
#include <vector>

#include "acebert/encoder.hpp"
#include "acebert/features.hpp"
#include "acebert/optim.hpp"
#include "acebert/synth.hpp"

namespace acebert::finetune {

// product id -> query ids, most clicked first (ties by lower query id).
using HotQueryTable = std::unordered_map<std::int64_t, std::vector<std::int64_t>>;

HotQueryTable compute_hot_queries(const std::vector<synth::Click>& clicks, int limit = 10);

// "product_id<TAB>q1,q2,..." per product, ascending product id.
void write_hot_query_table(std::ostream& out, const HotQueryTable& table);

struct FinetuneConfig {
  std::size_t steps = 1000;  // encoder steps; discriminator steps come on top
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double disc_lr = 1e-3;
  double warmup_fraction = 0.1;
  double gamma = 20.0;
  double adv_weight = 0.3;
  int disc_every = 1;  // k encoder steps per discriminator step
  std::size_t partitions = 1;
  double max_grad_norm = 1.0;
  int hot_limit = 10;
  int max_text_len = 48;
  int max_query_len = 16;
  bool use_patch = true;
  bool use_pixel = true;
  bool use_hot_query = true;
  bool use_adversarial = true;
  std::uint64_t seed = 1;

  void validate() const;
};

// Input assembly shared by training, evaluation and export.
class SequenceBuilder {
 public:
  SequenceBuilder(const synth::Corpus& corpus, const std::vector<ProductFeatures>& features, HotQueryTable hot,
                  const FinetuneConfig& config, const EncoderConfig& encoder);

  InputSequence query(std::int64_t query_id) const;
  InputSequence query_text(const std::vector<std::string>& tokens) const;
  // `withheld_query` is left out of the product's hot queries.
  InputSequence product(std::int64_t product_id, std::int64_t withheld_query = -1) const;

  std::size_t product_index(std::int64_t product_id) const;
  std::size_t query_index(std::int64_t query_id) const;
  const HotQueryTable& hot() const { return hot_; }

 private:
  const synth::Corpus& corpus_;
  const std::vector<ProductFeatures>& features_;
  HotQueryTable hot_;
  FinetuneConfig config_;
  EncoderConfig encoder_;
  std::unordered_map<std::int64_t, std::size_t> product_index_, query_index_;
};

// P[i][j] = softmax_j(gamma * q_i . a_j). Rows must be unit norm.
template <class T>
BasicTensor<T> batch_probabilities(const BasicTensor<T>& queries, const BasicTensor<T>& products, T gamma);

// -(1/W) [sum_i log P(a_i | q_i) + sum_i log P(q_i | a_i)].
template <class T>
BasicTensor<T> semantic_matching_loss(const BasicTensor<T>& queries, const BasicTensor<T>& products, T gamma);

// -(1/W) sum_i [log D(q_i) + log(1 - D(a_i))] from discriminator outputs,
// clamped to [1e-7, 1 - 1e-7].
template <class T>
BasicTensor<T> adversarial_loss_from_scores(const BasicTensor<T>& query_scores, const BasicTensor<T>& product_scores);

template <class T>
BasicTensor<T> adversarial_loss(const BasicTensor<T>& queries, const BasicTensor<T>& products,
                                const ModelParams<T>& params);

// One training pair: a query and a product it was clicked with.
struct Pair {
  std::int64_t query_id = 0;
  std::int64_t product_id = 0;
  int category = 0;
};

// Distinct (query, product) pairs from the clicks, in first-seen order.
std::vector<Pair> build_pairs(const synth::Corpus& corpus, const std::vector<synth::Click>& clicks);

struct Partition {
  int id = 0;
  std::vector<std::size_t> members;  // indices into the pair list
  std::map<int, std::vector<std::size_t>> by_category;
};

// P disjoint partitions of near-equal size covering every pair. Pairs are
// grouped by category (category order and order within a category are
// random) before being cut into contiguous chunks, so a partition spans
// about C/P categories when P < C.
std::vector<Partition> partition_dataset(const std::vector<Pair>& pairs, std::size_t partition_count,
                                         std::uint64_t seed);

// W pairs with distinct queries drawn uniformly from one partition chosen
// uniformly among those that can supply W distinct queries.
std::vector<std::size_t> sample_batch(const std::vector<Pair>& pairs, const std::vector<Partition>& partitions,
                                      std::size_t batch_size, std::mt19937_64& rng);

// Fraction of ordered in-batch negative pairs (i != j) sharing a category.
double hard_negative_fraction(const std::vector<Pair>& pairs, const std::vector<std::size_t>& batch);

enum class Phase { kEncoder, kDiscriminator };

struct BatchSequences {
  std::vector<InputSequence> queries;
  std::vector<InputSequence> products;
};

// Each training product omits its own pair's query from its hot queries, so
// the match cannot be made by copying the query text.
BatchSequences assemble(const SequenceBuilder& builder, const std::vector<Pair>& pairs,
                        const std::vector<std::size_t>& batch);

struct PhaseLosses {
  double main = 0;
  double adv = 0;
};

// Encoder phase: one step of `encoder_opt` on L_main - adv_weight * L_adv
// (adv_weight 0 skips the discriminator). Discriminator phase: one step of
// `disc_opt` on L_adv over detached embeddings. Parameters outside the
// stepped group are never written.
PhaseLosses minimax_step(const BatchSequences& batch, const ModelParams<float>& params, Adam& encoder_opt,
                         Adam& disc_opt, Phase phase, double lr, const FinetuneConfig& config,
                         const EncoderConfig& encoder, DropoutContext dropout = {});

struct StepRecord {
  std::size_t step = 0;
  Phase phase = Phase::kEncoder;
  PhaseLosses losses;
  double lr = 0;
};

// Full alternating run. `log` receives TSV rows: step, phase, L_main, L_adv, lr.
std::vector<StepRecord> run_finetuning(const synth::Corpus& corpus, const std::vector<ProductFeatures>& features,
                                       const EncoderConfig& encoder, const FinetuneConfig& config,
                                       ModelParams<float>& params, std::ostream* log = nullptr);

}  // namespace acebert::finetune
