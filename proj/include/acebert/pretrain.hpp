#pragma once

// Cross-modal pretraining: masked language modelling, masked patch modelling
// and text-image pair prediction, optimised jointly on one mini-batch.

#include <cstdint>
#include <ostream>
#include <span>
#include <vector>

#include "acebert/encoder.hpp"
#include "acebert/features.hpp"
#include "acebert/optim.hpp"
#include "acebert/synth.hpp"

namespace acebert::pretrain {

enum class MaskAction { kMask, kRandom, kKeep };

struct MaskPlan {
  std::vector<std::size_t> text_positions;
  std::vector<MaskAction> actions;
  std::vector<std::int64_t> inputs;   // token written at each masked position
  std::vector<std::int64_t> targets;  // original token at each masked position
  std::vector<std::size_t> patch_indices;  // masked patch rows (0-based among patches)
};

// round(n * rate), at least 1 when n > 0.
std::size_t masked_count(std::size_t n, double rate);

// Text: masked_count(text tokens) positions, each 80% [MASK], 10% random
// vocabulary token, 10% unchanged. Patches: masked_count(patches) rows.
// Pixel positions are never selected.
MaskPlan plan_masks(const InputSequence& seq, std::uint64_t seed, int vocab_size, double text_rate = 0.15,
                    double patch_rate = 0.15);

// Writes the plan's input tokens and zero flags into a copy of `seq`.
InputSequence apply_masks(const InputSequence& seq, const MaskPlan& plan);

// Mean over rows of -log softmax(logits)[target]; zero for no rows.
template <class T>
BasicTensor<T> mlm_loss(const BasicTensor<T>& logits, std::span<const std::int64_t> targets);

// Mean over rows of KL(softmax(raw) || softmax(predicted)), with both
// probability vectors clamped at 1e-8 inside the logs. `raw_targets` is a
// constant.
template <class T>
BasicTensor<T> mpm_loss(const BasicTensor<T>& predicted, const BasicTensor<T>& raw_targets);

// Mean binary cross-entropy of scores in (0, 1) against 0/1 labels, scores
// clamped to [1e-7, 1 - 1e-7].
template <class T>
BasicTensor<T> tip_loss(const BasicTensor<T>& scores, std::span<const int> labels);

struct TipPair {
  std::size_t title_product = 0;
  std::size_t image_product = 0;
  int label = 0;
};

// One epoch: every product contributes (own title, own image, 1) and three
// (own title, image of a uniformly drawn different product, 0), shuffled.
std::vector<TipPair> sample_tip_pairs(std::size_t n_products, std::uint64_t seed);

struct PretrainConfig {
  std::size_t steps = 600;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double warmup_fraction = 0.1;
  double text_mask_rate = 0.15;
  double patch_mask_rate = 0.15;
  double max_grad_norm = 1.0;
  int max_text_len = 48;
  bool use_patch = true;
  bool use_pixel = true;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Instance {
  InputSequence seq;  // masks applied
  MaskPlan plan;
  int label = 0;
};

// Title of one product paired with the image features of another (or the
// same). MLM/MPM masks are planned only for aligned pairs.
Instance make_instance(const synth::Corpus& corpus, const std::vector<ProductFeatures>& features,
                       const TipPair& pair, const PretrainConfig& config, const EncoderConfig& encoder,
                       std::uint64_t mask_seed);

template <class T>
struct TaskLosses {
  BasicTensor<T> mlm, mpm, tip;
  BasicTensor<T> total() const;
};

template <class T>
TaskLosses<T> compute_losses(const std::vector<Instance>& batch, const ModelParams<T>& params,
                             const EncoderConfig& encoder, DropoutContext dropout = {});

struct StepLosses {
  double mlm = 0, mpm = 0, tip = 0;
};

// One joint backward pass and one optimizer update. A non-finite component
// aborts the step (no update) with a NumericError naming it.
StepLosses pretrain_step(const std::vector<Instance>& batch, const ModelParams<float>& params, Adam& optimizer,
                         double lr, const EncoderConfig& encoder, DropoutContext dropout = {});

// Full run over repeated TIP epochs. When `log` is set, writes one TSV row
// per step: step, L_MLM, L_MPM, L_TIP, lr.
std::vector<StepLosses> run_pretraining(const synth::Corpus& corpus, const std::vector<ProductFeatures>& features,
                                        const EncoderConfig& encoder, const PretrainConfig& config,
                                        ModelParams<float>& params, std::ostream* log = nullptr);

}  // namespace acebert::pretrain
