#include "acebert/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>

#include "acebert/errors.hpp"
#include "acebert/ops.hpp"
#include "acebert/random.hpp"

namespace acebert::pretrain {

using synth::Vocabulary;

std::size_t masked_count(std::size_t n, double rate) {
  if (n == 0) return 0;
  const auto k = static_cast<std::size_t>(std::llround(static_cast<double>(n) * rate));
  return std::clamp<std::size_t>(k, 1, n);
}

namespace {

// k distinct picks from [0, n), returned in ascending order.
std::vector<std::size_t> choose(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

MaskPlan plan_masks(const InputSequence& seq, std::uint64_t seed, int vocab_size, double text_rate,
                    double patch_rate) {
  if (vocab_size <= Vocabulary::kNumSpecial) throw ConfigError("vocab_size must exceed the special tokens");
  std::mt19937_64 rng(seed);
  MaskPlan plan;
  const auto text = seq.maskable_text_positions();
  for (auto i : choose(text.size(), masked_count(text.size(), text_rate), rng)) {
    const auto pos = text[i];
    const auto original = seq.token_ids[pos];
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double r = u(rng);
    MaskAction action;
    std::int64_t input;
    if (r < 0.8) {
      action = MaskAction::kMask;
      input = Vocabulary::kMask;
    } else if (r < 0.9) {
      action = MaskAction::kRandom;
      std::uniform_int_distribution<std::int64_t> tok(Vocabulary::kNumSpecial, vocab_size - 1);
      input = tok(rng);
    } else {
      action = MaskAction::kKeep;
      input = original;
    }
    plan.text_positions.push_back(pos);
    plan.actions.push_back(action);
    plan.inputs.push_back(input);
    plan.targets.push_back(original);
  }
  plan.patch_indices = choose(seq.n_patch, masked_count(seq.n_patch, patch_rate), rng);
  return plan;
}

InputSequence apply_masks(const InputSequence& seq, const MaskPlan& plan) {
  InputSequence out = seq;
  for (std::size_t i = 0; i < plan.text_positions.size(); ++i) out.token_ids[plan.text_positions[i]] = plan.inputs[i];
  out.patch_zeroed.assign(out.n_patch, 0);
  for (auto p : plan.patch_indices) {
    if (p >= out.n_patch) throw IndexError("mask plan: patch index " + std::to_string(p) + " out of range");
    out.patch_zeroed[p] = 1;
  }
  return out;
}

template <class T>
BasicTensor<T> mlm_loss(const BasicTensor<T>& logits, std::span<const std::int64_t> targets) {
  if (targets.empty()) {
    if (logits.defined() && logits.numel() != 0) throw ShapeError("mlm_loss: logits given without targets");
    return BasicTensor<T>::scalar(T(0));
  }
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw ShapeError("mlm_loss: logits " + shape_str(logits.shape()) + " vs " + std::to_string(targets.size()) +
                     " targets");
  }
  const auto vocab = static_cast<std::int64_t>(logits.dim(1));
  for (auto t : targets) {
    if (t < 0 || t >= vocab) {
      throw IndexError("mlm_loss: target " + std::to_string(t) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  const auto picked = ops::pick(ops::log_softmax(logits), targets);
  return ops::scale(ops::sum(picked), T(-1) / static_cast<T>(targets.size()));
}

template <class T>
BasicTensor<T> mpm_loss(const BasicTensor<T>& predicted, const BasicTensor<T>& raw_targets) {
  if (predicted.shape() != raw_targets.shape() || predicted.rank() != 2) {
    throw ShapeError("mpm_loss: predicted " + shape_str(predicted.shape()) + " vs targets " +
                     shape_str(raw_targets.shape()));
  }
  const std::size_t rows = predicted.dim(0);
  if (rows == 0) return BasicTensor<T>::scalar(T(0));
  constexpr T kFloor = T(1e-8);
  // Both sides go through the same softmax/clamp/log path, so identical
  // inputs give exactly zero.
  BasicTensor<T> p, log_p;
  {
    NoGradScope constant;
    p = ops::softmax(raw_targets.detach());
    log_p = ops::log(ops::clamp(p, kFloor, T(1)));
  }
  const auto log_q = ops::log(ops::clamp(ops::softmax(predicted), kFloor, T(1)));
  const auto per_entry = ops::mul(p, ops::sub(log_p, log_q));
  return ops::scale(ops::sum(per_entry), T(1) / static_cast<T>(rows));
}

template <class T>
BasicTensor<T> tip_loss(const BasicTensor<T>& scores, std::span<const int> labels) {
  if (scores.numel() != labels.size() || labels.empty()) {
    throw ShapeError("tip_loss: scores " + shape_str(scores.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  std::vector<T> y(labels.size()), not_y(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw Error("tip_loss: labels must be 0 or 1");
    y[i] = static_cast<T>(labels[i]);
    not_y[i] = T(1) - y[i];
  }
  const auto s = ops::clamp(scores, T(1e-7), T(1) - T(1e-7));
  const auto yt = BasicTensor<T>::from(scores.shape(), std::move(y));
  const auto nt = BasicTensor<T>::from(scores.shape(), std::move(not_y));
  const auto pos = ops::sum(ops::mul(yt, ops::log(s)));
  const auto neg = ops::sum(ops::mul(nt, ops::log(ops::add_scalar(ops::scale(s, T(-1)), T(1)))));
  return ops::scale(ops::add(pos, neg), T(-1) / static_cast<T>(labels.size()));
}

std::vector<TipPair> sample_tip_pairs(std::size_t n_products, std::uint64_t seed) {
  if (n_products == 0) throw ConfigError("sample_tip_pairs: catalog is empty");
  if (n_products == 1) throw ConfigError("sample_tip_pairs: a single product leaves no negative image source");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> other(0, n_products - 2);
  std::vector<TipPair> out;
  out.reserve(4 * n_products);
  for (std::size_t i = 0; i < n_products; ++i) {
    out.push_back({i, i, 1});
    for (int k = 0; k < 3; ++k) {
      auto j = other(rng);
      if (j >= i) ++j;
      out.push_back({i, j, 0});
    }
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

void PretrainConfig::validate() const {
  if (steps == 0) throw ConfigError("pretrain.steps must be positive");
  if (batch_size == 0) throw ConfigError("pretrain.batch_size must be positive");
  if (!(lr > 0)) throw ConfigError("pretrain.lr must be positive");
  if (warmup_fraction < 0 || warmup_fraction >= 1) throw ConfigError("pretrain.warmup_fraction must be in [0, 1)");
  if (text_mask_rate <= 0 || text_mask_rate > 1) throw ConfigError("pretrain.text_mask_rate must be in (0, 1]");
  if (patch_mask_rate < 0 || patch_mask_rate > 1) throw ConfigError("pretrain.patch_mask_rate must be in [0, 1]");
  if (max_grad_norm < 0) throw ConfigError("pretrain.max_grad_norm must be >= 0");
  if (max_text_len < 4) throw ConfigError("pretrain.max_text_len must be >= 4");
}

Instance make_instance(const synth::Corpus& corpus, const std::vector<ProductFeatures>& features,
                       const TipPair& pair, const PretrainConfig& config, const EncoderConfig& encoder,
                       std::uint64_t mask_seed) {
  const auto& title = corpus.products.at(pair.title_product).title;
  const auto& f = features.at(pair.image_product);
  ProductInputs in;
  in.title_ids = corpus.vocab.encode(title);
  if (config.use_patch) {
    in.patch_rows = f.patch_rows;
    in.n_patch = f.n_patch;
  }
  if (config.use_pixel) {
    in.pixel_rows = f.pixel_rows;
    in.n_pixel = f.n_pixel;
  }
  const auto seq = make_product_sequence(in, config.max_text_len, encoder.max_positions);
  Instance inst;
  inst.label = pair.label;
  if (pair.label == 1) {
    inst.plan = plan_masks(seq, mask_seed, encoder.vocab_size, config.text_mask_rate, config.patch_mask_rate);
    inst.seq = apply_masks(seq, inst.plan);
  } else {
    inst.seq = seq;
  }
  return inst;
}

template <class T>
BasicTensor<T> TaskLosses<T>::total() const {
  return ops::add(ops::add(mlm, mpm), tip);
}

template <class T>
TaskLosses<T> compute_losses(const std::vector<Instance>& batch, const ModelParams<T>& params,
                             const EncoderConfig& encoder, DropoutContext dropout) {
  if (batch.empty()) throw ConfigError("pretrain batch is empty");
  std::vector<const InputSequence*> seqs;
  for (const auto& inst : batch) seqs.push_back(&inst.seq);
  const auto eb = make_batch(seqs, encoder);
  const auto hidden = encode_hidden(eb, params, encoder, dropout);

  std::vector<std::int64_t> text_rows, targets, patch_rows;
  std::vector<T> raw;
  const auto d1 = static_cast<std::size_t>(encoder.patch_dim);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& inst = batch[b];
    for (std::size_t i = 0; i < inst.plan.text_positions.size(); ++i) {
      text_rows.push_back(static_cast<std::int64_t>(eb.row(b, inst.plan.text_positions[i])));
      targets.push_back(inst.plan.targets[i]);
    }
    if (inst.plan.patch_indices.empty()) continue;
    const auto positions = inst.seq.patch_positions();
    for (auto p : inst.plan.patch_indices) {
      patch_rows.push_back(static_cast<std::int64_t>(eb.row(b, positions[p])));
      const auto* src = inst.seq.patch_rows.data() + p * d1;
      for (std::size_t k = 0; k < d1; ++k) raw.push_back(static_cast<T>(src[k]));
    }
  }

  // Head failures are reported by component name.
  const auto guarded = [](const char* name, auto&& fn) {
    try {
      return fn();
    } catch (const NumericError& e) {
      throw NumericError(std::string(name) + ": " + e.what());
    }
  };
  TaskLosses<T> out;
  out.mlm = guarded("L_MLM", [&] {
    if (text_rows.empty()) return BasicTensor<T>::scalar(T(0));
    const auto logits = ops::add(ops::matmul(ops::gather_rows(hidden, text_rows), params.mlm_w), params.mlm_b);
    return mlm_loss(logits, targets);
  });
  out.mpm = guarded("L_MPM", [&] {
    if (patch_rows.empty()) return BasicTensor<T>::scalar(T(0));
    const auto pred = ops::add(ops::matmul(ops::gather_rows(hidden, patch_rows), params.mpm_w), params.mpm_b);
    return mpm_loss(pred, BasicTensor<T>::from({patch_rows.size(), d1}, std::move(raw)));
  });
  std::vector<int> labels;
  for (const auto& inst : batch) labels.push_back(inst.label);
  out.tip = guarded("L_TIP", [&] {
    const auto scores = ops::sigmoid(ops::add(ops::matmul(cls_rows(hidden, eb), params.tip_w), params.tip_b));
    return tip_loss(scores, labels);
  });
  return out;
}

StepLosses pretrain_step(const std::vector<Instance>& batch, const ModelParams<float>& params, Adam& optimizer,
                         double lr, const EncoderConfig& encoder, DropoutContext dropout) {
  GradTape tape;
  TaskLosses<float> losses;
  {
    TapeScope scope(tape);
    try {
      losses = compute_losses(batch, params, encoder, dropout);
    } catch (const NumericError& e) {
      throw NumericError(std::string("pretrain step: ") + e.what());
    }
  }
  StepLosses out{losses.mlm.item(), losses.mpm.item(), losses.tip.item()};
  const std::pair<const char*, double> parts[] = {{"L_MLM", out.mlm}, {"L_MPM", out.mpm}, {"L_TIP", out.tip}};
  for (const auto& [name, value] : parts) {
    if (!std::isfinite(value)) throw NumericError(std::string("pretrain step: non-finite ") + name);
  }
  optimizer.zero_grad();
  {
    TapeScope scope(tape);
    const auto total = losses.total();
    tape.backward(total);
  }
  optimizer.step(lr);
  optimizer.zero_grad();
  return out;
}

std::vector<StepLosses> run_pretraining(const synth::Corpus& corpus, const std::vector<ProductFeatures>& features,
                                        const EncoderConfig& encoder, const PretrainConfig& config,
                                        ModelParams<float>& params, std::ostream* log) {
  config.validate();
  encoder.validate();
  if (features.size() != corpus.products.size()) throw ConfigError("pretrain: feature table does not match catalog");
  params.set_requires_grad(true);
  Adam optimizer(params.encoder_group(), AdamConfig{0.9, 0.999, 1e-8, config.max_grad_norm});
  const LinearSchedule schedule{config.lr, config.steps, config.warmup_fraction};
  std::mt19937_64 drop_rng(derive_seed(config.seed, "pretrain.dropout"));
  const DropoutContext dropout{encoder.dropout, encoder.dropout > 0 ? &drop_rng : nullptr};
  const auto mask_seed = derive_seed(config.seed, "pretrain.mask");

  if (log) *log << "step\tL_MLM\tL_MPM\tL_TIP\tlr\n";
  std::vector<StepLosses> history;
  std::vector<TipPair> epoch;
  std::size_t cursor = 0, epoch_index = 0;
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<Instance> batch;
    while (batch.size() < config.batch_size) {
      if (cursor == epoch.size()) {
        epoch = sample_tip_pairs(corpus.products.size(),
                                 derive_seed(config.seed, "pretrain.epoch." + std::to_string(epoch_index++)));
        cursor = 0;
      }
      const auto seed = mix64(mask_seed ^ mix64(step * 1000003ULL + batch.size()));
      batch.push_back(make_instance(corpus, features, epoch[cursor++], config, encoder, seed));
    }
    const double lr = schedule.at(step);
    const auto losses = pretrain_step(batch, params, optimizer, lr, encoder, dropout);
    history.push_back(losses);
    if (log) {
      *log << step << '\t' << std::setprecision(6) << losses.mlm << '\t' << losses.mpm << '\t' << losses.tip << '\t'
           << lr << '\n';
    }
  }
  return history;
}

template BasicTensor<float> mlm_loss(const BasicTensor<float>&, std::span<const std::int64_t>);
template BasicTensor<double> mlm_loss(const BasicTensor<double>&, std::span<const std::int64_t>);
template BasicTensor<float> mpm_loss(const BasicTensor<float>&, const BasicTensor<float>&);
template BasicTensor<double> mpm_loss(const BasicTensor<double>&, const BasicTensor<double>&);
template BasicTensor<float> tip_loss(const BasicTensor<float>&, std::span<const int>);
template BasicTensor<double> tip_loss(const BasicTensor<double>&, std::span<const int>);
template struct TaskLosses<float>;
template struct TaskLosses<double>;
template TaskLosses<float> compute_losses(const std::vector<Instance>&, const ModelParams<float>&,
                                          const EncoderConfig&, DropoutContext);
template TaskLosses<double> compute_losses(const std::vector<Instance>&, const ModelParams<double>&,
                                           const EncoderConfig&, DropoutContext);

}  // namespace acebert::pretrain
