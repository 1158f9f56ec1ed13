#pragma once

// Shared transformer encoder: input assembly, embedding, post-norm stack,
// pooled retrieval embedding, and every learnable parameter of the model
// including task heads and the domain discriminator.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "acebert/tensor.hpp"

namespace acebert {

struct EncoderConfig {
  int layers = 2;
  int hidden_dim = 64;
  int heads = 4;
  int ff_dim = 256;
  int vocab_size = 256;
  int max_positions = 128;
  int segment_vocab = 4;
  int retrieval_dim = 32;
  int patch_dim = 128;  // raw RoI patch feature width (D1)
  int pixel_dim = 192;  // flattened pixel patch width (h*w*C)
  int disc_hidden = 64;
  double dropout = 0.1;

  // Throws ConfigError naming the first offending field.
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

enum Segment : std::int64_t { kSegText = 0, kSegHotQuery = 1, kSegPatch = 2, kSegPixel = 3 };

// One assembled sequence. Dense positions (token id -1) take their inputs
// from the sequence's own raw image rows: patch rows first, then pixel rows,
// in position order.
struct InputSequence {
  std::vector<std::int64_t> token_ids;
  std::vector<std::int64_t> segment_ids;
  std::vector<std::int64_t> position_ids;
  std::vector<std::uint8_t> attention_mask;

  std::vector<float> patch_rows;  // n_patch x patch_dim
  std::vector<float> pixel_rows;  // n_pixel x pixel_dim
  std::size_t n_patch = 0;
  std::size_t n_pixel = 0;
  // Per patch row: 1 replaces its dense input with zeros (masked patch).
  std::vector<std::uint8_t> patch_zeroed;

  std::size_t length() const { return token_ids.size(); }
  std::size_t dense_count() const { return n_patch + n_pixel; }
  // Positions (in order) of patch and pixel tokens.
  std::vector<std::size_t> patch_positions() const;
  std::vector<std::size_t> pixel_positions() const;
  // Positions holding vocabulary tokens, excluding [CLS]/[SEP]/[PAD].
  std::vector<std::size_t> maskable_text_positions() const;

  // Structural checks: equal list lengths, dense slots match the rows,
  // ids within the config's tables.
  void validate(const EncoderConfig& config) const;
};

// [CLS] q [SEP], truncated to max_text_len tokens.
InputSequence make_query_sequence(const std::vector<std::int64_t>& query_ids, int max_text_len);

struct ProductInputs {
  std::vector<std::int64_t> title_ids;
  std::vector<std::vector<std::int64_t>> hot_query_ids;  // already in table order
  std::vector<float> patch_rows;                         // n_patch x patch_dim
  std::size_t n_patch = 0;
  std::vector<float> pixel_rows;  // n_pixel x pixel_dim
  std::size_t n_pixel = 0;
};

// [CLS] title [SEP] hot_1 .. hot_k [SEP] patches [SEP] pixels [SEP] with
// segments 0/1/2/3. Image segments are omitted when their row count is 0.
// The text part (through the second [SEP]) is capped at max_text_len by
// dropping trailing hot queries first, then the title tail. Throws
// ConfigError if the result exceeds max_positions.
InputSequence make_product_sequence(const ProductInputs& inputs, int max_text_len, int max_positions);

// A padded batch of sequences flattened to (batch * length) rows.
struct EncodeBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int64_t> embed_index;  // into [token table | dense rows | zero row]
  std::vector<std::int64_t> segment_ids;
  std::vector<std::int64_t> position_ids;
  std::vector<std::uint8_t> mask;
  std::vector<float> patch_rows;
  std::vector<float> pixel_rows;
  std::size_t n_patch = 0;
  std::size_t n_pixel = 0;
  // For every dense slot in batch order: row in [patch rows | pixel rows | zero row].
  std::vector<std::int64_t> dense_order;
  // Flat row of each sequence's position 0.
  std::size_t row(std::size_t b, std::size_t pos) const { return b * length + pos; }
};

EncodeBatch make_batch(const std::vector<const InputSequence*>& sequences, const EncoderConfig& config);

template <class T>
struct LayerParams {
  BasicTensor<T> wqkv, bqkv, wo, bo, ln1_gain, ln1_bias;
  BasicTensor<T> w1, b1, w2, b2, ln2_gain, ln2_bias;
};

template <class T>
struct ModelParams {
  BasicTensor<T> token_emb, segment_emb, position_emb;
  std::vector<LayerParams<T>> layers;
  BasicTensor<T> patch_w, patch_b;  // D1 -> D2
  BasicTensor<T> pixel_w, pixel_b;  // h*w*C -> D2
  BasicTensor<T> retrieval_w;       // D2 -> d, no bias
  BasicTensor<T> mlm_w, mlm_b;      // D2 -> vocab
  BasicTensor<T> mpm_w, mpm_b;      // D2 -> D1
  BasicTensor<T> tip_w, tip_b;      // D2 -> 1
  BasicTensor<T> disc_w1, disc_b1;  // d -> disc_hidden
  BasicTensor<T> disc_w2, disc_b2;  // disc_hidden -> 1

  static ModelParams init(const EncoderConfig& config, std::uint64_t seed);

  // Calls f(name, tensor) for every parameter in the fixed checkpoint order.
  template <class F>
  void visit(F&& f);
  template <class F>
  void visit(F&& f) const {
    const_cast<ModelParams*>(this)->visit([&](const std::string& name, BasicTensor<T>& t) {
      f(name, static_cast<const BasicTensor<T>&>(t));
    });
  }

  // Stable names ("layers.0.attn.wqkv", ...) in a fixed order. The tensors
  // share storage with the members.
  std::vector<std::pair<std::string, BasicTensor<T>>> named() const;
  // Everything except the discriminator.
  std::vector<BasicTensor<T>> encoder_group() const;
  std::vector<BasicTensor<T>> discriminator_group() const;

  void set_requires_grad(bool on) const;
  // Deep copy with fresh storage.
  ModelParams clone() const;
  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.layers.resize(layers.size());
    std::vector<BasicTensor<U>> converted;
    visit([&](const std::string&, const BasicTensor<T>& t) { converted.push_back(t.template cast<U>()); });
    std::size_t i = 0;
    out.visit([&](const std::string&, BasicTensor<U>& t) { t = converted[i++]; });
    return out;
  }

  // Rebuilds from named blobs, validating every shape against `config`.
  static ModelParams from_named(const EncoderConfig& config,
                                const std::vector<std::pair<std::string, BasicTensor<T>>>& blobs);
};

template <class T>
template <class F>
void ModelParams<T>::visit(F&& f) {
  f("token_emb", token_emb);
  f("segment_emb", segment_emb);
  f("position_emb", position_emb);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    auto& l = layers[i];
    f(p + "attn.wqkv", l.wqkv);
    f(p + "attn.bqkv", l.bqkv);
    f(p + "attn.wo", l.wo);
    f(p + "attn.bo", l.bo);
    f(p + "ln1.gain", l.ln1_gain);
    f(p + "ln1.bias", l.ln1_bias);
    f(p + "ffn.w1", l.w1);
    f(p + "ffn.b1", l.b1);
    f(p + "ffn.w2", l.w2);
    f(p + "ffn.b2", l.b2);
    f(p + "ln2.gain", l.ln2_gain);
    f(p + "ln2.bias", l.ln2_bias);
  }
  f("patch_proj.w", patch_w);
  f("patch_proj.b", patch_b);
  f("pixel_proj.w", pixel_w);
  f("pixel_proj.b", pixel_b);
  f("retrieval_proj.w", retrieval_w);
  f("heads.mlm.w", mlm_w);
  f("heads.mlm.b", mlm_b);
  f("heads.mpm.w", mpm_w);
  f("heads.mpm.b", mpm_b);
  f("heads.tip.w", tip_w);
  f("heads.tip.b", tip_b);
  f("disc.w1", disc_w1);
  f("disc.b1", disc_b1);
  f("disc.w2", disc_w2);
  f("disc.b2", disc_b2);
}

// Optional dropout; a null rng disables it.
struct DropoutContext {
  double rate = 0.0;
  std::mt19937_64* rng = nullptr;
};

// Raw image rows projected to D2 and arranged in dense-slot order
// ((dense slots) x D2); zeroed patches become zero rows.
template <class T>
BasicTensor<T> project_dense(const EncodeBatch& batch, const ModelParams<T>& params, const EncoderConfig& config);

// (batch*length) x D2: token embedding or dense input, plus segment and
// position embeddings.
template <class T>
BasicTensor<T> embed_input(const EncodeBatch& batch, const BasicTensor<T>& dense, const ModelParams<T>& params);

// Post-norm transformer stack over (batch*length) x D2 rows. Masked keys
// get -inf logits. `attention` (if non-null) receives one probability
// buffer per layer laid out [batch][head][query][key].
template <class T>
BasicTensor<T> transformer_forward(const BasicTensor<T>& embedded, const EncodeBatch& batch,
                                   const ModelParams<T>& params, const EncoderConfig& config,
                                   DropoutContext dropout = {},
                                   std::vector<std::vector<T>>* attention = nullptr);

// project_dense -> embed_input -> transformer_forward.
template <class T>
BasicTensor<T> encode_hidden(const EncodeBatch& batch, const ModelParams<T>& params, const EncoderConfig& config,
                             DropoutContext dropout = {});

// [CLS] rows, (batch) x D2.
template <class T>
BasicTensor<T> cls_rows(const BasicTensor<T>& hidden, const EncodeBatch& batch);

// [CLS] -> bias-free retrieval projection -> L2 normalisation, (batch) x d.
// Zero rows fall back to the uniform unit vector (logged).
template <class T>
BasicTensor<T> pool_embedding(const BasicTensor<T>& hidden, const EncodeBatch& batch, const ModelParams<T>& params);

// Discriminator D(v) in (0, 1) for (n) x d embeddings; returns (n) x 1.
template <class T>
BasicTensor<T> discriminate(const BasicTensor<T>& embeddings, const ModelParams<T>& params);

// Pooled embeddings of many sequences, (n x d) row-major, without
// recording gradients. Each sequence is encoded on its own so a vector never
// depends on what else was in the call.
std::vector<float> embed_sequences(const std::vector<InputSequence>& sequences, const ModelParams<float>& params,
                                   const EncoderConfig& config);

}  // namespace acebert
