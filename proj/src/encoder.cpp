#include "acebert/encoder.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "acebert/errors.hpp"
#include "acebert/ops.hpp"
#include "acebert/synth.hpp"

namespace acebert {

namespace {

using Vocab = synth::Vocabulary;

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ConfigError("encoder config: " + field + " " + why);
}

std::vector<std::size_t> positions_with_segment(const InputSequence& s, std::int64_t segment) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < s.length(); ++i) {
    if (s.token_ids[i] < 0 && s.segment_ids[i] == segment) out.push_back(i);
  }
  return out;
}

void push(InputSequence& s, std::int64_t token, std::int64_t segment) {
  s.position_ids.push_back(static_cast<std::int64_t>(s.token_ids.size()));
  s.token_ids.push_back(token);
  s.segment_ids.push_back(segment);
  s.attention_mask.push_back(1);
}

template <class T>
BasicTensor<T> xavier(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<T> v(in * out);
  for (auto& x : v) x = static_cast<T>(u(rng));
  return BasicTensor<T>::from({in, out}, std::move(v));
}

template <class T>
BasicTensor<T> normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(n(rng));
  return BasicTensor<T>::from(std::move(shape), std::move(v));
}

template <class T>
std::map<std::string, Shape> expected_shapes(const EncoderConfig& c) {
  ModelParams<T> p = ModelParams<T>::init(c, 0);
  std::map<std::string, Shape> out;
  p.visit([&](const std::string& name, const BasicTensor<T>& t) { out[name] = t.shape(); });
  return out;
}

}  // namespace

void EncoderConfig::validate() const {
  require(layers >= 1, "layers", "must be >= 1");
  require(hidden_dim >= 1, "hidden_dim", "must be >= 1");
  require(heads >= 1 && hidden_dim % heads == 0, "heads", "must divide hidden_dim");
  require(ff_dim >= 1, "ff_dim", "must be >= 1");
  require(vocab_size > static_cast<int>(Vocab::kNumSpecial), "vocab_size", "must exceed the special tokens");
  require(max_positions >= 8, "max_positions", "must be >= 8");
  require(segment_vocab >= 4, "segment_vocab", "must be >= 4");
  require(retrieval_dim >= 1, "retrieval_dim", "must be >= 1");
  require(patch_dim >= 1, "patch_dim", "must be >= 1");
  require(pixel_dim >= 1, "pixel_dim", "must be >= 1");
  require(disc_hidden >= 1, "disc_hidden", "must be >= 1");
  require(dropout >= 0.0 && dropout < 1.0, "dropout", "must lie in [0, 1)");
}

std::vector<std::size_t> InputSequence::patch_positions() const { return positions_with_segment(*this, kSegPatch); }
std::vector<std::size_t> InputSequence::pixel_positions() const { return positions_with_segment(*this, kSegPixel); }

std::vector<std::size_t> InputSequence::maskable_text_positions() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < length(); ++i) {
    const auto t = token_ids[i];
    if (attention_mask[i] && t >= Vocab::kNumSpecial) out.push_back(i);
  }
  return out;
}

void InputSequence::validate(const EncoderConfig& config) const {
  const std::size_t n = length();
  if (segment_ids.size() != n || position_ids.size() != n || attention_mask.size() != n) {
    throw ShapeError("input sequence: token/segment/position/mask lengths differ (" + std::to_string(n) + ", " +
                     std::to_string(segment_ids.size()) + ", " + std::to_string(position_ids.size()) + ", " +
                     std::to_string(attention_mask.size()) + ")");
  }
  if (n == 0) throw ShapeError("input sequence: empty");
  if (n > static_cast<std::size_t>(config.max_positions)) {
    throw ConfigError("input sequence: length " + std::to_string(n) + " exceeds max_positions " +
                      std::to_string(config.max_positions));
  }
  std::size_t dense = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (token_ids[i] < 0) {
      if (token_ids[i] != -1) throw IndexError("input sequence: token id " + std::to_string(token_ids[i]));
      ++dense;
    } else if (token_ids[i] >= config.vocab_size) {
      throw IndexError("input sequence: token id " + std::to_string(token_ids[i]) + " out of range [0, " +
                       std::to_string(config.vocab_size) + ")");
    }
    if (segment_ids[i] < 0 || segment_ids[i] >= config.segment_vocab) {
      throw IndexError("input sequence: segment id " + std::to_string(segment_ids[i]) + " out of range");
    }
    if (position_ids[i] < 0 || position_ids[i] >= config.max_positions) {
      throw IndexError("input sequence: position id " + std::to_string(position_ids[i]) + " out of range");
    }
  }
  if (dense != dense_count()) {
    throw ShapeError("input sequence: " + std::to_string(dense) + " dense positions but " +
                     std::to_string(dense_count()) + " image rows");
  }
  if (patch_rows.size() != n_patch * static_cast<std::size_t>(config.patch_dim) ||
      pixel_rows.size() != n_pixel * static_cast<std::size_t>(config.pixel_dim)) {
    throw ShapeError("input sequence: image rows do not match patch_dim/pixel_dim");
  }
  if (!patch_zeroed.empty() && patch_zeroed.size() != n_patch) {
    throw ShapeError("input sequence: patch_zeroed length differs from patch count");
  }
}

InputSequence make_query_sequence(const std::vector<std::int64_t>& query_ids, int max_text_len) {
  if (max_text_len < 3) throw ConfigError("max_text_len must be >= 3");
  InputSequence s;
  push(s, Vocab::kCls, kSegText);
  const std::size_t keep = std::min(query_ids.size(), static_cast<std::size_t>(max_text_len - 2));
  for (std::size_t i = 0; i < keep; ++i) push(s, query_ids[i], kSegText);
  push(s, Vocab::kSep, kSegText);
  return s;
}

InputSequence make_product_sequence(const ProductInputs& in, int max_text_len, int max_positions) {
  if (max_text_len < 4) throw ConfigError("max_text_len must be >= 4");
  std::size_t hot_count = in.hot_query_ids.size();
  std::size_t hot_tokens = 0;
  for (const auto& q : in.hot_query_ids) hot_tokens += q.size();
  const auto cap = static_cast<std::size_t>(max_text_len);
  std::size_t title_len = in.title_ids.size();
  while (hot_count > 0 && 3 + title_len + hot_tokens > cap) {
    hot_tokens -= in.hot_query_ids[--hot_count].size();
  }
  if (3 + title_len + hot_tokens > cap) title_len = cap - 3 - hot_tokens;

  InputSequence s;
  push(s, Vocab::kCls, kSegText);
  for (std::size_t i = 0; i < title_len; ++i) push(s, in.title_ids[i], kSegText);
  push(s, Vocab::kSep, kSegText);
  for (std::size_t q = 0; q < hot_count; ++q) {
    for (auto t : in.hot_query_ids[q]) push(s, t, kSegHotQuery);
  }
  push(s, Vocab::kSep, kSegHotQuery);
  if (in.n_patch > 0) {
    for (std::size_t i = 0; i < in.n_patch; ++i) push(s, -1, kSegPatch);
    push(s, Vocab::kSep, kSegPatch);
    s.patch_rows = in.patch_rows;
    s.n_patch = in.n_patch;
  }
  if (in.n_pixel > 0) {
    for (std::size_t i = 0; i < in.n_pixel; ++i) push(s, -1, kSegPixel);
    push(s, Vocab::kSep, kSegPixel);
    s.pixel_rows = in.pixel_rows;
    s.n_pixel = in.n_pixel;
  }
  if (s.length() > static_cast<std::size_t>(max_positions)) {
    throw ConfigError("product sequence: length " + std::to_string(s.length()) + " exceeds max_positions " +
                      std::to_string(max_positions));
  }
  return s;
}

EncodeBatch make_batch(const std::vector<const InputSequence*>& sequences, const EncoderConfig& config) {
  if (sequences.empty()) throw ShapeError("make_batch: no sequences");
  EncodeBatch b;
  b.batch = sequences.size();
  for (const auto* s : sequences) {
    s->validate(config);
    b.length = std::max(b.length, s->length());
    b.n_patch += s->n_patch;
    b.n_pixel += s->n_pixel;
  }
  const auto zero_row = static_cast<std::int64_t>(b.n_patch + b.n_pixel);
  const auto vocab = static_cast<std::int64_t>(config.vocab_size);
  std::int64_t patch_base = 0;
  std::int64_t pixel_base = static_cast<std::int64_t>(b.n_patch);
  std::int64_t slot = 0;
  for (const auto* s : sequences) {
    b.patch_rows.insert(b.patch_rows.end(), s->patch_rows.begin(), s->patch_rows.end());
    b.pixel_rows.insert(b.pixel_rows.end(), s->pixel_rows.begin(), s->pixel_rows.end());
    for (std::size_t i = 0; i < s->n_patch; ++i) {
      const bool zeroed = !s->patch_zeroed.empty() && s->patch_zeroed[i];
      b.dense_order.push_back(zeroed ? zero_row : patch_base + static_cast<std::int64_t>(i));
    }
    for (std::size_t i = 0; i < s->n_pixel; ++i) b.dense_order.push_back(pixel_base + static_cast<std::int64_t>(i));
    patch_base += static_cast<std::int64_t>(s->n_patch);
    pixel_base += static_cast<std::int64_t>(s->n_pixel);
    for (std::size_t p = 0; p < b.length; ++p) {
      if (p < s->length()) {
        b.embed_index.push_back(s->token_ids[p] >= 0 ? s->token_ids[p] : vocab + slot++);
        b.segment_ids.push_back(s->segment_ids[p]);
        b.position_ids.push_back(s->position_ids[p]);
        b.mask.push_back(s->attention_mask[p]);
      } else {
        b.embed_index.push_back(Vocab::kPad);
        b.segment_ids.push_back(0);
        b.position_ids.push_back(0);
        b.mask.push_back(0);
      }
    }
  }
  return b;
}

template <class T>
ModelParams<T> ModelParams<T>::init(const EncoderConfig& c, std::uint64_t seed) {
  c.validate();
  std::mt19937_64 rng(seed);
  const auto D = static_cast<std::size_t>(c.hidden_dim);
  const auto F = static_cast<std::size_t>(c.ff_dim);
  const auto V = static_cast<std::size_t>(c.vocab_size);
  const auto d = static_cast<std::size_t>(c.retrieval_dim);
  const auto D1 = static_cast<std::size_t>(c.patch_dim);
  const auto H = static_cast<std::size_t>(c.disc_hidden);
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(D));
  ModelParams p;
  p.token_emb = normal<T>({V, D}, emb_std, rng);
  p.segment_emb = normal<T>({static_cast<std::size_t>(c.segment_vocab), D}, emb_std, rng);
  p.position_emb = normal<T>({static_cast<std::size_t>(c.max_positions), D}, emb_std, rng);
  for (int l = 0; l < c.layers; ++l) {
    LayerParams<T> L;
    L.wqkv = xavier<T>(D, 3 * D, rng);
    L.bqkv = BasicTensor<T>::zeros({3 * D});
    L.wo = xavier<T>(D, D, rng);
    L.bo = BasicTensor<T>::zeros({D});
    L.ln1_gain = BasicTensor<T>::full({D}, T(1));
    L.ln1_bias = BasicTensor<T>::zeros({D});
    L.w1 = xavier<T>(D, F, rng);
    L.b1 = BasicTensor<T>::zeros({F});
    L.w2 = xavier<T>(F, D, rng);
    L.b2 = BasicTensor<T>::zeros({D});
    L.ln2_gain = BasicTensor<T>::full({D}, T(1));
    L.ln2_bias = BasicTensor<T>::zeros({D});
    p.layers.push_back(std::move(L));
  }
  // Dense inputs arrive standardised per dimension; these scales put a
  // projected row at the same norm as a token embedding row.
  p.patch_w = normal<T>({D1, D}, emb_std / std::sqrt(static_cast<double>(D1)), rng);
  p.patch_b = BasicTensor<T>::zeros({D});
  p.pixel_w = normal<T>({static_cast<std::size_t>(c.pixel_dim), D},
                        emb_std / std::sqrt(static_cast<double>(c.pixel_dim)), rng);
  p.pixel_b = BasicTensor<T>::zeros({D});
  p.retrieval_w = xavier<T>(D, d, rng);
  p.mlm_w = xavier<T>(D, V, rng);
  p.mlm_b = BasicTensor<T>::zeros({V});
  p.mpm_w = xavier<T>(D, D1, rng);
  p.mpm_b = BasicTensor<T>::zeros({D1});
  p.tip_w = xavier<T>(D, 1, rng);
  p.tip_b = BasicTensor<T>::zeros({1});
  p.disc_w1 = xavier<T>(d, H, rng);
  p.disc_b1 = BasicTensor<T>::zeros({H});
  p.disc_w2 = xavier<T>(H, 1, rng);
  p.disc_b2 = BasicTensor<T>::zeros({1});
  p.set_requires_grad(true);
  return p;
}

template <class T>
std::vector<std::pair<std::string, BasicTensor<T>>> ModelParams<T>::named() const {
  std::vector<std::pair<std::string, BasicTensor<T>>> out;
  visit([&](const std::string& name, const BasicTensor<T>& t) { out.emplace_back(name, t); });
  return out;
}

template <class T>
std::vector<BasicTensor<T>> ModelParams<T>::encoder_group() const {
  std::vector<BasicTensor<T>> out;
  visit([&](const std::string& name, const BasicTensor<T>& t) {
    if (name.rfind("disc.", 0) != 0) out.push_back(t);
  });
  return out;
}

template <class T>
std::vector<BasicTensor<T>> ModelParams<T>::discriminator_group() const {
  return {disc_w1, disc_b1, disc_w2, disc_b2};
}

template <class T>
void ModelParams<T>::set_requires_grad(bool on) const {
  visit([&](const std::string&, const BasicTensor<T>& t) { const_cast<BasicTensor<T>&>(t).set_requires_grad(on); });
}

template <class T>
ModelParams<T> ModelParams<T>::clone() const {
  ModelParams out = cast<T>();
  out.set_requires_grad(true);
  return out;
}

template <class T>
ModelParams<T> ModelParams<T>::from_named(const EncoderConfig& config,
                                          const std::vector<std::pair<std::string, BasicTensor<T>>>& blobs) {
  config.validate();
  const auto shapes = expected_shapes<T>(config);
  std::map<std::string, BasicTensor<T>> by_name;
  for (const auto& [name, t] : blobs) {
    auto it = shapes.find(name);
    if (it == shapes.end()) throw FormatError("checkpoint: unexpected parameter '" + name + "'");
    if (t.shape() != it->second) {
      throw FormatError("checkpoint: parameter '" + name + "' has shape " + shape_str(t.shape()) + ", config expects " +
                        shape_str(it->second));
    }
    by_name[name] = t;
  }
  ModelParams p;
  p.layers.resize(static_cast<std::size_t>(config.layers));
  p.visit([&](const std::string& name, BasicTensor<T>& t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing parameter '" + name + "'");
    t = it->second.detach();
  });
  p.set_requires_grad(true);
  return p;
}

template <class T>
BasicTensor<T> project_dense(const EncodeBatch& batch, const ModelParams<T>& params, const EncoderConfig& config) {
  const auto D = static_cast<std::size_t>(config.hidden_dim);
  std::vector<BasicTensor<T>> parts;
  if (batch.n_patch > 0) {
    std::vector<T> raw(batch.patch_rows.begin(), batch.patch_rows.end());
    auto x = BasicTensor<T>::from({batch.n_patch, static_cast<std::size_t>(config.patch_dim)}, std::move(raw));
    parts.push_back(ops::add(ops::matmul(x, params.patch_w), params.patch_b));
  }
  if (batch.n_pixel > 0) {
    std::vector<T> raw(batch.pixel_rows.begin(), batch.pixel_rows.end());
    auto x = BasicTensor<T>::from({batch.n_pixel, static_cast<std::size_t>(config.pixel_dim)}, std::move(raw));
    parts.push_back(ops::add(ops::matmul(x, params.pixel_w), params.pixel_b));
  }
  parts.push_back(BasicTensor<T>::zeros({1, D}));
  auto table = parts.size() == 1 ? parts.front() : ops::concat(parts, 0);
  if (batch.dense_order.empty()) return BasicTensor<T>::zeros({0, D});
  return ops::gather_rows(table, std::span<const std::int64_t>(batch.dense_order));
}

template <class T>
BasicTensor<T> embed_input(const EncodeBatch& batch, const BasicTensor<T>& dense, const ModelParams<T>& params) {
  const auto table = dense.defined() && dense.numel() > 0 ? ops::concat<T>({params.token_emb, dense}, 0)
                                                          : params.token_emb;
  auto x = ops::gather_rows(table, std::span<const std::int64_t>(batch.embed_index));
  x = ops::add(x, ops::gather_rows(params.segment_emb, std::span<const std::int64_t>(batch.segment_ids)));
  return ops::add(x, ops::gather_rows(params.position_emb, std::span<const std::int64_t>(batch.position_ids)));
}

template <class T>
BasicTensor<T> transformer_forward(const BasicTensor<T>& embedded, const EncodeBatch& batch,
                                   const ModelParams<T>& params, const EncoderConfig& config, DropoutContext dropout,
                                   std::vector<std::vector<T>>* attention) {
  if (embedded.rank() != 2 || embedded.dim(0) != batch.batch * batch.length ||
      batch.mask.size() != embedded.dim(0)) {
    throw ShapeError("transformer_forward: input " + shape_str(embedded.shape()) + " does not match batch of " +
                     std::to_string(batch.batch) + "x" + std::to_string(batch.length) + " with mask length " +
                     std::to_string(batch.mask.size()));
  }
  const auto drop = [&](const BasicTensor<T>& t) {
    return dropout.rng != nullptr && dropout.rate > 0 ? ops::dropout(t, dropout.rate, *dropout.rng) : t;
  };
  if (attention) attention->clear();
  auto x = embedded;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& L = params.layers[l];
    try {
      auto qkv = ops::add(ops::matmul(x, L.wqkv), L.bqkv);
      std::vector<T> probs;
      auto a = ops::multi_head_attention(qkv, batch.batch, batch.length, static_cast<std::size_t>(config.heads),
                                         std::span<const std::uint8_t>(batch.mask), attention ? &probs : nullptr);
      if (attention) attention->push_back(std::move(probs));
      a = drop(ops::add(ops::matmul(a, L.wo), L.bo));
      auto h = ops::layer_norm(ops::add(x, a), L.ln1_gain, L.ln1_bias);
      auto f = ops::gelu(ops::add(ops::matmul(h, L.w1), L.b1));
      f = drop(ops::add(ops::matmul(f, L.w2), L.b2));
      x = ops::layer_norm(ops::add(h, f), L.ln2_gain, L.ln2_bias);
    } catch (const NumericError& e) {
      throw NumericError("encoder layer " + std::to_string(l) + ": " + e.what());
    }
  }
  return x;
}

template <class T>
BasicTensor<T> encode_hidden(const EncodeBatch& batch, const ModelParams<T>& params, const EncoderConfig& config,
                             DropoutContext dropout) {
  const auto dense = project_dense(batch, params, config);
  return transformer_forward(embed_input(batch, dense, params), batch, params, config, dropout);
}

template <class T>
BasicTensor<T> cls_rows(const BasicTensor<T>& hidden, const EncodeBatch& batch) {
  std::vector<std::int64_t> rows(batch.batch);
  for (std::size_t b = 0; b < batch.batch; ++b) rows[b] = static_cast<std::int64_t>(batch.row(b, 0));
  return ops::gather_rows(hidden, std::span<const std::int64_t>(rows));
}

template <class T>
BasicTensor<T> pool_embedding(const BasicTensor<T>& hidden, const EncodeBatch& batch, const ModelParams<T>& params) {
  auto projected = ops::matmul(cls_rows(hidden, batch), params.retrieval_w);
  const auto d = projected.dim(1);
  const auto v = projected.data();
  for (std::size_t r = 0; r < projected.dim(0); ++r) {
    bool zero = true;
    for (std::size_t j = 0; j < d && zero; ++j) zero = v[r * d + j] == T(0);
    if (zero) spdlog::warn("pool_embedding: zero vector for batch row {}, using the uniform unit vector", r);
  }
  return ops::l2_normalize(projected);
}

template <class T>
BasicTensor<T> discriminate(const BasicTensor<T>& embeddings, const ModelParams<T>& params) {
  auto h = ops::relu(ops::add(ops::matmul(embeddings, params.disc_w1), params.disc_b1));
  return ops::sigmoid(ops::add(ops::matmul(h, params.disc_w2), params.disc_b2));
}

std::vector<float> embed_sequences(const std::vector<InputSequence>& sequences, const ModelParams<float>& params,
                                   const EncoderConfig& config) {
  NoGradScope no_grad;
  const auto d = static_cast<std::size_t>(config.retrieval_dim);
  std::vector<float> out(sequences.size() * d);
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const auto batch = make_batch({&sequences[i]}, config);
    const auto emb = pool_embedding(encode_hidden(batch, params, config), batch, params);
    std::copy(emb.data().begin(), emb.data().end(), out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return out;
}

#define ACEBERT_INSTANTIATE_ENCODER(T)                                                                             \
  template struct ModelParams<T>;                                                                                  \
  template BasicTensor<T> project_dense(const EncodeBatch&, const ModelParams<T>&, const EncoderConfig&);          \
  template BasicTensor<T> embed_input(const EncodeBatch&, const BasicTensor<T>&, const ModelParams<T>&);           \
  template BasicTensor<T> transformer_forward(const BasicTensor<T>&, const EncodeBatch&, const ModelParams<T>&,    \
                                              const EncoderConfig&, DropoutContext, std::vector<std::vector<T>>*); \
  template BasicTensor<T> encode_hidden(const EncodeBatch&, const ModelParams<T>&, const EncoderConfig&,           \
                                        DropoutContext);                                                           \
  template BasicTensor<T> cls_rows(const BasicTensor<T>&, const EncodeBatch&);                                     \
  template BasicTensor<T> pool_embedding(const BasicTensor<T>&, const EncodeBatch&, const ModelParams<T>&);        \
  template BasicTensor<T> discriminate(const BasicTensor<T>&, const ModelParams<T>&);

ACEBERT_INSTANTIATE_ENCODER(float)
ACEBERT_INSTANTIATE_ENCODER(double)

}  // namespace acebert
