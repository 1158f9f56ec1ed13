#include "acebert/serving.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <random>
#include <unordered_set>

#include "acebert/errors.hpp"
#include "acebert/ops.hpp"
#include "acebert/random.hpp"

namespace acebert::serving {

static_assert(std::endian::native == std::endian::little, "cache I/O assumes a little-endian host");

namespace {

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError(std::string("embedding cache: truncated while reading ") + what);
  return v;
}

}  // namespace

void write_cache(const std::filesystem::path& path, const EmbeddingCache& cache) {
  if (cache.dim == 0) throw ConfigError("embedding cache: dim must be positive");
  if (cache.vectors.size() != cache.ids.size() * cache.dim) throw ShapeError("embedding cache: ids and vectors differ");
  std::unordered_set<std::int64_t> seen;
  for (auto id : cache.ids) {
    if (!seen.insert(id).second) throw Error("embedding cache: duplicate product id " + std::to_string(id));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out.write("ACEB", 4);
    put<std::uint32_t>(out, kCacheVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(cache.dim));
    put<std::uint64_t>(out, cache.ids.size());
    put<std::uint32_t>(out, kCacheIdWidth);
    for (std::size_t r = 0; r < cache.ids.size(); ++r) {
      put<std::int64_t>(out, cache.ids[r]);
      out.write(reinterpret_cast<const char*>(cache.vectors.data() + r * cache.dim),
                static_cast<std::streamsize>(cache.dim * sizeof(float)));
    }
    out.flush();
    if (!out) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

EmbeddingCache read_cache(const std::filesystem::path& path, std::optional<std::size_t> expected_dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open embedding cache " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "ACEB", 4) != 0) throw FormatError("embedding cache: bad magic in " + path.string());
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCacheVersion) throw FormatError("embedding cache: unsupported version " + std::to_string(version));
  EmbeddingCache cache;
  cache.dim = get<std::uint32_t>(in, "dim");
  if (cache.dim == 0 || cache.dim > 65536) throw FormatError("embedding cache: implausible dim");
  if (expected_dim && *expected_dim != cache.dim) {
    throw FormatError("embedding cache: dim " + std::to_string(cache.dim) + " but model expects " +
                      std::to_string(*expected_dim));
  }
  const auto count = get<std::uint64_t>(in, "count");
  const auto width = get<std::uint32_t>(in, "id width");
  if (width != kCacheIdWidth) throw FormatError("embedding cache: unsupported id width " + std::to_string(width));
  // Size check up front so a truncated file never yields partial data.
  const auto header = static_cast<std::uintmax_t>(in.tellg());
  const auto expected = header + count * (kCacheIdWidth + cache.dim * sizeof(float));
  if (std::filesystem::file_size(path) != expected) {
    throw FormatError("embedding cache: body size does not match " + std::to_string(count) + " records");
  }
  cache.ids.resize(count);
  cache.vectors.resize(count * cache.dim);
  for (std::uint64_t r = 0; r < count; ++r) {
    cache.ids[r] = get<std::int64_t>(in, "id");
    in.read(reinterpret_cast<char*>(cache.vectors.data() + r * cache.dim),
            static_cast<std::streamsize>(cache.dim * sizeof(float)));
    if (!in) throw FormatError("embedding cache: truncated record");
  }
  return cache;
}

EmbeddingCache export_embeddings(const synth::Corpus& corpus, const finetune::SequenceBuilder& builder,
                                 const ModelParams<float>& params, const EncoderConfig& config,
                                 const std::filesystem::path& path) {
  std::vector<InputSequence> seqs;
  EmbeddingCache cache;
  cache.dim = static_cast<std::size_t>(config.retrieval_dim);
  for (const auto& p : corpus.products) {
    cache.ids.push_back(p.id);
    seqs.push_back(builder.product(p.id));
  }
  cache.vectors = embed_sequences(seqs, params, config);
  write_cache(path, cache);
  return cache;
}

QueryEncoder::QueryEncoder(const ModelParams<float>& params, const EncoderConfig& config,
                           const synth::Vocabulary& vocab, int max_query_len)
    : params_(params), config_(config), vocab_(vocab), max_query_len_(max_query_len) {}

std::vector<float> QueryEncoder::encode(const std::vector<std::string>& tokens) {
  ++calls_;
  return embed_sequences({make_query_sequence(vocab_.encode(tokens), max_query_len_)}, params_, config_);
}

void HotQueryCache::add(const std::string& text, std::vector<float> vector) {
  entries_[synth::join(synth::tokenize(text))] = std::move(vector);
}

const std::vector<float>* HotQueryCache::find(const std::string& text) const {
  const auto it = entries_.find(synth::join(synth::tokenize(text)));
  return it == entries_.end() ? nullptr : &it->second;
}

HotQueryCache build_hot_cache(const std::vector<std::string>& texts, QueryEncoder& encoder) {
  HotQueryCache cache;
  for (const auto& t : texts) cache.add(t, encoder.encode(synth::tokenize(t)));
  return cache;
}

void StudentConfig::validate() const {
  if (layers < 1) throw ConfigError("serving.student_layers must be >= 1");
  if (distill_weight <= 0) throw ConfigError("serving.distill_weight must be positive");
  if (temperature <= 0) throw ConfigError("serving.temperature must be positive");
  if (steps == 0) throw ConfigError("serving.distill_steps must be positive");
  if (batch_size == 0) throw ConfigError("serving.distill_batch must be positive");
  if (!(lr > 0)) throw ConfigError("serving.distill_lr must be positive");
}

EncoderConfig student_encoder_config(const EncoderConfig& teacher, const StudentConfig& student) {
  EncoderConfig c = teacher;
  c.layers = student.layers;
  return c;
}

ModelParams<float> init_student(const ModelParams<float>& teacher, const EncoderConfig& student_config) {
  if (student_config.layers > static_cast<int>(teacher.layers.size())) {
    throw ConfigError("student cannot have more layers than the teacher");
  }
  auto s = teacher.clone();
  s.layers.resize(static_cast<std::size_t>(student_config.layers));
  return s;
}

template <class T>
BasicTensor<T> cosine_distill_loss(const BasicTensor<T>& student, const BasicTensor<T>& teacher) {
  if (student.shape() != teacher.shape() || student.rank() != 2 || student.dim(0) == 0) {
    throw ShapeError("distillation: student " + shape_str(student.shape()) + " vs teacher " +
                     shape_str(teacher.shape()));
  }
  const auto cos = ops::sum_last(ops::mul(student, teacher.detach()));
  return ops::add_scalar(ops::scale(ops::mean(cos), T(-1)), T(1));
}

double distill_step(const std::vector<InputSequence>& queries, const std::vector<float>& teacher_vectors,
                    const ModelParams<float>& student, const EncoderConfig& student_config, Adam& optimizer,
                    double lr, double weight) {
  std::vector<const InputSequence*> ptrs;
  for (const auto& q : queries) ptrs.push_back(&q);
  const auto d = static_cast<std::size_t>(student_config.retrieval_dim);
  if (teacher_vectors.size() != queries.size() * d) throw ShapeError("distillation: one teacher vector per query");
  GradTape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    const auto batch = make_batch(ptrs, student_config);
    const auto emb = pool_embedding(encode_hidden(batch, student, student_config), batch, student);
    loss = cosine_distill_loss(emb, Tensor::from({queries.size(), d}, teacher_vectors));
    const auto weighted = ops::scale(loss, static_cast<float>(weight));
    optimizer.zero_grad();
    tape.backward(weighted);
  }
  optimizer.step(lr);
  optimizer.zero_grad();
  return loss.item();
}

DistillResult distill_query_encoder(const ModelParams<float>& teacher, const EncoderConfig& teacher_config,
                                    const StudentConfig& student, const std::vector<InputSequence>& query_corpus) {
  student.validate();
  if (student.layers >= teacher_config.layers) {
    throw ConfigError("serving.student_layers (" + std::to_string(student.layers) +
                      ") must be below the teacher's layer count (" + std::to_string(teacher_config.layers) + ")");
  }
  if (query_corpus.empty()) throw ConfigError("distillation needs a non-empty query corpus");
  DistillResult result;
  result.config = student_encoder_config(teacher_config, student);
  result.config.dropout = 0.0;
  result.student = init_student(teacher, result.config);
  result.student.set_requires_grad(true);

  const auto d = static_cast<std::size_t>(teacher_config.retrieval_dim);
  auto teacher_eval = teacher_config;
  teacher_eval.dropout = 0.0;
  const auto targets = embed_sequences(query_corpus, teacher, teacher_eval);
  Adam optimizer(result.student.encoder_group());
  const LinearSchedule schedule{student.lr, student.steps, 0.1};
  std::mt19937_64 rng(derive_seed(student.seed, "distill.batch"));
  std::vector<std::size_t> order(query_corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  for (std::size_t step = 0; step < student.steps; ++step) {
    std::vector<InputSequence> batch;
    std::vector<float> batch_targets;
    while (batch.size() < std::min(student.batch_size, query_corpus.size())) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto i = order[cursor++];
      batch.push_back(query_corpus[i]);
      batch_targets.insert(batch_targets.end(), targets.begin() + static_cast<std::ptrdiff_t>(i * d),
                           targets.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    }
    result.losses.push_back(distill_step(batch, batch_targets, result.student, result.config, optimizer,
                                         schedule.at(step), student.distill_weight));
  }
  result.student.set_requires_grad(false);
  return result;
}

double mean_cosine(const ModelParams<float>& student, const EncoderConfig& student_config,
                   const ModelParams<float>& teacher, const EncoderConfig& teacher_config,
                   const std::vector<InputSequence>& sequences) {
  if (sequences.empty()) throw ConfigError("mean_cosine: no sequences");
  const auto s = embed_sequences(sequences, student, student_config);
  const auto t = embed_sequences(sequences, teacher, teacher_config);
  const auto d = static_cast<std::size_t>(teacher_config.retrieval_dim);
  double total = 0;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    double c = 0;
    for (std::size_t j = 0; j < d; ++j) c += static_cast<double>(s[i * d + j]) * t[i * d + j];
    total += c;
  }
  return total / static_cast<double>(sequences.size());
}

std::vector<retrieval::Hit> serve_query(const std::string& text, const HotQueryCache& hot, QueryEncoder& encoder,
                                        const retrieval::EmbeddingIndex& index, std::size_t k, std::size_t probes) {
  const auto tokens = synth::tokenize(text);
  if (tokens.empty()) throw Error("serve_query: empty query text");
  std::vector<float> online;
  const std::vector<float>* vec = hot.find(text);
  if (!vec) {
    online = encoder.encode(tokens);
    vec = &online;
  }
  const auto kk = std::min(k, index.size());
  return probes == 0 ? retrieval::exact_topk(index, *vec, kk) : retrieval::approx_topk(index, *vec, kk, probes);
}

template BasicTensor<float> cosine_distill_loss(const BasicTensor<float>&, const BasicTensor<float>&);
template BasicTensor<double> cosine_distill_loss(const BasicTensor<double>&, const BasicTensor<double>&);

}  // namespace acebert::serving
