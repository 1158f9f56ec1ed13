#pragma once

// Deployment path: product embedding export to a binary cache, a hot-query
// embedding cache, a shallower query encoder distilled from the trained one,
// and the query lookup pipeline.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "acebert/encoder.hpp"
#include "acebert/finetune.hpp"
#include "acebert/optim.hpp"
#include "acebert/retrieval.hpp"

namespace acebert::serving {

inline constexpr std::uint32_t kCacheVersion = 1;
inline constexpr std::uint32_t kCacheIdWidth = 8;

struct EmbeddingCache {
  std::vector<std::int64_t> ids;
  std::vector<float> vectors;  // count x dim
  std::size_t dim = 0;

  retrieval::EmbeddingIndex to_index() const { return {ids, vectors, dim}; }
};

// Header: "ACEB", u32 version, u32 dim, u64 count, u32 id width; then per
// record a little-endian u64 id and dim float32 values. Written to a
// temporary file and renamed into place.
void write_cache(const std::filesystem::path& path, const EmbeddingCache& cache);
// FormatError for a bad magic, version, id width, dim (including a mismatch
// with `expected_dim` when given) or a truncated body; IoError if missing.
EmbeddingCache read_cache(const std::filesystem::path& path, std::optional<std::size_t> expected_dim = {});

// Encodes every catalog product (hot queries included per the builder's
// config) in catalog order and writes the cache.
EmbeddingCache export_embeddings(const synth::Corpus& corpus, const finetune::SequenceBuilder& builder,
                                 const ModelParams<float>& params, const EncoderConfig& config,
                                 const std::filesystem::path& path);

// Query-side encoder with an invocation counter.
class QueryEncoder {
 public:
  QueryEncoder(const ModelParams<float>& params, const EncoderConfig& config, const synth::Vocabulary& vocab,
               int max_query_len);

  std::vector<float> encode(const std::vector<std::string>& tokens);
  std::size_t calls() const { return calls_; }
  const EncoderConfig& config() const { return config_; }

 private:
  const ModelParams<float>& params_;
  EncoderConfig config_;
  const synth::Vocabulary& vocab_;
  int max_query_len_;
  std::size_t calls_ = 0;
};

// Normalised query text (single-space-joined tokens) -> unit vector.
class HotQueryCache {
 public:
  void add(const std::string& text, std::vector<float> vector);
  const std::vector<float>* find(const std::string& text) const;
  std::size_t size() const { return entries_.size(); }

 private:
  std::unordered_map<std::string, std::vector<float>> entries_;
};

// Cache over the given texts, filled by `encoder`.
HotQueryCache build_hot_cache(const std::vector<std::string>& texts, QueryEncoder& encoder);

struct StudentConfig {
  int layers = 1;
  double distill_weight = 1.0;
  double temperature = 1.0;  // kept for config completeness; embedding distillation ignores it
  std::size_t steps = 10000;
  std::size_t batch_size = 32;
  double lr = 3e-3;
  std::uint64_t seed = 1;

  void validate() const;
};

// Teacher config with the student's layer count.
EncoderConfig student_encoder_config(const EncoderConfig& teacher, const StudentConfig& student);

// Student initialised from the teacher: every non-layer tensor copied, and
// layer i copied from teacher layer i.
ModelParams<float> init_student(const ModelParams<float>& teacher, const EncoderConfig& student_config);

// Mean over rows of 1 - cos(student, teacher) for unit rows.
template <class T>
BasicTensor<T> cosine_distill_loss(const BasicTensor<T>& student, const BasicTensor<T>& teacher);

// One step of `optimizer` on weight * cosine_distill_loss over the batch.
double distill_step(const std::vector<InputSequence>& queries, const std::vector<float>& teacher_vectors,
                    const ModelParams<float>& student, const EncoderConfig& student_config, Adam& optimizer,
                    double lr, double weight);

struct DistillResult {
  ModelParams<float> student;
  EncoderConfig config;
  std::vector<double> losses;
};

// Trains a student with fewer layers to match the teacher's query
// embeddings. The teacher is only read. ConfigError if the student is not
// strictly shallower.
DistillResult distill_query_encoder(const ModelParams<float>& teacher, const EncoderConfig& teacher_config,
                                    const StudentConfig& student, const std::vector<InputSequence>& query_corpus);

// Mean cosine between student and teacher embeddings of the sequences.
double mean_cosine(const ModelParams<float>& student, const EncoderConfig& student_config,
                   const ModelParams<float>& teacher, const EncoderConfig& teacher_config,
                   const std::vector<InputSequence>& sequences);

// Cached vector when the normalised text is hot, otherwise one encoder call;
// then exact search (probes == 0) or inverted-file search.
std::vector<retrieval::Hit> serve_query(const std::string& text, const HotQueryCache& hot, QueryEncoder& encoder,
                                        const retrieval::EmbeddingIndex& index, std::size_t k,
                                        std::size_t probes = 0);

}  // namespace acebert::serving
