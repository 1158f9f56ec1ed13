#pragma once

// Embedding index with exact and inverted-file search, plus the offline
// evaluation harness (Recall@K, GAUC, domain probe).

#include <cstdint>
#include <map>
#include <ostream>
#include <set>
#include <span>
#include <vector>

#include "acebert/synth.hpp"

namespace acebert::retrieval {

class EmbeddingIndex {
 public:
  EmbeddingIndex() = default;
  // Rejects duplicate ids and rows whose norm is off by more than 1e-4.
  EmbeddingIndex(std::vector<std::int64_t> ids, std::vector<float> vectors, std::size_t dim);

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  const std::vector<std::int64_t>& ids() const { return ids_; }
  const std::vector<float>& vectors() const { return vectors_; }
  std::span<const float> vector(std::size_t row) const { return {vectors_.data() + row * dim_, dim_}; }

  // Lloyd k-means (Euclidean) seeded from distinct random rows. Empty
  // clusters keep their previous centroid.
  void build_clusters(std::size_t clusters, std::uint64_t seed, int iterations = 20);
  bool has_clusters() const { return !centroids_.empty(); }
  std::size_t cluster_count() const { return members_.size(); }
  const std::vector<float>& centroids() const { return centroids_; }
  const std::vector<std::vector<std::size_t>>& members() const { return members_; }

 private:
  std::vector<std::int64_t> ids_;
  std::vector<float> vectors_;
  std::size_t dim_ = 0;
  std::vector<float> centroids_;
  std::vector<std::vector<std::size_t>> members_;
};

struct Hit {
  std::int64_t id = 0;
  double score = 0;
  bool operator==(const Hit&) const = default;
};

// K highest dot-product scores, descending, ties by ascending id.
std::vector<Hit> exact_topk(const EmbeddingIndex& index, std::span<const float> query, std::size_t k);

// Same ranking restricted to the `probes` clusters nearest the query.
std::vector<Hit> approx_topk(const EmbeddingIndex& index, std::span<const float> query, std::size_t k,
                             std::size_t probes);

// |E intersect T| / |T|.
double recall_at_k(std::span<const std::int64_t> returned, const std::set<std::int64_t>& targets);

struct Scored {
  double score = 0;
  int label = 0;
};

// Impression-weighted mean of per-group pairwise AUC (ties count one half).
// Groups without both labels are skipped.
double gauc(const std::vector<std::vector<Scored>>& groups);

struct EvalSpec {
  std::vector<std::int64_t> query_ids;
  std::vector<std::set<std::int64_t>> targets;  // clicked products per query
};

// Every query with at least one click in `clicks`, ascending id.
EvalSpec build_eval_spec(const std::vector<synth::Click>& clicks);

struct EvalReport {
  std::map<std::size_t, double> recall;
  std::map<std::size_t, double> random_recall;  // expected recall of a uniform random ranking
  double gauc = 0;
  std::size_t queries = 0;
};

// `query_vectors` holds one row per spec query. GAUC impressions per query
// are its targets plus `negatives_per_query` uniformly drawn other products.
EvalReport evaluate(const EmbeddingIndex& index, const std::vector<float>& query_vectors, const EvalSpec& spec,
                    const std::vector<std::size_t>& ks, std::size_t negatives_per_query = 50,
                    std::uint64_t seed = 0);

// Line-delimited "metric<TAB>K<TAB>value" records (K is "-" for GAUC).
void write_report(std::ostream& out, const EvalReport& report);
// Aligned table for terminals.
void print_summary(std::ostream& out, const EvalReport& report);

// Held-out accuracy of a logistic-regression probe separating two sets of
// d-vectors. Each set is split in half (train/test) after shuffling; the
// larger set is subsampled to the size of the smaller.
double linear_probe_accuracy(const std::vector<float>& a, const std::vector<float>& b, std::size_t dim,
                             std::uint64_t seed, int iterations = 1000);

}  // namespace acebert::retrieval
