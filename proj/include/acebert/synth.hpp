#pragma once

// Synthetic catalog and click-log generator. Products carry attribute-coded
// images (one coloured shape on a category-tinted background) and titles that
// mention only some of those attributes, so image input carries signal the
// text lacks.

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "acebert/vision.hpp"

namespace acebert::synth {

class Vocabulary {
 public:
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kCls = 1;
  static constexpr std::int64_t kSep = 2;
  static constexpr std::int64_t kMask = 3;
  static constexpr std::int64_t kUnk = 4;
  static constexpr std::int64_t kNumSpecial = 5;

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words);

  // Specials followed by every attribute and filler word the generator emits.
  static Vocabulary desk();

  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }
  const std::string& word(std::int64_t id) const;
  // Unknown words map to kUnk.
  std::int64_t id(const std::string& word) const;
  std::vector<std::int64_t> encode(const std::vector<std::string>& tokens) const;

  bool operator==(const Vocabulary& other) const { return words_ == other.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::int64_t> index_;
};

const std::vector<std::string>& category_words();
const std::vector<std::string>& color_words();
const std::vector<std::string>& shape_words();
const std::vector<std::string>& size_words();
const std::vector<std::string>& filler_words();

// Splits on ASCII whitespace.
std::vector<std::string> tokenize(const std::string& text);
std::string join(const std::vector<std::string>& tokens);

struct Product {
  std::int64_t id = 0;
  int category = 0;
  int color = 0;
  int shape = 0;
  int size = 0;
  std::vector<std::string> title;
  int image_size = 64;
  std::vector<std::uint8_t> pixels;  // image_size x image_size x 3
  vision::RoI truth_box;

  vision::Image image() const;
  // category, color, shape and size words.
  std::vector<std::string> attribute_tokens() const;
  bool operator==(const Product&) const = default;
};

struct Query {
  std::int64_t id = 0;
  std::vector<std::string> tokens;
  // -1 when the query does not constrain that attribute.
  int category = -1;
  int color = -1;
  int shape = -1;
  int size = -1;

  bool matches(const Product& p) const;
  std::string text() const { return join(tokens); }
  bool operator==(const Query&) const = default;
};

struct Click {
  std::int64_t query_id = 0;
  std::int64_t product_id = 0;
  int day = 0;  // timestamp, in whole days
  int count = 1;
  bool operator==(const Click&) const = default;
};

struct CatalogOptions {
  int image_size = 64;
  double title_attribute_prob = 0.4;
  int min_fillers = 2;
  int max_fillers = 4;
};

struct ClickOptions {
  double zipf_skew = 1.0;
  int clicks_per_query = 24;
  int num_days = 10;
  double product_popularity_sigma = 1.0;
};

// Products get categories round-robin (id % n_categories).
std::vector<Product> gen_catalog(int n_products, int n_categories, std::uint64_t seed,
                                 const CatalogOptions& options = {});

struct ClickLog {
  std::vector<Query> queries;
  std::vector<Click> clicks;
};

ClickLog gen_click_log(const std::vector<Product>& catalog, int n_queries, double noise_rate, std::uint64_t seed,
                       const ClickOptions& options = {});

struct CorpusConfig {
  int n_products = 2000;
  int n_categories = 8;
  int n_queries = 500;
  double noise_rate = 0.1;
  int test_days = 2;
  std::uint64_t seed = 7;
  CatalogOptions catalog;
  ClickOptions clicks;
};

inline constexpr std::uint32_t kCorpusFormatVersion = 1;

struct Corpus {
  CorpusConfig config;
  Vocabulary vocab;
  std::vector<Product> products;
  std::vector<Query> queries;
  std::vector<Click> clicks;

  // Clicks with day < num_days - test_days.
  std::vector<Click> train_clicks() const;
  std::vector<Click> test_clicks() const;

  // Writes manifest.json, vocab.txt, products.jsonl, images.bin, queries.jsonl
  // and clicks.tsv (query_id, product_id, timestamp, count) into dir.
  void save(const std::filesystem::path& dir) const;
  static Corpus load(const std::filesystem::path& dir);
};

Corpus generate_corpus(const CorpusConfig& config);

// For each product, its most-clicked queries by summed click count (ties by
// lower query id), at most max_per_product entries.
std::unordered_map<std::int64_t, std::vector<std::int64_t>> hot_queries_by_product(
    const std::vector<Click>& clicks, int max_per_product);

}  // namespace acebert::synth
