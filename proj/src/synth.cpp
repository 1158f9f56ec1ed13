#include "acebert/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "acebert/errors.hpp"
#include "acebert/random.hpp"
#include "json.hpp"

namespace acebert::synth {

namespace {

using json = nlohmann::json;

struct Rgb {
  std::uint8_t r, g, b;
};

// Saturated object colours, indexed like color_words().
constexpr Rgb kObjectColors[] = {{220, 30, 30},  {30, 170, 40},  {30, 60, 220},  {235, 215, 20},
                                 {140, 40, 170}, {245, 130, 20}, {20, 200, 210}, {25, 25, 25}};

// Pale category backgrounds, indexed like category_words().
constexpr Rgb kBackgrounds[] = {{236, 226, 210}, {214, 232, 236}, {232, 214, 230}, {220, 236, 214},
                                {240, 236, 200}, {212, 220, 240}, {240, 218, 212}, {226, 226, 226},
                                {206, 236, 226}, {236, 206, 216}, {226, 240, 236}, {216, 210, 236},
                                {240, 228, 220}, {222, 232, 200}, {204, 224, 232}, {234, 222, 240}};

// Half-extent of each size class at a 64-pixel frame.
constexpr int kHalfExtent[] = {7, 11, 16};

bool inside_shape(int shape, int dy, int dx, int s) {
  const int ay = std::abs(dy);
  const int ax = std::abs(dx);
  const int t = std::max(1, s / 3);
  switch (shape) {
    case 0:  // circle
      return dy * dy + dx * dx <= s * s;
    case 1:  // square
      return ay <= s && ax <= s;
    case 2:  // triangle, apex up
      return dy >= -s && dy <= s && 2 * ax <= dy + s;
    case 3:  // diamond
      return ay + ax <= s;
    case 4:  // cross
      return (ay <= s && ax <= t) || (ax <= s && ay <= t);
    default:  // bar
      return ax <= s && ay <= t;
  }
}

std::uint8_t jitter(std::uint8_t base, int delta) { return static_cast<std::uint8_t>(std::clamp(base + delta, 0, 255)); }

int index_of(const std::vector<std::string>& words, const std::string& w, const char* what) {
  auto it = std::find(words.begin(), words.end(), w);
  if (it == words.end()) throw FormatError(std::string("corpus: unknown ") + what + " '" + w + "'");
  return static_cast<int>(it - words.begin());
}

void write_text(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << content;
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError("images.bin: truncated while reading " + what);
  return v;
}

json config_to_json(const CorpusConfig& c) {
  return json{{"n_products", c.n_products},
              {"n_categories", c.n_categories},
              {"n_queries", c.n_queries},
              {"noise_rate", c.noise_rate},
              {"test_days", c.test_days},
              {"seed", c.seed},
              {"image_size", c.catalog.image_size},
              {"title_attribute_prob", c.catalog.title_attribute_prob},
              {"min_fillers", c.catalog.min_fillers},
              {"max_fillers", c.catalog.max_fillers},
              {"zipf_skew", c.clicks.zipf_skew},
              {"clicks_per_query", c.clicks.clicks_per_query},
              {"num_days", c.clicks.num_days},
              {"product_popularity_sigma", c.clicks.product_popularity_sigma}};
}

CorpusConfig config_from_json(const json& j) {
  CorpusConfig c;
  c.n_products = j.at("n_products").get<int>();
  c.n_categories = j.at("n_categories").get<int>();
  c.n_queries = j.at("n_queries").get<int>();
  c.noise_rate = j.at("noise_rate").get<double>();
  c.test_days = j.at("test_days").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.catalog.image_size = j.at("image_size").get<int>();
  c.catalog.title_attribute_prob = j.at("title_attribute_prob").get<double>();
  c.catalog.min_fillers = j.at("min_fillers").get<int>();
  c.catalog.max_fillers = j.at("max_fillers").get<int>();
  c.clicks.zipf_skew = j.at("zipf_skew").get<double>();
  c.clicks.clicks_per_query = j.at("clicks_per_query").get<int>();
  c.clicks.num_days = j.at("num_days").get<int>();
  c.clicks.product_popularity_sigma = j.at("product_popularity_sigma").get<double>();
  return c;
}

}  // namespace

const std::vector<std::string>& category_words() {
  static const std::vector<std::string> w = {"shoes", "bags",  "hats",  "shirts", "watches", "lamps", "mugs",  "chairs",
                                             "toys",  "books", "phones", "socks", "belts",   "vases", "clocks", "rings"};
  return w;
}

const std::vector<std::string>& color_words() {
  static const std::vector<std::string> w = {"red", "green", "blue", "yellow", "purple", "orange", "cyan", "black"};
  return w;
}

const std::vector<std::string>& shape_words() {
  static const std::vector<std::string> w = {"circle", "square", "triangle", "diamond", "cross", "bar"};
  return w;
}

const std::vector<std::string>& size_words() {
  static const std::vector<std::string> w = {"small", "medium", "large"};
  return w;
}

const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> w = {
      "new",    "sale",     "classic", "style",  "premium", "cheap",   "quality", "gift",    "home",  "daily",
      "cotton", "soft",     "modern",  "vintage", "deluxe", "best",    "hot",     "brand",   "fashion", "light",
      "portable", "limited", "pro",    "kids",   "men",     "women",   "summer",  "winter",  "basic", "original",
      "cute",   "elegant",  "sport",   "travel", "office",  "outdoor", "cozy",    "smart",   "simple", "lovely"};
  return w;
}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<std::int64_t>(i)).second) {
      throw FormatError("vocabulary: duplicate word '" + words_[i] + "'");
    }
  }
}

Vocabulary Vocabulary::desk() {
  std::vector<std::string> words = {"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"};
  for (const auto* list : {&category_words(), &color_words(), &shape_words(), &size_words(), &filler_words()}) {
    words.insert(words.end(), list->begin(), list->end());
  }
  return Vocabulary(std::move(words));
}

const std::string& Vocabulary::word(std::int64_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw IndexError("vocabulary: token id " + std::to_string(id) + " out of range [0, " +
                     std::to_string(words_.size()) + ")");
  }
  return words_[static_cast<std::size_t>(id)];
}

std::int64_t Vocabulary::id(const std::string& w) const {
  auto it = index_.find(w);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<std::int64_t> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<std::int64_t> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string t;
  while (in >> t) out.push_back(t);
  return out;
}

std::string join(const std::vector<std::string>& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) s += ' ';
    s += tokens[i];
  }
  return s;
}

vision::Image Product::image() const {
  vision::Image img(image_size, image_size, 3);
  for (std::size_t i = 0; i < pixels.size(); ++i) img.pixels[i] = static_cast<float>(pixels[i]) / 255.0f;
  return img;
}

std::vector<std::string> Product::attribute_tokens() const {
  return {category_words()[category], color_words()[color], shape_words()[shape], size_words()[size]};
}

bool Query::matches(const Product& p) const {
  return (category < 0 || category == p.category) && (color < 0 || color == p.color) &&
         (shape < 0 || shape == p.shape) && (size < 0 || size == p.size);
}

std::vector<Product> gen_catalog(int n_products, int n_categories, std::uint64_t seed, const CatalogOptions& options) {
  if (n_categories < 1 || n_products < n_categories) {
    throw ConfigError("gen_catalog: need n_products >= n_categories >= 1, got " + std::to_string(n_products) +
                      " products and " + std::to_string(n_categories) + " categories");
  }
  if (n_categories > static_cast<int>(category_words().size())) {
    throw ConfigError("gen_catalog: at most " + std::to_string(category_words().size()) + " categories supported");
  }
  if (options.image_size < 32) throw ConfigError("gen_catalog: image_size must be >= 32");
  if (options.min_fillers < 0 || options.max_fillers < options.min_fillers ||
      options.max_fillers > static_cast<int>(filler_words().size())) {
    throw ConfigError("gen_catalog: invalid filler range");
  }
  const int size = options.image_size;
  std::vector<Product> products;
  products.reserve(static_cast<std::size_t>(n_products));
  for (int i = 0; i < n_products; ++i) {
    // One stream per product keeps every product a function of (seed, id).
    std::mt19937_64 rng(derive_seed(seed, "product/" + std::to_string(i)));
    Product p;
    p.id = i;
    p.category = i % n_categories;
    p.color = std::uniform_int_distribution<int>(0, static_cast<int>(color_words().size()) - 1)(rng);
    p.shape = std::uniform_int_distribution<int>(0, static_cast<int>(shape_words().size()) - 1)(rng);
    p.size = std::uniform_int_distribution<int>(0, static_cast<int>(size_words().size()) - 1)(rng);
    p.image_size = size;

    std::bernoulli_distribution mention(options.title_attribute_prob);
    p.title.push_back(category_words()[p.category]);
    if (mention(rng)) p.title.push_back(color_words()[p.color]);
    if (mention(rng)) p.title.push_back(shape_words()[p.shape]);
    if (mention(rng)) p.title.push_back(size_words()[p.size]);
    const int n_fill = std::uniform_int_distribution<int>(options.min_fillers, options.max_fillers)(rng);
    std::vector<int> fill(filler_words().size());
    std::iota(fill.begin(), fill.end(), 0);
    std::shuffle(fill.begin(), fill.end(), rng);
    for (int f = 0; f < n_fill; ++f) p.title.push_back(filler_words()[fill[f]]);
    std::shuffle(p.title.begin(), p.title.end(), rng);

    std::uniform_int_distribution<int> shade(-10, 10);
    const Rgb bg = kBackgrounds[p.category];
    const Rgb back{jitter(bg.r, shade(rng)), jitter(bg.g, shade(rng)), jitter(bg.b, shade(rng))};
    const Rgb fg = kObjectColors[p.color];
    const int s = std::max(2, static_cast<int>(std::lround(kHalfExtent[p.size] * size / 64.0)) +
                                  std::uniform_int_distribution<int>(-1, 1)(rng));
    const int cy = std::uniform_int_distribution<int>(s + 1, size - 2 - s)(rng);
    const int cx = std::uniform_int_distribution<int>(s + 1, size - 2 - s)(rng);

    p.pixels.resize(static_cast<std::size_t>(size) * size * 3);
    int top = size, left = size, bottom = 0, right = 0;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const bool on = inside_shape(p.shape, y - cy, x - cx, s);
        const Rgb c = on ? fg : back;
        auto* px = &p.pixels[(static_cast<std::size_t>(y) * size + x) * 3];
        px[0] = c.r;
        px[1] = c.g;
        px[2] = c.b;
        if (on) {
          top = std::min(top, y);
          left = std::min(left, x);
          bottom = std::max(bottom, y + 1);
          right = std::max(right, x + 1);
        }
      }
    }
    p.truth_box = vision::RoI{top, left, bottom, right};
    products.push_back(std::move(p));
  }
  return products;
}

ClickLog gen_click_log(const std::vector<Product>& catalog, int n_queries, double noise_rate, std::uint64_t seed,
                       const ClickOptions& options) {
  if (!(noise_rate >= 0.0 && noise_rate < 0.5)) {
    throw ConfigError("gen_click_log: noise_rate must lie in [0, 0.5), got " + std::to_string(noise_rate));
  }
  if (catalog.empty() || n_queries < 1) throw ConfigError("gen_click_log: need a catalog and n_queries >= 1");
  if (options.num_days < 1 || options.clicks_per_query < 1) throw ConfigError("gen_click_log: invalid click options");

  ClickLog log;
  std::mt19937_64 rng(derive_seed(seed, "queries"));
  std::set<std::string> seen;
  std::uniform_int_distribution<std::size_t> pick_product(0, catalog.size() - 1);
  std::bernoulli_distribution coin(0.5);
  const int max_attempts = 200 * n_queries;
  for (int attempt = 0; attempt < max_attempts && static_cast<int>(log.queries.size()) < n_queries; ++attempt) {
    const Product& src = catalog[pick_product(rng)];
    Query q;
    const bool with_category = coin(rng);
    std::vector<int> visual = {0, 1, 2};
    std::shuffle(visual.begin(), visual.end(), rng);
    const int n_visual = coin(rng) ? 2 : 1;
    for (int v = 0; v < n_visual; ++v) {
      if (visual[v] == 0) q.color = src.color;
      if (visual[v] == 1) q.shape = src.shape;
      if (visual[v] == 2) q.size = src.size;
    }
    if (with_category) q.category = src.category;
    if (q.size >= 0) q.tokens.push_back(size_words()[q.size]);
    if (q.color >= 0) q.tokens.push_back(color_words()[q.color]);
    if (q.shape >= 0) q.tokens.push_back(shape_words()[q.shape]);
    if (q.category >= 0) q.tokens.push_back(category_words()[q.category]);
    if (!seen.insert(q.text()).second) continue;
    q.id = static_cast<std::int64_t>(log.queries.size());
    log.queries.push_back(std::move(q));
  }
  if (static_cast<int>(log.queries.size()) < n_queries) {
    throw ConfigError("gen_click_log: catalog supports only " + std::to_string(log.queries.size()) +
                      " distinct queries, " + std::to_string(n_queries) + " requested");
  }

  // Zipf popularity over a random ranking of the queries.
  std::vector<std::size_t> rank(log.queries.size());
  std::iota(rank.begin(), rank.end(), 0);
  std::shuffle(rank.begin(), rank.end(), rng);
  std::vector<double> query_weight(log.queries.size());
  for (std::size_t r = 0; r < rank.size(); ++r) {
    query_weight[rank[r]] = 1.0 / std::pow(static_cast<double>(r + 1), options.zipf_skew);
  }
  std::lognormal_distribution<double> pop(0.0, options.product_popularity_sigma);
  std::vector<double> product_weight(catalog.size());
  for (auto& w : product_weight) w = pop(rng);

  std::vector<std::vector<std::size_t>> matches(log.queries.size());
  std::vector<std::discrete_distribution<std::size_t>> pick_match(log.queries.size());
  for (std::size_t qi = 0; qi < log.queries.size(); ++qi) {
    std::vector<double> w;
    for (std::size_t pi = 0; pi < catalog.size(); ++pi) {
      if (log.queries[qi].matches(catalog[pi])) {
        matches[qi].push_back(pi);
        w.push_back(product_weight[pi]);
      }
    }
    pick_match[qi] = std::discrete_distribution<std::size_t>(w.begin(), w.end());
  }

  std::discrete_distribution<std::size_t> pick_query(query_weight.begin(), query_weight.end());
  std::uniform_int_distribution<int> pick_day(0, options.num_days - 1);
  std::bernoulli_distribution noisy(noise_rate);
  const std::size_t total = static_cast<std::size_t>(options.clicks_per_query) * log.queries.size();
  log.clicks.reserve(total);
  for (std::size_t c = 0; c < total; ++c) {
    const std::size_t qi = pick_query(rng);
    Click click;
    click.query_id = log.queries[qi].id;
    click.day = pick_day(rng);
    if (noisy(rng)) {
      click.product_id = catalog[pick_product(rng)].id;
    } else {
      click.product_id = catalog[matches[qi][pick_match[qi](rng)]].id;
    }
    log.clicks.push_back(click);
  }
  std::stable_sort(log.clicks.begin(), log.clicks.end(),
                   [](const Click& a, const Click& b) { return a.day < b.day; });
  return log;
}

Corpus generate_corpus(const CorpusConfig& config) {
  if (config.test_days < 1 || config.test_days >= config.clicks.num_days) {
    throw ConfigError("corpus: test_days must lie in [1, num_days)");
  }
  Corpus corpus;
  corpus.config = config;
  corpus.vocab = Vocabulary::desk();
  corpus.products = gen_catalog(config.n_products, config.n_categories, derive_seed(config.seed, "catalog"),
                                config.catalog);
  auto log = gen_click_log(corpus.products, config.n_queries, config.noise_rate, derive_seed(config.seed, "clicks"),
                           config.clicks);
  corpus.queries = std::move(log.queries);
  corpus.clicks = std::move(log.clicks);
  return corpus;
}

std::vector<Click> Corpus::train_clicks() const {
  std::vector<Click> out;
  const int boundary = config.clicks.num_days - config.test_days;
  for (const auto& c : clicks) {
    if (c.day < boundary) out.push_back(c);
  }
  return out;
}

std::vector<Click> Corpus::test_clicks() const {
  std::vector<Click> out;
  const int boundary = config.clicks.num_days - config.test_days;
  for (const auto& c : clicks) {
    if (c.day >= boundary) out.push_back(c);
  }
  return out;
}

void Corpus::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_text(dir / "manifest.json",
             json{{"format_version", kCorpusFormatVersion}, {"config", config_to_json(config)}}.dump(2) + "\n");

  std::string vocab_text;
  for (const auto& w : vocab.words()) vocab_text += w + "\n";
  write_text(dir / "vocab.txt", vocab_text);

  std::string products_text;
  for (std::size_t i = 0; i < products.size(); ++i) {
    const auto& p = products[i];
    json j{{"id", p.id},
           {"category", category_words()[p.category]},
           {"color", color_words()[p.color]},
           {"shape", shape_words()[p.shape]},
           {"size", size_words()[p.size]},
           {"title", join(p.title)},
           {"image_index", i},
           {"truth_box", {p.truth_box.top, p.truth_box.left, p.truth_box.bottom, p.truth_box.right}}};
    products_text += j.dump() + "\n";
  }
  write_text(dir / "products.jsonl", products_text);

  {
    std::ofstream out(dir / "images.bin", std::ios::binary);
    if (!out) throw IoError("cannot open " + (dir / "images.bin").string() + " for writing");
    out.write("ACEI", 4);
    put<std::uint32_t>(out, kCorpusFormatVersion);
    put<std::uint64_t>(out, products.size());
    const std::uint32_t side = products.empty() ? 0 : static_cast<std::uint32_t>(products.front().image_size);
    put<std::uint32_t>(out, side);
    put<std::uint32_t>(out, side);
    put<std::uint32_t>(out, 3);
    for (const auto& p : products) {
      out.write(reinterpret_cast<const char*>(p.pixels.data()), static_cast<std::streamsize>(p.pixels.size()));
    }
    if (!out) throw IoError("write failed: " + (dir / "images.bin").string());
  }

  std::string queries_text;
  for (const auto& q : queries) queries_text += json{{"id", q.id}, {"text", q.text()}}.dump() + "\n";
  write_text(dir / "queries.jsonl", queries_text);

  std::string clicks_text = "query_id\tproduct_id\ttimestamp\tcount\n";
  for (const auto& c : clicks) {
    clicks_text += std::to_string(c.query_id) + "\t" + std::to_string(c.product_id) + "\t" + std::to_string(c.day) + "\t" +
                   std::to_string(c.count) + "\n";
  }
  write_text(dir / "clicks.tsv", clicks_text);
}

Corpus Corpus::load(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("corpus directory not found: " + dir.string());
  Corpus corpus;
  try {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw IoError("cannot open " + (dir / "manifest.json").string());
    const json manifest = json::parse(mf);
    const auto version = manifest.at("format_version").get<std::uint32_t>();
    if (version != kCorpusFormatVersion) {
      throw FormatError("corpus: unsupported format version " + std::to_string(version));
    }
    corpus.config = config_from_json(manifest.at("config"));
    corpus.vocab = Vocabulary(read_lines(dir / "vocab.txt"));

    for (const auto& line : read_lines(dir / "products.jsonl")) {
      const json j = json::parse(line);
      Product p;
      p.id = j.at("id").get<std::int64_t>();
      p.category = index_of(category_words(), j.at("category").get<std::string>(), "category");
      p.color = index_of(color_words(), j.at("color").get<std::string>(), "color");
      p.shape = index_of(shape_words(), j.at("shape").get<std::string>(), "shape");
      p.size = index_of(size_words(), j.at("size").get<std::string>(), "size");
      p.title = tokenize(j.at("title").get<std::string>());
      const auto box = j.at("truth_box").get<std::vector<int>>();
      if (box.size() != 4) throw FormatError("corpus: truth_box needs 4 coordinates");
      p.truth_box = vision::RoI{box[0], box[1], box[2], box[3]};
      if (j.at("image_index").get<std::size_t>() != corpus.products.size()) {
        throw FormatError("corpus: products.jsonl image_index out of order");
      }
      corpus.products.push_back(std::move(p));
    }

    std::ifstream img(dir / "images.bin", std::ios::binary);
    if (!img) throw IoError("cannot open " + (dir / "images.bin").string());
    char magic[4];
    img.read(magic, 4);
    if (!img || std::memcmp(magic, "ACEI", 4) != 0) throw FormatError("images.bin: bad magic");
    if (get<std::uint32_t>(img, "version") != kCorpusFormatVersion) throw FormatError("images.bin: unsupported version");
    const auto count = get<std::uint64_t>(img, "count");
    const auto h = get<std::uint32_t>(img, "height");
    const auto w = get<std::uint32_t>(img, "width");
    const auto c = get<std::uint32_t>(img, "channels");
    if (count != corpus.products.size() || h != w || c != 3) {
      throw FormatError("images.bin: header does not match products.jsonl");
    }
    for (auto& p : corpus.products) {
      p.image_size = static_cast<int>(h);
      p.pixels.resize(static_cast<std::size_t>(h) * w * c);
      img.read(reinterpret_cast<char*>(p.pixels.data()), static_cast<std::streamsize>(p.pixels.size()));
      if (!img) throw FormatError("images.bin: truncated pixel data");
    }

    for (const auto& line : read_lines(dir / "queries.jsonl")) {
      const json j = json::parse(line);
      Query q;
      q.id = j.at("id").get<std::int64_t>();
      q.tokens = tokenize(j.at("text").get<std::string>());
      for (const auto& t : q.tokens) {
        const auto find = [&](const std::vector<std::string>& words) {
          auto it = std::find(words.begin(), words.end(), t);
          return it == words.end() ? -1 : static_cast<int>(it - words.begin());
        };
        if (int v = find(category_words()); v >= 0) q.category = v;
        if (int v = find(color_words()); v >= 0) q.color = v;
        if (int v = find(shape_words()); v >= 0) q.shape = v;
        if (int v = find(size_words()); v >= 0) q.size = v;
      }
      corpus.queries.push_back(std::move(q));
    }

    const auto click_lines = read_lines(dir / "clicks.tsv");
    for (std::size_t i = 1; i < click_lines.size(); ++i) {
      std::istringstream in(click_lines[i]);
      Click click;
      if (!(in >> click.query_id >> click.product_id >> click.day >> click.count) || click.count < 1) {
        throw FormatError("clicks.tsv: malformed line " + std::to_string(i + 1));
      }
      corpus.clicks.push_back(click);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("corpus: malformed JSON: ") + e.what());
  }
  return corpus;
}

std::unordered_map<std::int64_t, std::vector<std::int64_t>> hot_queries_by_product(const std::vector<Click>& clicks,
                                                                                    int max_per_product) {
  std::map<std::int64_t, std::map<std::int64_t, int>> counts;
  for (const auto& c : clicks) counts[c.product_id][c.query_id] += c.count;
  std::unordered_map<std::int64_t, std::vector<std::int64_t>> out;
  for (const auto& [pid, per_query] : counts) {
    std::vector<std::pair<int, std::int64_t>> ranked;
    for (const auto& [qid, n] : per_query) ranked.emplace_back(-n, qid);
    std::sort(ranked.begin(), ranked.end());
    auto& list = out[pid];
    for (std::size_t i = 0; i < ranked.size() && static_cast<int>(i) < max_per_product; ++i) {
      list.push_back(ranked[i].second);
    }
  }
  return out;
}

}  // namespace acebert::synth
