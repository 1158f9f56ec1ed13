#include "acebert/pipeline.hpp"

#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "acebert/errors.hpp"
#include "acebert/random.hpp"

namespace acebert::pipeline {

using nlohmann::json;

namespace {

// Visits every configurable field as (section, key, reference). The empty
// section holds top-level keys.
template <class C, class F>
void fields(C& c, F&& f) {
  f("", "seed", c.seed);

  f("data", "n_products", c.data.n_products);
  f("data", "n_categories", c.data.n_categories);
  f("data", "n_queries", c.data.n_queries);
  f("data", "noise_rate", c.data.noise_rate);
  f("data", "test_days", c.data.test_days);
  f("data", "image_size", c.data.catalog.image_size);
  f("data", "title_attribute_prob", c.data.catalog.title_attribute_prob);
  f("data", "min_fillers", c.data.catalog.min_fillers);
  f("data", "max_fillers", c.data.catalog.max_fillers);
  f("data", "zipf_skew", c.data.clicks.zipf_skew);
  f("data", "clicks_per_query", c.data.clicks.clicks_per_query);
  f("data", "num_days", c.data.clicks.num_days);
  f("data", "product_popularity_sigma", c.data.clicks.product_popularity_sigma);

  f("image", "use_roi", c.image.use_roi);
  f("image", "roi_grid", c.image.roi_grid);
  f("image", "roi_canvas", c.image.roi_canvas);
  f("image", "roi_percentile", c.image.roi_percentile);
  f("image", "roi_margin", c.image.roi_margin);
  f("image", "pixel_target", c.image.pixel_target);
  f("image", "pixel_patch", c.image.pixel_patch);
  f("image", "standardize", c.image.standardize);

  f("encoder", "layers", c.encoder.layers);
  f("encoder", "hidden_dim", c.encoder.hidden_dim);
  f("encoder", "heads", c.encoder.heads);
  f("encoder", "ff_dim", c.encoder.ff_dim);
  f("encoder", "vocab_size", c.encoder.vocab_size);
  f("encoder", "max_positions", c.encoder.max_positions);
  f("encoder", "retrieval_dim", c.encoder.retrieval_dim);
  f("encoder", "patch_dim", c.encoder.patch_dim);
  f("encoder", "disc_hidden", c.encoder.disc_hidden);
  f("encoder", "dropout", c.encoder.dropout);

  f("pretrain", "steps", c.pretrain.steps);
  f("pretrain", "batch_size", c.pretrain.batch_size);
  f("pretrain", "lr", c.pretrain.lr);
  f("pretrain", "warmup_fraction", c.pretrain.warmup_fraction);
  f("pretrain", "text_mask_rate", c.pretrain.text_mask_rate);
  f("pretrain", "patch_mask_rate", c.pretrain.patch_mask_rate);
  f("pretrain", "max_grad_norm", c.pretrain.max_grad_norm);
  f("pretrain", "max_text_len", c.pretrain.max_text_len);

  f("finetune", "steps", c.finetune.steps);
  f("finetune", "batch_size", c.finetune.batch_size);
  f("finetune", "lr", c.finetune.lr);
  f("finetune", "disc_lr", c.finetune.disc_lr);
  f("finetune", "warmup_fraction", c.finetune.warmup_fraction);
  f("finetune", "gamma", c.finetune.gamma);
  f("finetune", "adv_weight", c.finetune.adv_weight);
  f("finetune", "disc_every", c.finetune.disc_every);
  f("finetune", "partitions", c.finetune.partitions);
  f("finetune", "max_grad_norm", c.finetune.max_grad_norm);
  f("finetune", "hot_limit", c.finetune.hot_limit);
  f("finetune", "max_text_len", c.finetune.max_text_len);
  f("finetune", "max_query_len", c.finetune.max_query_len);

  f("ablation", "use_patch", c.ablation.use_patch);
  f("ablation", "use_pixel", c.ablation.use_pixel);
  f("ablation", "use_hot_query", c.ablation.use_hot_query);
  f("ablation", "use_adversarial", c.ablation.use_adversarial);

  f("eval", "ks", c.eval.ks);
  f("eval", "gauc_negatives", c.eval.gauc_negatives);
  f("eval", "clusters", c.eval.clusters);
  f("eval", "probes", c.eval.probes);

  f("serving", "student_layers", c.serving.student.layers);
  f("serving", "distill_weight", c.serving.student.distill_weight);
  f("serving", "temperature", c.serving.student.temperature);
  f("serving", "distill_steps", c.serving.student.steps);
  f("serving", "distill_batch", c.serving.student.batch_size);
  f("serving", "distill_lr", c.serving.student.lr);
  f("serving", "hot_cache_size", c.serving.hot_cache_size);
  f("serving", "distill_queries", c.serving.distill_queries);
  f("serving", "top_k", c.serving.top_k);
}

std::string dotted(const std::string& section, const std::string& key) {
  return section.empty() ? key : section + "." + key;
}

}  // namespace

void RunConfig::resolve() {
  const auto& d = data;
  if (d.n_categories < 1) throw ConfigError("data.n_categories must be >= 1");
  if (d.n_products < d.n_categories) throw ConfigError("data.n_products must be >= data.n_categories");
  if (d.n_queries < 1) throw ConfigError("data.n_queries must be >= 1");
  if (!(d.noise_rate >= 0 && d.noise_rate < 0.5)) throw ConfigError("data.noise_rate must lie in [0, 0.5)");
  if (d.clicks.num_days < 2) throw ConfigError("data.num_days must be >= 2");
  if (d.test_days < 1 || d.test_days >= d.clicks.num_days) throw ConfigError("data.test_days must be in [1, num_days)");
  if (d.catalog.image_size < 16) throw ConfigError("data.image_size must be >= 16");

  data.seed = derive_seed(seed, "data");
  encoder.pixel_dim = image.pixel_dim();
  pretrain.use_patch = finetune.use_patch = ablation.use_patch;
  pretrain.use_pixel = finetune.use_pixel = ablation.use_pixel;
  finetune.use_hot_query = ablation.use_hot_query;
  finetune.use_adversarial = ablation.use_adversarial;
  pretrain.seed = derive_seed(seed, "pretrain");
  finetune.seed = derive_seed(seed, "finetune");
  serving.student.seed = derive_seed(seed, "distill");

  image.validate();
  encoder.validate();
  pretrain.validate();
  finetune.validate();
  serving.student.validate();
  if (static_cast<std::size_t>(encoder.vocab_size) < synth::Vocabulary::desk().size()) {
    throw ConfigError("encoder.vocab_size must cover the " + std::to_string(synth::Vocabulary::desk().size()) +
                      "-word vocabulary");
  }
  const int dense = 2 + image.patch_count() + image.pixel_count();
  if (std::max(pretrain.max_text_len, finetune.max_text_len) + dense > encoder.max_positions) {
    throw ConfigError("encoder.max_positions is too small for max_text_len plus image tokens");
  }
  if (serving.student.layers >= encoder.layers) {
    throw ConfigError("serving.student_layers must be below encoder.layers");
  }
  if (eval.ks.empty()) throw ConfigError("eval.ks must not be empty");
  for (auto k : eval.ks) {
    if (k == 0) throw ConfigError("eval.ks entries must be positive");
  }
  if (eval.clusters > 0 && (eval.probes < 1 || eval.probes > eval.clusters)) {
    throw ConfigError("eval.probes must be in [1, eval.clusters]");
  }
  if (serving.top_k == 0) throw ConfigError("serving.top_k must be positive");
}

RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  std::set<std::string> known_sections, known_keys;
  fields(c, [&](const std::string& section, const std::string& key, auto&) {
    if (!section.empty()) known_sections.insert(section);
    known_keys.insert(dotted(section, key));
  });
  for (const auto& [name, value] : j.items()) {
    if (known_sections.count(name)) {
      if (!value.is_object()) throw ConfigError("config section '" + name + "' must be an object");
      for (const auto& [key, _] : value.items()) {
        if (!known_keys.count(name + "." + key)) throw ConfigError("unknown config key '" + name + "." + key + "'");
      }
    } else if (!known_keys.count(name)) {
      throw ConfigError("unknown config key '" + name + "'");
    }
  }
  fields(c, [&](const std::string& section, const std::string& key, auto& ref) {
    const json* node = &j;
    if (!section.empty()) {
      if (!j.contains(section)) return;
      node = &j.at(section);
    }
    if (!node->contains(key)) return;
    try {
      node->at(key).get_to(ref);
    } catch (const json::exception&) {
      throw ConfigError("config field '" + dotted(section, key) + "' has the wrong type");
    }
  });
  return c;
}

json config_to_json(const RunConfig& config) {
  json j = json::object();
  fields(config, [&](const std::string& section, const std::string& key, const auto& ref) {
    if (section.empty()) {
      j[key] = ref;
    } else {
      j[section][key] = ref;
    }
  });
  return j;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const auto path = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  const auto dot = path.find('.');
  if (dot == std::string::npos) {
    j[path] = value;
  } else {
    j[path.substr(0, dot)][path.substr(dot + 1)] = value;
  }
}

std::string config_hash(const RunConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(mix64(fnv1a64(config_to_json(config).dump()))));
  return std::string(buf, 8);
}

Assets assets_for(synth::Corpus corpus, const RunConfig& config) {
  Assets a;
  a.corpus = std::move(corpus);
  a.extractor = vision::PatchFeatureExtractor::create(derive_seed(config.seed, "extractor"), config.encoder.patch_dim);
  a.features = compute_catalog_features(a.corpus.products, a.extractor, config.image);
  return a;
}

Assets generate_assets(const RunConfig& config) { return assets_for(synth::generate_corpus(config.data), config); }

ModelParams<float> init_model(const RunConfig& config) {
  return ModelParams<float>::init(config.encoder, derive_seed(config.seed, "init"));
}

std::vector<pretrain::StepLosses> run_pretrain(const RunConfig& config, const Assets& assets,
                                               ModelParams<float>& params, std::ostream* log) {
  return pretrain::run_pretraining(assets.corpus, assets.features, config.encoder, config.pretrain, params, log);
}

std::vector<finetune::StepRecord> run_finetune(const RunConfig& config, const Assets& assets,
                                               ModelParams<float>& params, std::ostream* log) {
  return finetune::run_finetuning(assets.corpus, assets.features, config.encoder, config.finetune, params, log);
}

finetune::SequenceBuilder make_builder(const RunConfig& config, const Assets& assets) {
  finetune::HotQueryTable hot;
  if (config.finetune.use_hot_query) {
    hot = finetune::compute_hot_queries(assets.corpus.train_clicks(), config.finetune.hot_limit);
  }
  return finetune::SequenceBuilder(assets.corpus, assets.features, std::move(hot), config.finetune, config.encoder);
}

Evaluation evaluate(const RunConfig& config, const Assets& assets, const ModelParams<float>& params) {
  auto enc = config.encoder;
  enc.dropout = 0.0;
  const auto builder = make_builder(config, assets);
  std::vector<std::int64_t> ids;
  std::vector<InputSequence> products;
  for (const auto& p : assets.corpus.products) {
    ids.push_back(p.id);
    products.push_back(builder.product(p.id));
  }
  const auto product_vectors = embed_sequences(products, params, enc);
  retrieval::EmbeddingIndex index(ids, product_vectors, static_cast<std::size_t>(enc.retrieval_dim));

  const auto spec = retrieval::build_eval_spec(assets.corpus.test_clicks());
  std::vector<InputSequence> queries;
  for (auto qid : spec.query_ids) queries.push_back(builder.query(qid));
  const auto query_vectors = embed_sequences(queries, params, enc);

  Evaluation out;
  out.report = retrieval::evaluate(index, query_vectors, spec, config.eval.ks, config.eval.gauc_negatives,
                                   derive_seed(config.seed, "eval.negatives"));
  out.probe_accuracy = retrieval::linear_probe_accuracy(query_vectors, product_vectors,
                                                        static_cast<std::size_t>(enc.retrieval_dim),
                                                        derive_seed(config.seed, "eval.probe"));
  return out;
}

std::vector<std::vector<std::string>> distill_query_texts(const Assets& assets, std::size_t count,
                                                          std::uint64_t seed,
                                                          const std::vector<std::vector<std::string>>& exclude) {
  const auto& products = assets.corpus.products;
  if (products.empty()) throw ConfigError("distillation corpus needs products");
  // Texts are compared as token sets, so a reordering of an excluded query
  // is excluded too.
  const auto key = [](std::vector<std::string> tokens) {
    std::sort(tokens.begin(), tokens.end());
    return synth::join(tokens);
  };
  std::set<std::string> seen;
  for (const auto& e : exclude) seen.insert(key(e));
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, products.size() - 1);
  std::uniform_int_distribution<std::size_t> filler(0, synth::filler_words().size() - 1);
  std::bernoulli_distribution coin(0.5);
  std::vector<std::vector<std::string>> out;
  for (std::size_t attempt = 0; attempt < 200 * count && out.size() < count; ++attempt) {
    const auto& p = products[pick(rng)];
    // Half follow the query grammar (one or two visual attributes, optional
    // category); the rest take any non-empty attribute subset plus an
    // optional filler word, which widens coverage beyond the grammar.
    bool size = false, color = false, shape = false, category = false;
    if (coin(rng)) {
      std::vector<int> visual = {0, 1, 2};
      std::shuffle(visual.begin(), visual.end(), rng);
      const int n_visual = coin(rng) ? 2 : 1;
      for (int v = 0; v < n_visual; ++v) {
        color |= visual[v] == 0;
        shape |= visual[v] == 1;
        size |= visual[v] == 2;
      }
      category = coin(rng);
    } else {
      while (!(size || color || shape || category)) {
        size = coin(rng), color = coin(rng), shape = coin(rng), category = coin(rng);
      }
    }
    std::vector<std::string> tokens;
    if (size) tokens.push_back(synth::size_words()[p.size]);
    if (color) tokens.push_back(synth::color_words()[p.color]);
    if (shape) tokens.push_back(synth::shape_words()[p.shape]);
    if (category) tokens.push_back(synth::category_words()[p.category]);
    if (!coin(rng)) tokens.insert(tokens.begin(), synth::filler_words()[filler(rng)]);
    if (seen.insert(key(tokens)).second) out.push_back(std::move(tokens));
  }
  return out;
}

}  // namespace acebert::pipeline
