#pragma once

// Whole-run configuration and the stage functions shared by the CLI and the
// acceptance harness.

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "acebert/encoder.hpp"
#include "acebert/features.hpp"
#include "acebert/finetune.hpp"
#include "acebert/pretrain.hpp"
#include "acebert/retrieval.hpp"
#include "acebert/serving.hpp"
#include "acebert/synth.hpp"
#include "acebert/vision.hpp"

namespace acebert::pipeline {

struct EvalConfig {
  std::vector<std::size_t> ks = {10, 50, 100};
  std::size_t gauc_negatives = 50;
  std::size_t clusters = 0;  // 0: exact search only
  std::size_t probes = 1;
};

struct ServingConfig {
  serving::StudentConfig student;
  std::size_t hot_cache_size = 100;  // most-clicked queries precomputed
  std::size_t distill_queries = 10000;  // synthetic query corpus size
  std::size_t top_k = 10;
};

struct Ablation {
  bool use_patch = true;
  bool use_pixel = true;
  bool use_hot_query = true;
  bool use_adversarial = true;
};

struct RunConfig {
  std::uint64_t seed = 1;  // master seed, fanned out per module
  synth::CorpusConfig data;
  ImageFeatureConfig image;
  EncoderConfig encoder;
  pretrain::PretrainConfig pretrain;
  finetune::FinetuneConfig finetune;
  Ablation ablation;
  EvalConfig eval;
  ServingConfig serving;

  // Copies the ablation switches, derived widths and per-module seeds into
  // the module configs, then validates everything. Throws ConfigError
  // naming the field.
  void resolve();
};

// Unknown keys anywhere are rejected with a ConfigError naming them.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& config);
RunConfig load_config(const std::filesystem::path& path);
// Applies "section.key=value" (value parsed as JSON, falling back to a
// string) to the JSON form of a config.
void apply_override(nlohmann::json& j, const std::string& assignment);
// First 8 hex digits of a hash of the canonical JSON.
std::string config_hash(const RunConfig& config);

struct Assets {
  synth::Corpus corpus;
  vision::PatchFeatureExtractor extractor;
  std::vector<ProductFeatures> features;
};

Assets generate_assets(const RunConfig& config);
// Features for an existing corpus with the run's frozen extractor.
Assets assets_for(synth::Corpus corpus, const RunConfig& config);

ModelParams<float> init_model(const RunConfig& config);
std::vector<pretrain::StepLosses> run_pretrain(const RunConfig& config, const Assets& assets,
                                               ModelParams<float>& params, std::ostream* log = nullptr);
std::vector<finetune::StepRecord> run_finetune(const RunConfig& config, const Assets& assets,
                                               ModelParams<float>& params, std::ostream* log = nullptr);

finetune::SequenceBuilder make_builder(const RunConfig& config, const Assets& assets);

struct Evaluation {
  retrieval::EvalReport report;
  double probe_accuracy = 0;  // linear domain probe, queries vs products
};

// Recall@K/GAUC on test-period clicks against the full catalog, plus the
// domain probe.
Evaluation evaluate(const RunConfig& config, const Assets& assets, const ModelParams<float>& params);

// Distinct synthetic queries (not in `exclude`) for distillation.
std::vector<std::vector<std::string>> distill_query_texts(const Assets& assets, std::size_t count,
                                                          std::uint64_t seed,
                                                          const std::vector<std::vector<std::string>>& exclude);

}  // namespace acebert::pipeline
