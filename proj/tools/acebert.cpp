// Command-line entry point: one subcommand per pipeline stage, all sharing a
// run directory that holds the resolved config and every artifact.

#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "acebert/checkpoint.hpp"
#include "acebert/errors.hpp"
#include "acebert/pipeline.hpp"
#include "acebert/random.hpp"

namespace fs = std::filesystem;
using namespace acebert;
using nlohmann::json;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

// Flags shared by every subcommand. Optional values override the config
// only when given.
struct Common {
  std::string config_path;
  std::string run_dir;
  std::string runs_root = "runs";
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<bool> use_roi, use_patch, use_pixel, use_hot_query, use_adversarial;
  std::optional<std::size_t> partitions;
  std::optional<double> gamma;
  std::optional<int> disc_every;
  std::string ks;
  bool force = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "JSON config file")->check(CLI::ExistingFile);
  app->add_option("--run-dir", c.run_dir, "Existing or new run directory");
  app->add_option("--runs-root", c.runs_root, "Parent of auto-named run directories");
  app->add_option("--set", c.sets, "Override as section.key=value (repeatable)");
  app->add_option("--seed", c.seed, "Master seed");
  app->add_option("--use_roi", c.use_roi, "Crop the detected object before patch features");
  app->add_option("--use_patch", c.use_patch, "Include RoI patch features");
  app->add_option("--use_pixel", c.use_pixel, "Include pixel patch features");
  app->add_option("--use_hot_query", c.use_hot_query, "Append hot queries to product inputs");
  app->add_option("--use_adversarial", c.use_adversarial, "Train with the domain discriminator");
  app->add_option("--partitions", c.partitions, "Fine-tuning dataset partitions");
  app->add_option("--gamma", c.gamma, "Softmax smoothing factor");
  app->add_option("--disc-every", c.disc_every, "Encoder steps per discriminator step");
  app->add_option("--k", c.ks, "Comma-separated recall cutoffs, e.g. 10,50,100");
  app->add_flag("--force", c.force, "Recompute a stage whose output already exists");
}

std::vector<std::size_t> parse_ks(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(item, &used);
      if (used != item.size() || v == 0) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("--k expects positive integers separated by commas, got '" + text + "'");
    }
  }
  if (out.empty()) throw ConfigError("--k is empty");
  return out;
}

// defaults < run-dir config.json (or --config) < --set < dedicated flags.
pipeline::RunConfig build_config(const Common& c, const fs::path& run_dir) {
  json j = json::object();
  const auto stored = run_dir / "config.json";
  if (!run_dir.empty() && fs::exists(stored)) {
    std::ifstream in(stored);
    j = json::parse(in);
  } else if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config " + c.config_path + " is not valid JSON: " + e.what());
    }
  }
  for (const auto& s : c.sets) pipeline::apply_override(j, s);
  auto set = [&](const char* section, const char* key, const auto& v) {
    if (v) j[section][key] = *v;
  };
  if (c.seed) j["seed"] = *c.seed;
  set("image", "use_roi", c.use_roi);
  set("ablation", "use_patch", c.use_patch);
  set("ablation", "use_pixel", c.use_pixel);
  set("ablation", "use_hot_query", c.use_hot_query);
  set("ablation", "use_adversarial", c.use_adversarial);
  set("finetune", "partitions", c.partitions);
  set("finetune", "gamma", c.gamma);
  set("finetune", "disc_every", c.disc_every);
  if (!c.ks.empty()) j["eval"]["ks"] = parse_ks(c.ks);
  auto config = pipeline::config_from_json(j);
  config.resolve();
  return config;
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return out.str();
}

struct Run {
  fs::path dir;
  pipeline::RunConfig config;

  fs::path data() const { return dir / "data"; }
  fs::path pretrain_ckpt() const { return dir / "pretrain.ckpt"; }
  fs::path finetune_ckpt() const { return dir / "finetune.ckpt"; }
  fs::path student_ckpt() const { return dir / "student.ckpt"; }
  fs::path embeddings() const { return dir / "embeddings.bin"; }
};

// Only stages that start a run may create its directory.
Run open_run(const Common& c, bool may_create) {
  Run run;
  if (!c.run_dir.empty()) run.dir = c.run_dir;
  if (!may_create && (run.dir.empty() || !fs::is_directory(run.dir))) {
    throw ConfigError(run.dir.empty() ? "--run-dir is required for this subcommand"
                                      : "run directory " + run.dir.string() + " does not exist");
  }
  run.config = build_config(c, run.dir);
  if (run.dir.empty()) run.dir = fs::path(c.runs_root) / (timestamp() + "-" + pipeline::config_hash(run.config));
  fs::create_directories(run.dir);

  const auto stored = run.dir / "config.json";
  const auto resolved = pipeline::config_to_json(run.config);
  std::optional<std::string> previous_hash;
  if (fs::exists(stored)) previous_hash = pipeline::config_hash(pipeline::load_config(stored));
  std::ofstream(stored) << resolved.dump(2) << '\n';

  auto file_sink = std::make_shared<spdlog::sinks::basic_file_sink_mt>((run.dir / "run.log").string());
  auto console = std::make_shared<spdlog::sinks::stderr_color_sink_mt>();
  spdlog::set_default_logger(std::make_shared<spdlog::logger>("acebert", spdlog::sinks_init_list{console, file_sink}));
  spdlog::info("run directory {}", run.dir.string());
  spdlog::info("resolved config (hash {}): {}", pipeline::config_hash(run.config), resolved.dump());
  if (previous_hash && *previous_hash != pipeline::config_hash(run.config)) {
    spdlog::warn("config changed from {}; artifacts from earlier stages were built with the old config", *previous_hash);
  }
  return run;
}

pipeline::Assets load_assets(const Run& run) {
  if (!fs::exists(run.data() / "manifest.json")) {
    throw IoError("no corpus in " + run.data().string() + "; run gen-data first");
  }
  return pipeline::assets_for(synth::Corpus::load(run.data()), run.config);
}

Checkpoint require_checkpoint(const fs::path& path, const char* producer) {
  if (!fs::exists(path)) throw IoError("missing checkpoint " + path.string() + " (run " + producer + " first)");
  return load_checkpoint(path);
}

bool skip_existing(const fs::path& output, const Common& c, const char* stage) {
  if (fs::exists(output) && !c.force) {
    spdlog::info("{} already complete ({} exists); pass --force to redo it", stage, output.string());
    return true;
  }
  return false;
}

void stage_gen_data(const Run& run, const Common& c) {
  if (skip_existing(run.data() / "manifest.json", c, "gen-data")) return;
  const auto corpus = synth::generate_corpus(run.config.data);
  corpus.save(run.data());
  spdlog::info("wrote {} products, {} queries, {} click records to {}", corpus.products.size(),
               corpus.queries.size(), corpus.clicks.size(), run.data().string());
}

void stage_pretrain(const Run& run, const Common& c) {
  if (skip_existing(run.pretrain_ckpt(), c, "pretrain")) return;
  const auto assets = load_assets(run);
  auto params = pipeline::init_model(run.config);
  std::ofstream log(run.dir / "pretrain_log.tsv");
  const auto history = pipeline::run_pretrain(run.config, assets, params, &log);
  save_checkpoint(run.pretrain_ckpt(), run.config.encoder, params, &assets.extractor);
  const auto& last = history.back();
  spdlog::info("pretrain done: {} steps, final L_MLM {:.4f} L_MPM {:.4f} L_TIP {:.4f}", history.size(), last.mlm,
               last.mpm, last.tip);
}

void stage_finetune(const Run& run, const Common& c, const std::string& init) {
  if (skip_existing(run.finetune_ckpt(), c, "finetune")) return;
  const auto assets = load_assets(run);
  const fs::path source = init.empty() ? run.pretrain_ckpt() : fs::path(init);
  auto ckpt = require_checkpoint(source, "pretrain");
  std::ofstream log(run.dir / "finetune_log.tsv");
  const auto history = pipeline::run_finetune(run.config, assets, ckpt.params, &log);
  if (run.config.finetune.use_hot_query) {
    std::ofstream table(run.dir / "hot_queries.tsv");
    finetune::write_hot_query_table(
        table, finetune::compute_hot_queries(assets.corpus.train_clicks(), run.config.finetune.hot_limit));
  }
  save_checkpoint(run.finetune_ckpt(), run.config.encoder, ckpt.params, &assets.extractor);
  spdlog::info("finetune done: {} phase steps from {}", history.size(), source.string());
}

void stage_eval(const Run& run) {
  const auto assets = load_assets(run);
  const auto ckpt = require_checkpoint(run.finetune_ckpt(), "finetune");
  const auto result = pipeline::evaluate(run.config, assets, ckpt.params);
  std::ofstream out(run.dir / "eval_report.tsv");
  retrieval::write_report(out, result.report);
  out << "domain_probe\t-\t" << std::setprecision(8) << result.probe_accuracy << '\n';
  retrieval::print_summary(std::cout, result.report);
  std::cout << "domain probe accuracy: " << std::fixed << std::setprecision(4) << result.probe_accuracy << '\n';
  spdlog::info("wrote {}", (run.dir / "eval_report.tsv").string());
}

void stage_export_embeddings(const Run& run, const Common& c) {
  if (skip_existing(run.embeddings(), c, "export")) return;
  const auto assets = load_assets(run);
  const auto ckpt = require_checkpoint(run.finetune_ckpt(), "finetune");
  auto enc = run.config.encoder;
  enc.dropout = 0.0;
  const auto builder = pipeline::make_builder(run.config, assets);
  const auto cache = serving::export_embeddings(assets.corpus, builder, ckpt.params, enc, run.embeddings());
  spdlog::info("exported {} product embeddings (dim {}) to {}", cache.ids.size(), cache.dim,
               run.embeddings().string());
}

std::vector<InputSequence> query_sequences(const pipeline::Assets& assets, const pipeline::RunConfig& config,
                                           const std::vector<std::vector<std::string>>& texts) {
  std::vector<InputSequence> out;
  for (const auto& t : texts) {
    out.push_back(make_query_sequence(assets.corpus.vocab.encode(t), config.finetune.max_query_len));
  }
  return out;
}

void stage_distill(const Run& run, const Common& c) {
  if (skip_existing(run.student_ckpt(), c, "distill")) return;
  const auto assets = load_assets(run);
  const auto teacher = require_checkpoint(run.finetune_ckpt(), "finetune");
  std::vector<std::vector<std::string>> held_out;
  for (const auto& q : assets.corpus.queries) held_out.push_back(q.tokens);
  const auto texts = pipeline::distill_query_texts(assets, run.config.serving.distill_queries,
                                                   derive_seed(run.config.seed, "distill.corpus"), held_out);
  auto enc = run.config.encoder;
  enc.dropout = 0.0;
  const auto result =
      serving::distill_query_encoder(teacher.params, enc, run.config.serving.student, query_sequences(assets, run.config, texts));
  {
    std::ofstream log(run.dir / "distill_log.tsv");
    log << "step\tL_distill\n";
    for (std::size_t i = 0; i < result.losses.size(); ++i) log << i << '\t' << result.losses[i] << '\n';
  }
  save_checkpoint(run.student_ckpt(), result.config, result.student);
  const double cosine =
      serving::mean_cosine(result.student, result.config, teacher.params, enc, query_sequences(assets, run.config, held_out));
  spdlog::info("distilled {}-layer student on {} queries; held-out mean cosine {:.4f}", result.config.layers,
               texts.size(), cosine);
}

// Most-clicked training queries, most clicks first.
std::vector<std::string> head_queries(const synth::Corpus& corpus, std::size_t count) {
  std::map<std::int64_t, long> clicks;
  for (const auto& c : corpus.train_clicks()) clicks[c.query_id] += c.count;
  std::vector<std::pair<long, std::int64_t>> order;
  for (const auto& [q, n] : clicks) order.emplace_back(-n, q);
  std::sort(order.begin(), order.end());
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::min(count, order.size()); ++i) {
    out.push_back(corpus.queries[static_cast<std::size_t>(order[i].second)].text());
  }
  return out;
}

void stage_serve(const Run& run, std::vector<std::string> queries, const std::string& queries_file, std::size_t probes) {
  if (!queries_file.empty()) {
    std::ifstream in(queries_file);
    if (!in) throw IoError("cannot open " + queries_file);
    for (std::string line; std::getline(in, line);) {
      if (!synth::tokenize(line).empty()) queries.push_back(line);
    }
  }
  if (queries.empty()) throw ConfigError("serve needs --query or --queries-file");
  const auto assets = load_assets(run);
  const auto teacher = require_checkpoint(run.finetune_ckpt(), "finetune");
  if (!fs::exists(run.embeddings())) throw IoError("missing " + run.embeddings().string() + " (run export first)");
  auto index = serving::read_cache(run.embeddings(), static_cast<std::size_t>(teacher.config.retrieval_dim)).to_index();
  if (probes > 0) {
    index.build_clusters(std::max<std::size_t>(run.config.eval.clusters, 1), derive_seed(run.config.seed, "serve.ivf"));
  }

  auto teacher_cfg = teacher.config;
  teacher_cfg.dropout = 0.0;
  serving::QueryEncoder offline(teacher.params, teacher_cfg, assets.corpus.vocab, run.config.finetune.max_query_len);
  const auto hot = serving::build_hot_cache(head_queries(assets.corpus, run.config.serving.hot_cache_size), offline);

  std::optional<Checkpoint> student;
  if (fs::exists(run.student_ckpt())) student = load_checkpoint(run.student_ckpt());
  const auto& online_params = student ? student->params : teacher.params;
  auto online_cfg = student ? student->config : teacher_cfg;
  online_cfg.dropout = 0.0;
  serving::QueryEncoder online(online_params, online_cfg, assets.corpus.vocab, run.config.finetune.max_query_len);
  spdlog::info("serving with {} hot queries cached; tail queries use the {}-layer {}", hot.size(), online_cfg.layers,
               student ? "student" : "teacher");

  for (const auto& q : queries) {
    const auto before = online.calls();
    const auto hits = serving::serve_query(q, hot, online, index, run.config.serving.top_k, probes);
    std::cout << "query: " << q << "  [" << (online.calls() == before ? "cache" : "encoder") << "]\n";
    for (std::size_t i = 0; i < hits.size(); ++i) {
      const auto& p = assets.corpus.products[static_cast<std::size_t>(hits[i].id)];
      std::cout << "  " << std::setw(2) << i + 1 << ". " << std::setw(5) << hits[i].id << "  " << std::fixed
                << std::setprecision(4) << hits[i].score << "  " << synth::join(p.title) << '\n';
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal product retrieval: data, training, evaluation and serving"};
  app.require_subcommand(1);
  Common common;
  std::string init;
  std::vector<std::string> queries;
  std::string queries_file;
  std::size_t probes = 0;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic catalog and click log");
  auto* pre = app.add_subcommand("pretrain", "Pretrain the cross-modal encoder (MLM, MPM, TIP)");
  auto* fin = app.add_subcommand("finetune", "Fine-tune the dual encoder on click pairs");
  fin->add_option("--init", init, "Pretrained checkpoint (default: the run's pretrain.ckpt)");
  auto* ev = app.add_subcommand("eval", "Recall@K, GAUC and domain probe on test-period clicks");
  auto* ex = app.add_subcommand("export", "Write product embeddings to the binary cache");
  auto* dis = app.add_subcommand("distill", "Distill a shallower query encoder");
  auto* srv = app.add_subcommand("serve", "Answer queries from the exported cache");
  srv->add_option("--query", queries, "Query text (repeatable)");
  srv->add_option("--queries-file", queries_file, "One query per line");
  srv->add_option("--probes", probes, "Inverted-file probes (0: exact search)");
  auto* all = app.add_subcommand("run", "gen-data, pretrain, finetune and eval in sequence");
  for (auto* sub : {gen, pre, fin, ev, ex, dis, srv, all}) add_common(sub, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    const auto run = open_run(common, gen->parsed() || all->parsed());
    if (gen->parsed()) stage_gen_data(run, common);
    if (pre->parsed()) stage_pretrain(run, common);
    if (fin->parsed()) stage_finetune(run, common, init);
    if (ev->parsed()) stage_eval(run);
    if (ex->parsed()) stage_export_embeddings(run, common);
    if (dis->parsed()) stage_distill(run, common);
    if (srv->parsed()) stage_serve(run, queries, queries_file, probes);
    if (all->parsed()) {
      stage_gen_data(run, common);
      stage_pretrain(run, common);
      stage_finetune(run, common, init);
      stage_eval(run);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return 0;
}
