#include "ipt/runconfig.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ipt/analysis.hpp"
#include "ipt/harness.hpp"
#include "ipt/knowledge.hpp"
#include "ipt/serialize.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ipt {

// ------------------------------ logging ------------------------------

namespace {

int log_level() {
  static const int level = [] {
    const char* env = std::getenv("IPT_LOG");
    if (!env) return 1;
    const std::string v(env);
    if (v == "error") return 0;
    if (v == "debug") return 2;
    return 1;
  }();
  return level;
}

}  // namespace

void log_error(const std::string& msg) { std::fprintf(stderr, "[ipt] error: %s\n", msg.c_str()); }
void log_info(const std::string& msg) {
  if (log_level() >= 1) std::fprintf(stderr, "[ipt] %s\n", msg.c_str());
}
void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::fprintf(stderr, "[ipt] debug: %s\n", msg.c_str());
}

// ------------------------------ staging ------------------------------

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::string file_sha256(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return Sha256::hex(ss.str());
}

json parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
}

// Staged output directory: artifacts accumulate in a hidden sibling and the
// whole directory is published at finalize(), so a failed run leaves nothing.
class OutputStage {
 public:
  OutputStage(std::string out_dir, std::string command, std::string config_hash, uint64_t seed)
      : out_dir_(std::move(out_dir)),
        command_(std::move(command)),
        config_hash_(std::move(config_hash)),
        seed_(seed),
        started_(utc_now()) {
    if (out_dir_.empty()) throw ConfigError("--out directory is required");
    staging_ = out_dir_ + ".staging";
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }

  ~OutputStage() {
    if (!finalized_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }

  std::string path(const std::string& name) {
    outputs_.push_back(name);
    return staging_ + "/" + name;
  }

  void finalize() {
    json manifest;
    manifest["command"] = command_;
    manifest["config_sha256"] = config_hash_;
    manifest["seed"] = seed_;
    manifest["code_version"] = kIptVersion;
    manifest["started_utc"] = started_;
    manifest["finished_utc"] = utc_now();
    manifest["outputs"] = outputs_;
    const std::string tmp = staging_ + "/manifest.json.tmp";
    {
      std::ofstream out(tmp);
      out << manifest.dump(2) << "\n";
    }
    fs::rename(tmp, staging_ + "/manifest.json");

    fs::remove_all(out_dir_);
    fs::create_directories(fs::path(out_dir_).parent_path().empty()
                               ? fs::path(".")
                               : fs::path(out_dir_).parent_path());
    fs::rename(staging_, out_dir_);
    finalized_ = true;
    log_info(command_ + ": outputs in " + out_dir_);
  }

 private:
  std::string out_dir_, command_, config_hash_, seed_str_;
  std::string staging_;
  uint64_t seed_;
  std::string started_;
  std::vector<std::string> outputs_;
  bool finalized_ = false;
};

uint64_t pick_seed(const json& cfg, const CliOverrides& overrides) {
  if (overrides.seed) return *overrides.seed;
  return cfg.value("seed", uint64_t{1});
}

// ------------------------------ shared parsing ------------------------------

StrategyConfig parse_strategy_block(const json& block, const CliOverrides& overrides,
                                    uint64_t seed) {
  StrategyConfig cfg;
  if (block.contains("strategy")) cfg.kind = block.at("strategy").get<std::string>();
  if (overrides.strategy) cfg.kind = *overrides.strategy;
  cfg.encoder = block.value("encoder", cfg.encoder);
  cfg.prompt_len = block.value("prompt_len", cfg.prompt_len);
  cfg.utilization_rate = block.value("utilization_rate", cfg.utilization_rate);
  cfg.table_dim = block.value("table_dim", cfg.table_dim);
  cfg.encoder_hidden = block.value("encoder_hidden", cfg.encoder_hidden);
  cfg.hard_prefix = block.value("hard_prefix", cfg.hard_prefix);
  cfg.compose_prefix = block.value("compose_prefix", cfg.compose_prefix);
  cfg.seed = seed;
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

TrainConfig parse_train_block(const json& block, uint64_t seed) {
  const std::string preset = block.value("preset", std::string{"desk-defaults"});
  TrainConfig cfg;
  if (preset == "desk-defaults") {
    cfg = TrainConfig::desk_defaults();
  } else if (preset == "paper-defaults") {
    cfg = TrainConfig::paper_defaults();
  } else {
    throw ConfigError("train: unknown preset '" + preset +
                      "' (allowed: desk-defaults, paper-defaults)");
  }
  cfg.batch_size = block.value("batch_size", cfg.batch_size);
  cfg.lr = block.value("lr", cfg.lr);
  cfg.grad_accum_steps = block.value("grad_accum_steps", cfg.grad_accum_steps);
  cfg.warmup_steps = block.value("warmup_steps", cfg.warmup_steps);
  cfg.max_epochs = block.value("max_epochs", cfg.max_epochs);
  cfg.early_stop_patience = block.value("early_stop_patience", cfg.early_stop_patience);
  cfg.seed = seed;
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

std::string require_string(const json& cfg, const std::string& key, const std::string& what) {
  if (!cfg.contains(key)) throw ConfigError(what + ": missing required key '" + key + "'");
  return cfg.at(key).get<std::string>();
}

struct LoadedTask {
  Transformer backbone;
  Vocabulary vocab;
  TaskSpec spec;
  std::vector<int64_t> verbalizer;
};

LoadedTask load_task_context(const json& cfg) {
  const std::string backbone_path = require_string(cfg, "backbone", "train config");
  const std::string vocab_path = require_string(cfg, "vocab", "train config");
  const std::string spec_path = require_string(cfg, "task_spec", "train config");
  if (!fs::exists(backbone_path)) throw ConfigError("backbone checkpoint not found: " + backbone_path);
  if (!fs::exists(vocab_path)) throw ConfigError("vocab file not found: " + vocab_path);
  if (!fs::exists(spec_path)) throw ConfigError("task spec not found: " + spec_path);

  Transformer backbone = load_backbone(backbone_path);
  Vocabulary vocab = load_vocab(vocab_path);
  TaskSpec spec = load_task_spec(spec_path);
  std::vector<int64_t> verbalizer = spec.verbalizer_token_ids(vocab);
  return {std::move(backbone), std::move(vocab), std::move(spec), std::move(verbalizer)};
}

std::vector<LabeledInstance> load_instances(const std::string& path, const TaskSpec& spec,
                                            const Vocabulary& vocab) {
  if (!fs::exists(path)) throw ConfigError("dataset not found: " + path);
  return verbalize_dataset(load_jsonl_dataset(path, spec), spec, vocab);
}

// Pretrained prompt table from a classifier checkpoint, with the vocabulary
// equality check.
Tensor load_pretrained_table(const std::string& path, const Vocabulary& task_vocab) {
  if (!fs::exists(path)) throw ConfigError("classifier checkpoint not found: " + path);
  TrainedClassifier classifier = load_classifier(path);
  return pretrained_ipt_init(classifier, task_vocab);
}

void write_metrics_jsonl(const RunResult& result, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const EpochMetrics& m : result.epochs) {
    json j;
    j["epoch"] = m.epoch;
    j["train_loss"] = m.train_loss;
    j["dev_accuracy"] = m.dev_accuracy;
    out << j.dump() << "\n";
  }
}

json result_to_json(const RunResult& result) {
  json j;
  j["strategy"] = result.strategy;
  j["best_dev_accuracy"] = result.best_dev_accuracy;
  j["best_epoch"] = result.best_epoch;
  if (std::isfinite(result.test_accuracy)) j["test_accuracy"] = result.test_accuracy;
  j["trainable_params"] = result.trainable_params;
  j["trainable_ratio_vs_finetune"] = result.trainable_ratio_vs_finetune;
  j["epochs_run"] = result.epochs.size();
  j["seed"] = result.seed;
  j["wall_seconds"] = result.wall_seconds;
  return j;
}

}  // namespace

// ------------------------------ gen-data ------------------------------

void cmd_gen_data(const std::string& config_path, const std::string& out_dir,
                  const CliOverrides& overrides) {
  const json cfg = parse_config(config_path);
  const uint64_t seed = pick_seed(cfg, overrides);
  if (!cfg.contains("category_corpus") && !cfg.contains("trigger_task")) {
    throw ConfigError("gen-data: config needs 'category_corpus' and/or 'trigger_task'");
  }

  // validate both blocks before generating anything
  SynthCategoryConfig cat_cfg;
  if (cfg.contains("category_corpus")) {
    const json& c = cfg.at("category_corpus");
    cat_cfg.texts_per_category = c.value("texts_per_category", cat_cfg.texts_per_category);
    cat_cfg.text_len = c.value("text_len", cat_cfg.text_len);
    cat_cfg.markers_per_category = c.value("markers_per_category", cat_cfg.markers_per_category);
    cat_cfg.background_vocab = c.value("background_vocab", cat_cfg.background_vocab);
  }
  SynthTaskConfig task_cfg;
  if (cfg.contains("trigger_task")) {
    const json& c = cfg.at("trigger_task");
    task_cfg.n_classes = c.value("n_classes", task_cfg.n_classes);
    task_cfg.n_triggers = c.value("n_triggers", task_cfg.n_triggers);
    task_cfg.examples_per_class = c.value("examples_per_class", task_cfg.examples_per_class);
    task_cfg.text_len = c.value("text_len", task_cfg.text_len);
    task_cfg.background_vocab = c.value("background_vocab", task_cfg.background_vocab);
    task_cfg.answer_context_lines = c.value("answer_context_lines", task_cfg.answer_context_lines);
  }
  const double train_frac = cfg.value("train_fraction", 0.6);
  const double dev_frac = cfg.value("dev_fraction", 0.2);
  if (train_frac <= 0 || dev_frac <= 0 || train_frac + dev_frac >= 1.0) {
    throw ConfigError("gen-data: train/dev fractions must be positive and sum below 1");
  }

  OutputStage stage(out_dir, "gen-data", file_sha256(config_path), seed);
  std::vector<std::string> corpus_lines;

  if (cfg.contains("category_corpus")) {
    SynthCategoryCorpus corpus = gen_synth_category_corpus(cat_cfg, seed);
    save_category_jsonl(corpus.examples, stage.path("category_corpus.jsonl"));
    json markers;
    for (size_t c = 0; c < corpus.markers.size(); ++c) {
      markers[kCategoryNames[c]] = corpus.markers[c];
    }
    std::ofstream(stage.path("category_markers.json")) << markers.dump(2) << "\n";
    for (const auto& ex : corpus.examples) corpus_lines.push_back(ex.text);
  }

  if (cfg.contains("trigger_task")) {
    SynthTask task = gen_synth_task(task_cfg, seed + 1);
    save_task_spec(task.spec, stage.path("task_spec.json"));

    // stratified train/dev/test split
    Rng rng(seed + 2);
    std::vector<size_t> order(task.examples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<RawExample> train, dev, test;
    const size_t n_train = static_cast<size_t>(train_frac * static_cast<double>(order.size()));
    const size_t n_dev = static_cast<size_t>(dev_frac * static_cast<double>(order.size()));
    for (size_t i = 0; i < order.size(); ++i) {
      const RawExample& ex = task.examples[order[i]];
      if (i < n_train) {
        train.push_back(ex);
      } else if (i < n_train + n_dev) {
        dev.push_back(ex);
      } else {
        test.push_back(ex);
      }
    }
    save_jsonl_dataset(train, task.spec, stage.path("train.jsonl"));
    save_jsonl_dataset(dev, task.spec, stage.path("dev.jsonl"));
    save_jsonl_dataset(test, task.spec, stage.path("test.jsonl"));
    for (const auto& line : task.corpus_texts) corpus_lines.push_back(line);
  }

  {
    std::ofstream out(stage.path("corpus.txt"));
    for (const auto& line : corpus_lines) out << line << "\n";
  }
  stage.finalize();
}

// ------------------------------ pretrain-backbone ------------------------------

void cmd_pretrain_backbone(const std::string& config_path, const std::string& out_dir,
                           const CliOverrides& overrides) {
  const json cfg = parse_config(config_path);
  const uint64_t seed = pick_seed(cfg, overrides);
  const std::string corpus_path = require_string(cfg, "corpus", "pretrain-backbone config");
  if (!fs::exists(corpus_path)) throw ConfigError("corpus not found: " + corpus_path);

  TransformerConfig model_cfg;
  if (cfg.contains("model")) {
    const json& m = cfg.at("model");
    model_cfg.d_model = m.value("d_model", model_cfg.d_model);
    model_cfg.n_layers = m.value("n_layers", model_cfg.n_layers);
    model_cfg.n_heads = m.value("n_heads", model_cfg.n_heads);
    model_cfg.ff_dim = m.value("ff_dim", model_cfg.ff_dim);
    model_cfg.max_context = m.value("max_context", model_cfg.max_context);
    model_cfg.dropout = m.value("dropout", model_cfg.dropout);
  }
  MlmConfig mlm_cfg;
  if (cfg.contains("mlm")) {
    const json& m = cfg.at("mlm");
    mlm_cfg.mask_rate = m.value("mask_rate", mlm_cfg.mask_rate);
    mlm_cfg.steps = m.value("steps", mlm_cfg.steps);
    mlm_cfg.batch_size = m.value("batch_size", mlm_cfg.batch_size);
    mlm_cfg.lr = m.value("lr", mlm_cfg.lr);
    mlm_cfg.warmup_steps = m.value("warmup_steps", mlm_cfg.warmup_steps);
  }
  mlm_cfg.seed = seed;
  const int64_t min_count = cfg.value("min_count", int64_t{1});

  // read corpus lines (.txt) or jsonl {"text": ...}
  std::vector<std::string> texts;
  {
    std::ifstream in(corpus_path);
    std::string line;
    const bool jsonl = corpus_path.size() > 6 &&
                       corpus_path.compare(corpus_path.size() - 6, 6, ".jsonl") == 0;
    while (std::getline(in, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      texts.push_back(jsonl ? json::parse(line).at("text").get<std::string>() : line);
    }
  }
  if (texts.empty()) throw ConfigError("pretrain-backbone: corpus is empty");

  Vocabulary vocab = build_vocab(texts, min_count);
  model_cfg.vocab_size = vocab.size();
  try {
    model_cfg.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }

  OutputStage stage(out_dir, "pretrain-backbone", file_sha256(config_path), seed);
  Transformer model(model_cfg, seed);
  std::vector<std::vector<int64_t>> encoded;
  for (const std::string& text : texts) {
    auto ids = vocab.encode(text);
    if (!ids.empty() && static_cast<int64_t>(ids.size()) <= model_cfg.max_context) {
      encoded.push_back(std::move(ids));
    }
  }
  log_info("pretraining backbone: " + std::to_string(encoded.size()) + " sentences, vocab " +
           std::to_string(vocab.size()));
  MlmReport report = mlm_pretrain(model, encoded, mlm_cfg);

  save_backbone(model, stage.path("backbone.ckpt"));
  save_vocab(vocab, stage.path("vocab.json"));
  {
    std::ofstream out(stage.path("mlm_metrics.jsonl"));
    for (size_t i = 0; i < report.step_losses.size(); ++i) {
      json j;
      j["step"] = i + 1;
      j["loss"] = report.step_losses[i];
      out << j.dump() << "\n";
    }
  }
  {
    json j;
    j["initial_loss"] = report.initial_loss;
    j["final_loss"] = report.final_loss;
    j["vocab_size"] = vocab.size();
    j["param_count"] = param_count(model_cfg);
    std::ofstream(stage.path("result.json")) << j.dump(2) << "\n";
  }
  stage.finalize();
}

// ------------------------------ pretrain-prompts ------------------------------

void cmd_pretrain_prompts(const std::string& config_path, const std::string& out_dir,
                          const CliOverrides& overrides) {
  const json cfg = parse_config(config_path);
  const uint64_t seed = pick_seed(cfg, overrides);
  const std::string vocab_path = require_string(cfg, "vocab", "pretrain-prompts config");
  if (!fs::exists(vocab_path)) throw ConfigError("vocab file not found: " + vocab_path);

  std::vector<CategoryExample> examples;
  if (cfg.contains("manifest")) {
    std::map<std::string, std::string> manifest;
    for (const auto& [path, category] : cfg.at("manifest").items()) {
      if (!fs::exists(path)) throw ConfigError("manifest source not found: " + path);
      manifest[path] = category.get<std::string>();
    }
    try {
      examples = label_corpus_by_description(manifest);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  } else if (cfg.contains("corpus")) {
    const std::string corpus_path = cfg.at("corpus").get<std::string>();
    if (!fs::exists(corpus_path)) throw ConfigError("corpus not found: " + corpus_path);
    examples = load_category_jsonl(corpus_path);
    for (const auto& ex : examples) {
      if (!is_known_category(ex.category)) {
        throw ConfigError("unknown category '" + ex.category + "' in " + corpus_path);
      }
    }
  } else {
    throw ConfigError("pretrain-prompts: config needs 'corpus' or 'manifest'");
  }

  ClassifierConfig cls_cfg;
  if (cfg.contains("classifier")) {
    const json& c = cfg.at("classifier");
    cls_cfg.arch = c.value("arch", cls_cfg.arch);
    cls_cfg.embed_dim = c.value("embed_dim", cls_cfg.embed_dim);
    cls_cfg.channels = c.value("channels", cls_cfg.channels);
    cls_cfg.epochs = c.value("epochs", cls_cfg.epochs);
    cls_cfg.batch_size = c.value("batch_size", cls_cfg.batch_size);
    cls_cfg.lr = c.value("lr", cls_cfg.lr);
    cls_cfg.held_out_fraction = c.value("held_out_fraction", cls_cfg.held_out_fraction);
  }
  try {
    cls_cfg.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }

  Vocabulary vocab = load_vocab(vocab_path);
  OutputStage stage(out_dir, "pretrain-prompts", file_sha256(config_path), seed);
  log_info("training category classifier on " + std::to_string(examples.size()) + " examples");
  TrainedClassifier classifier = train_classifier(examples, vocab, cls_cfg, seed);
  save_classifier(classifier, stage.path("classifier.ckpt"));
  {
    json j;
    j["held_out_accuracy"] = classifier.held_out_accuracy;
    j["epoch_losses"] = classifier.epoch_losses;
    j["examples"] = examples.size();
    std::ofstream(stage.path("result.json")) << j.dump(2) << "\n";
  }
  stage.finalize();
}

// ------------------------------ train ------------------------------

void cmd_train(const std::string& config_path, const std::string& out_dir,
               const CliOverrides& overrides) {
  const json cfg = parse_config(config_path);
  const uint64_t seed = pick_seed(cfg, overrides);
  LoadedTask ctx = load_task_context(cfg);
  StrategyConfig strategy_cfg =
      parse_strategy_block(cfg.value("strategy", json::object()), overrides, seed);
  TrainConfig train_cfg = parse_train_block(cfg.value("train", json::object()), seed);

  Dataset data;
  data.train = load_instances(require_string(cfg, "train_data", "train config"), ctx.spec, ctx.vocab);
  if (cfg.contains("dev_data")) data.dev = load_instances(cfg.at("dev_data"), ctx.spec, ctx.vocab);
  if (cfg.contains("test_data")) data.test = load_instances(cfg.at("test_data"), ctx.spec, ctx.vocab);

  Tensor pretrained_table;
  if (cfg.contains("classifier")) {
    pretrained_table = load_pretrained_table(cfg.at("classifier"), ctx.vocab);
  } else if (strategy_cfg.kind == "pretrained-ipt") {
    throw ConfigError("pretrained-ipt requires a 'classifier' checkpoint in the config");
  }

  auto strategy = make_strategy(strategy_cfg, ctx.backbone, ctx.vocab,
                                pretrained_table.defined() ? &pretrained_table : nullptr);

  OutputStage stage(out_dir, "train", file_sha256(config_path), seed);
  std::ofstream metrics(stage.path("metrics.jsonl"));
  RunResult result = train_downstream(
      ctx.backbone, *strategy, data, ctx.verbalizer, train_cfg,
      strategy_cfg.kind == "fine-tuning", [&](const EpochMetrics& m) {
        json j;
        j["epoch"] = m.epoch;
        j["train_loss"] = m.train_loss;
        j["dev_accuracy"] = m.dev_accuracy;
        metrics << j.dump() << "\n";
        metrics.flush();
        log_debug("epoch " + std::to_string(m.epoch) + " loss " + std::to_string(m.train_loss));
      });
  metrics.close();
  std::ofstream(stage.path("result.json")) << result_to_json(result).dump(2) << "\n";
  stage.finalize();
}

// ------------------------------ few-shot ------------------------------

void cmd_few_shot(const std::string& config_path, const std::string& out_dir,
                  const CliOverrides& overrides) {
  const json cfg = parse_config(config_path);
  const uint64_t seed = pick_seed(cfg, overrides);
  LoadedTask ctx = load_task_context(cfg);
  StrategyConfig strategy_cfg =
      parse_strategy_block(cfg.value("strategy", json::object()), overrides, seed);
  TrainConfig train_cfg = parse_train_block(cfg.value("train", json::object()), seed);

  auto instances = load_instances(require_string(cfg, "data", "few-shot config"), ctx.spec, ctx.vocab);

  FewShotConfig fs_cfg;
  fs_cfg.base = train_cfg;
  fs_cfg.seed = seed;
  const json fs_block = cfg.value("few_shot", json::object());
  fs_cfg.k = fs_block.value("k", fs_cfg.k);
  if (overrides.few_shot_k) fs_cfg.k = *overrides.few_shot_k;
  fs_cfg.folds = fs_block.value("folds", fs_cfg.folds);
  if (fs_block.contains("grid")) {
    for (const auto& g : fs_block.at("grid")) {
      fs_cfg.grid.push_back({g.value("lr", train_cfg.lr), g.value("prompt_len", strategy_cfg.prompt_len)});
    }
  } else {
    // default grid: lr x prompt_length around the configured point
    fs_cfg.grid = {{train_cfg.lr, strategy_cfg.prompt_len},
                   {train_cfg.lr * 0.2, strategy_cfg.prompt_len},
                   {train_cfg.lr, std::max<int64_t>(1, strategy_cfg.prompt_len / 2)},
                   {train_cfg.lr * 0.2, std::max<int64_t>(1, strategy_cfg.prompt_len / 2)}};
  }
  if (fs_cfg.k < 1 || fs_cfg.folds < 2) throw ConfigError("few-shot: need k >= 1 and folds >= 2");

  Tensor pretrained_table;
  if (cfg.contains("classifier")) pretrained_table = load_pretrained_table(cfg.at("classifier"), ctx.vocab);
  if (strategy_cfg.kind == "pretrained-ipt" && !pretrained_table.defined()) {
    throw ConfigError("pretrained-ipt requires a 'classifier' checkpoint in the config");
  }

  StrategyFactory factory = [&](const GridPoint& point, uint64_t fit_seed) {
    StrategyConfig c = strategy_cfg;
    c.prompt_len = point.prompt_len;
    c.seed = fit_seed;
    return make_strategy(c, ctx.backbone, ctx.vocab,
                         pretrained_table.defined() ? &pretrained_table : nullptr);
  };

  OutputStage stage(out_dir, "few-shot", file_sha256(config_path), seed);
  FewShotReport report = few_shot_protocol(ctx.backbone, factory, instances, ctx.verbalizer,
                                           ctx.spec.labels, fs_cfg);
  write_metrics_jsonl(report.final_run, stage.path("metrics.jsonl"));
  {
    json j;
    j["k"] = fs_cfg.k;
    j["folds"] = fs_cfg.folds;
    j["fits_performed"] = report.fits_performed;
    j["chosen_config"] = report.chosen_config;
    j["cv_means"] = report.cv_means;
    json cells = json::array();
    for (const CvCell& cell : report.cv_cells) {
      cells.push_back({{"config", cell.config_index}, {"fold", cell.fold}, {"val_accuracy", cell.val_accuracy}});
    }
    j["cv_cells"] = cells;
    json grid = json::array();
    for (const GridPoint& g : fs_cfg.grid) grid.push_back({{"lr", g.lr}, {"prompt_len", g.prompt_len}});
    j["grid"] = grid;
    j["final"] = result_to_json(report.final_run);
    std::ofstream(stage.path("result.json")) << j.dump(2) << "\n";
  }
  stage.finalize();
}

// ------------------------------ sweep ------------------------------

void cmd_sweep(const std::string& config_path, const std::string& out_dir,
               const CliOverrides& overrides) {
  const json cfg = parse_config(config_path);
  const uint64_t seed = pick_seed(cfg, overrides);
  LoadedTask ctx = load_task_context(cfg);
  StrategyConfig strategy_cfg =
      parse_strategy_block(cfg.value("strategy", json::object()), overrides, seed);
  TrainConfig train_cfg = parse_train_block(cfg.value("train", json::object()), seed);

  Dataset data;
  data.train = load_instances(require_string(cfg, "train_data", "sweep config"), ctx.spec, ctx.vocab);
  if (cfg.contains("dev_data")) data.dev = load_instances(cfg.at("dev_data"), ctx.spec, ctx.vocab);
  if (cfg.contains("test_data")) data.test = load_instances(cfg.at("test_data"), ctx.spec, ctx.vocab);

  SweepRequest request;
  request.strategy = strategy_cfg;
  request.train = train_cfg;
  const json sweep_block = cfg.value("sweep", json::object());
  request.axis = sweep_block.value("axis", std::string{});
  if (overrides.axis) request.axis = *overrides.axis;
  if (sweep_block.contains("values")) request.values = sweep_block.at("values").get<std::vector<double>>();
  if (overrides.values) request.values = *overrides.values;
  if (sweep_block.contains("strategies")) {
    request.strategy_values = sweep_block.at("strategies").get<std::vector<std::string>>();
  }
  if (request.axis.empty()) throw ConfigError("sweep: an axis is required (--axis or config)");
  request.jobs = std::max<int64_t>(1, overrides.jobs);

  Tensor pretrained_table;
  if (cfg.contains("classifier")) pretrained_table = load_pretrained_table(cfg.at("classifier"), ctx.vocab);

  OutputStage stage(out_dir, "sweep", file_sha256(config_path), seed);
  std::vector<SweepCell> cells;
  try {
    cells = sweep(ctx.backbone, ctx.vocab, data, ctx.verbalizer, request,
                  pretrained_table.defined() ? &pretrained_table : nullptr);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  write_sweep_csv(cells, stage.path("sweep.csv"));
  {
    json rows = json::array();
    for (const SweepCell& cell : cells) {
      json j = result_to_json(cell.result);
      j["axis"] = cell.axis;
      j["value"] = cell.value;
      rows.push_back(j);
    }
    std::ofstream(stage.path("result.json")) << rows.dump(2) << "\n";
  }
  stage.finalize();
}

// ------------------------------ analyze ------------------------------

void cmd_analyze(const std::string& config_path, const std::string& out_dir,
                 const CliOverrides& overrides) {
  const json cfg = parse_config(config_path);
  const uint64_t seed = pick_seed(cfg, overrides);
  const std::string backbone_path = require_string(cfg, "backbone", "analyze config");
  const std::string vocab_path = require_string(cfg, "vocab", "analyze config");
  const std::string data_path = require_string(cfg, "data", "analyze config");
  for (const std::string& p : {backbone_path, vocab_path, data_path}) {
    if (!fs::exists(p)) throw ConfigError("file not found: " + p);
  }
  const auto sample_size = cfg.value("sample_size", int64_t{4000});
  if (sample_size < 3) throw ConfigError("analyze: sample_size must be >= 3");

  Transformer backbone = load_backbone(backbone_path);
  Vocabulary vocab = load_vocab(vocab_path);
  std::vector<CategoryExample> examples = load_category_jsonl(data_path);
  if (examples.size() < 3) throw ConfigError("analyze: need at least 3 texts");

  Tensor pretrained_table;
  if (cfg.contains("classifier")) {
    pretrained_table = load_pretrained_table(cfg.at("classifier"), vocab);
  }

  // prompt-side embeddings come from a table strategy (pretrained when given)
  StrategyConfig strategy_cfg;
  strategy_cfg.kind = pretrained_table.defined() ? "pretrained-ipt" : "random-ipt";
  strategy_cfg.prompt_len = cfg.value("prompt_len", int64_t{16});
  strategy_cfg.seed = seed;
  auto strategy = make_strategy(strategy_cfg, backbone, vocab,
                                pretrained_table.defined() ? &pretrained_table : nullptr);

  Rng rng(seed);
  std::vector<size_t> order(examples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  order.resize(std::min<size_t>(order.size(), static_cast<size_t>(sample_size)));

  OutputStage stage(out_dir, "analyze", file_sha256(config_path), seed);

  std::vector<std::vector<double>> plm_vectors, prompt_vectors;
  std::vector<std::string> cats, ids;
  for (size_t i : order) {
    const auto& ex = examples[i];
    auto token_ids = vocab.encode(ex.text);
    if (token_ids.empty()) continue;
    if (static_cast<int64_t>(token_ids.size()) > backbone.config().max_context) {
      token_ids.resize(static_cast<size_t>(backbone.config().max_context));
    }
    LabeledInstance inst;
    inst.id = "s" + std::to_string(i);
    inst.token_ids = token_ids;
    inst.mask_position = 0;
    inst.label_id = 0;
    plm_vectors.push_back(plm_sentence_embedding(backbone, token_ids));
    prompt_vectors.push_back(prompt_mean_embedding(*strategy, inst));
    cats.push_back(ex.category.empty() ? "uncategorized" : ex.category);
    ids.push_back(inst.id);
  }

  Projection2D plm_proj = project_2d(plm_vectors, cats, ids);
  Projection2D prompt_proj = project_2d(prompt_vectors, cats, ids);
  write_projection_csv(prompt_proj, stage.path("projection.csv"));
  write_projection_csv(plm_proj, stage.path("projection_plm.csv"));
  write_scatter_svg(prompt_proj, stage.path("scatter.svg"));
  write_scatter_svg(plm_proj, stage.path("scatter_plm.svg"));

  json stats_json;
  {
    std::set<std::string> distinct(cats.begin(), cats.end());
    std::map<std::string, int64_t> counts;
    for (const auto& c : cats) ++counts[c];
    bool ok = distinct.size() >= 2;
    for (const auto& [c, n] : counts) ok = ok && n >= 2;
    if (ok) {
      DistanceStats plm_stats = distance_stats(plm_vectors, cats);
      DistanceStats prompt_stats = distance_stats(prompt_vectors, cats);
      stats_json["plm"] = {{"intra_mean", plm_stats.intra_mean},
                           {"inter_mean", plm_stats.inter_mean},
                           {"ratio", plm_stats.ratio}};
      stats_json["prompt"] = {{"intra_mean", prompt_stats.intra_mean},
                              {"inter_mean", prompt_stats.inter_mean},
                              {"ratio", prompt_stats.ratio}};
    }
  }
  stats_json["explained_variance"] = {{"prompt", {prompt_proj.explained_x, prompt_proj.explained_y}},
                                      {"plm", {plm_proj.explained_x, plm_proj.explained_y}}};
  std::ofstream(stage.path("distance_stats.json")) << stats_json.dump(2) << "\n";

  // nearest-token case studies over the first few sampled sentences
  const auto case_count = cfg.value("case_studies", int64_t{4});
  CaseStudyReport report;
  report.strategy = strategy->name();
  for (size_t i = 0; i < order.size() && static_cast<int64_t>(i) < case_count; ++i) {
    const auto& ex = examples[order[i]];
    auto token_ids = vocab.encode(ex.text);
    if (token_ids.empty()) continue;
    LabeledInstance inst;
    inst.id = "s" + std::to_string(order[i]);
    inst.token_ids = token_ids;
    inst.mask_position = 0;
    inst.label_id = 0;
    GeneratedPrompts prompts = strategy->generate(inst);
    NoGradGuard no_grad;
    Tensor reference = backbone.embed_tokens(token_ids);
    std::vector<std::string> names;
    for (int64_t id : token_ids) names.push_back(vocab.token(id));
    CaseStudyEntry entry;
    entry.instance_id = inst.id;
    entry.text = ex.text;
    entry.predicted_label = ex.category;
    entry.gold_label = ex.category;
    entry.nearest = nearest_tokens(prompts.input.rows, reference, names, 1);
    report.entries.push_back(std::move(entry));
  }
  std::ofstream(stage.path("case_study.md")) << render_case_study_markdown({report});
  stage.finalize();
}

// ------------------------------ report ------------------------------

void cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  if (run_dirs.empty()) throw ConfigError("report: at least one run directory is required");
  json rows = json::array();
  for (const std::string& dir : run_dirs) {
    const std::string result_path = dir + "/result.json";
    if (!fs::exists(result_path)) throw ConfigError("report: no result.json in " + dir);
    std::ifstream in(result_path);
    json r = json::parse(in);
    r["run_dir"] = dir;
    rows.push_back(r);
  }

  OutputStage stage(out_dir, "report", Sha256::hex(""), 0);
  std::ostringstream md;
  md << "# Run comparison\n\n";
  md << "| run | strategy | best dev acc | test acc | trainable params |\n";
  md << "|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    const json body = r.contains("final") ? r.at("final") : r;
    auto field = [&](const char* key) -> std::string {
      if (!body.contains(key)) return "-";
      const json& v = body.at(key);
      if (v.is_string()) return v.get<std::string>();
      std::ostringstream s;
      s << v;
      return s.str();
    };
    md << "| " << r.at("run_dir").get<std::string>() << " | " << field("strategy") << " | "
       << field("best_dev_accuracy") << " | " << field("test_accuracy") << " | "
       << field("trainable_params") << " |\n";
  }
  std::ofstream(stage.path("report.md")) << md.str();
  stage.finalize();
}

}  // namespace ipt
