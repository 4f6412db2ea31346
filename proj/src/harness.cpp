#include "ipt/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "ipt/optim.hpp"
#include "ipt/serialize.hpp"

namespace ipt {

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be positive");
  if (lr < 0.0) throw std::invalid_argument("train: lr must be >= 0");
  if (grad_accum_steps < 1) throw std::invalid_argument("train: grad_accum_steps must be positive");
  if (warmup_steps < 0) throw std::invalid_argument("train: warmup_steps must be >= 0");
  if (max_epochs < 1) throw std::invalid_argument("train: max_epochs must be positive");
  if (early_stop_patience < 1) throw std::invalid_argument("train: early_stop_patience must be positive");
}

TrainConfig TrainConfig::desk_defaults() {
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.lr = 1e-2;
  cfg.grad_accum_steps = 1;
  cfg.warmup_steps = 200;
  cfg.max_epochs = 30;
  cfg.early_stop_patience = 5;
  return cfg;
}

// ------------------------------ frozen snapshot ------------------------------

namespace {

std::string value_hash(const Tensor& t) {
  Sha256 h;
  h.update(t.values());
  return h.hex_digest();
}

}  // namespace

FrozenSnapshot::FrozenSnapshot(const std::vector<Parameter>& params) {
  for (const Parameter& p : params) {
    if (p.frozen()) hashes_[p.name] = value_hash(p.tensor);
  }
}

void FrozenSnapshot::verify(const std::vector<Parameter>& params) const {
  std::string drifted;
  std::set<std::string> seen;
  for (const Parameter& p : params) {
    auto it = hashes_.find(p.name);
    if (it == hashes_.end()) continue;
    seen.insert(p.name);
    if (value_hash(p.tensor) != it->second) drifted += (drifted.empty() ? "" : ", ") + p.name;
  }
  if (seen.size() != hashes_.size()) {
    throw std::runtime_error("frozen-parameter check: snapshotted parameters disappeared");
  }
  if (!drifted.empty()) {
    throw std::runtime_error("frozen-parameter drift detected: " + drifted);
  }
}

// ------------------------------ evaluation ------------------------------

double accuracy(const Transformer& backbone, const PromptStrategy& strategy,
                const std::vector<LabeledInstance>& instances,
                const std::vector<int64_t>& verbalizer_ids) {
  if (instances.empty()) return 0.0;
  NoGradGuard no_grad;
  int64_t correct = 0;
  for (const LabeledInstance& inst : instances) {
    Tensor logits = backbone.classify_logits(make_prompted_input(strategy, inst), verbalizer_ids);
    int64_t best = 0;
    for (int64_t c = 1; c < logits.size(); ++c) {
      if (logits.data()[c] > logits.data()[best]) best = c;
    }
    if (best == inst.label_id) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(instances.size());
}

// ------------------------------ downstream training ------------------------------

RunResult train_downstream(Transformer& backbone, PromptStrategy& strategy, const Dataset& data,
                           const std::vector<int64_t>& verbalizer_ids, const TrainConfig& cfg,
                           bool fine_tune_backbone,
                           const std::function<void(const EpochMetrics&)>& on_epoch) {
  cfg.validate();
  if (data.train.empty()) throw std::invalid_argument("train_downstream: empty training set");
  const auto t0 = std::chrono::steady_clock::now();

  backbone.set_frozen(!fine_tune_backbone);
  std::vector<Parameter> all_params = backbone.parameters();
  for (const Parameter& p : strategy.parameters()) all_params.push_back(p);
  FrozenSnapshot snapshot(all_params);

  std::vector<Parameter> trainables;
  for (const Parameter& p : all_params) {
    if (!p.frozen()) trainables.push_back(p);
  }

  std::unique_ptr<Adam> opt;
  if (cfg.lr > 0.0 && !trainables.empty()) {
    opt = std::make_unique<Adam>(trainables, AdamConfig{.lr = cfg.lr, .warmup_steps = cfg.warmup_steps});
  }

  RunResult result;
  result.strategy = strategy.name();
  result.seed = cfg.seed;
  result.trainable_params = 0;
  for (const Parameter& p : trainables) result.trainable_params += p.size();
  int64_t total_params = param_count(backbone.config());
  for (const Parameter& p : strategy.parameters()) total_params += p.size();
  result.trainable_ratio_vs_finetune =
      static_cast<double>(result.trainable_params) / static_cast<double>(total_params);

  std::vector<size_t> order(data.train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  // best-epoch parameter copies for restore-before-test
  std::vector<std::vector<double>> best_values;
  double best_acc = -1.0, best_loss = std::numeric_limits<double>::infinity();
  int64_t epochs_since_best = 0;

  auto save_best = [&] {
    best_values.clear();
    for (const Parameter& p : trainables) best_values.push_back(p.tensor.values());
  };
  auto restore_best = [&] {
    if (best_values.empty()) return;
    for (size_t i = 0; i < trainables.size(); ++i) trainables[i].tensor.values() = best_values[i];
  };

  const int64_t step_span = cfg.batch_size * cfg.grad_accum_steps;
  for (int64_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng shuffle_rng(cfg.seed * 1000003ull + static_cast<uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(step_span)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(step_span));
      const double inv = 1.0 / static_cast<double>(end - start);
      if (opt) opt->zero_grad();
      for (size_t i = start; i < end; ++i) {
        const LabeledInstance& inst = data.train[order[i]];
        Tape tape;
        Tensor loss = scale(
            cross_entropy(backbone.classify_logits(make_prompted_input(strategy, inst), verbalizer_ids),
                          {inst.label_id}),
            inv);
        tape.backward(loss);
        epoch_loss += loss.item() * static_cast<double>(end - start);
      }
      if (opt) opt->step();
    }
    epoch_loss /= static_cast<double>(order.size());

    EpochMetrics metrics;
    metrics.epoch = epoch;
    metrics.train_loss = epoch_loss;
    metrics.dev_accuracy = data.dev.empty() ? 0.0 : accuracy(backbone, strategy, data.dev, verbalizer_ids);
    result.epochs.push_back(metrics);
    if (on_epoch) on_epoch(metrics);

    const bool improved = metrics.dev_accuracy > best_acc ||
                          (metrics.dev_accuracy == best_acc && epoch_loss < best_loss);
    if (improved) {
      best_acc = metrics.dev_accuracy;
      best_loss = epoch_loss;
      result.best_dev_accuracy = metrics.dev_accuracy;
      result.best_epoch = epoch;
      epochs_since_best = 0;
      save_best();
    } else {
      ++epochs_since_best;
      if (!data.dev.empty() && epochs_since_best >= cfg.early_stop_patience) break;
    }
  }

  restore_best();
  if (!data.test.empty()) result.test_accuracy = accuracy(backbone, strategy, data.test, verbalizer_ids);
  snapshot.verify(all_params);

  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ------------------------------ few-shot protocol ------------------------------

FewShotReport few_shot_protocol(Transformer& backbone, const StrategyFactory& factory,
                                const std::vector<LabeledInstance>& dataset,
                                const std::vector<int64_t>& verbalizer_ids,
                                const std::vector<std::string>& label_names,
                                const FewShotConfig& cfg) {
  if (cfg.grid.empty()) throw std::invalid_argument("few_shot_protocol: empty hyperparameter grid");
  if (cfg.folds < 2) throw std::invalid_argument("few_shot_protocol: folds must be >= 2");
  cfg.base.validate();

  FewShotReport report;
  const FewShotSplit split = sample_few_shot(dataset, cfg.k, cfg.seed, label_names);

  // the 2K-per-label pool is cross-validated for model selection
  std::vector<size_t> pool = split.train_idx;
  pool.insert(pool.end(), split.dev_idx.begin(), split.dev_idx.end());
  std::vector<int64_t> pool_labels;
  for (size_t i : pool) pool_labels.push_back(dataset[i].label_id);
  const auto folds = kfold_split(pool_labels, cfg.folds, cfg.seed + 1);

  auto fit_seed = [&](size_t config, int64_t fold) {
    return cfg.seed * 1000003ull + static_cast<uint64_t>(config) * 101ull +
           static_cast<uint64_t>(fold);
  };

  report.cv_means.assign(cfg.grid.size(), 0.0);
  for (size_t c = 0; c < cfg.grid.size(); ++c) {
    double mean = 0.0;
    for (int64_t f = 0; f < cfg.folds; ++f) {
      Dataset fold_data;
      for (size_t i : folds[static_cast<size_t>(f)].first) fold_data.train.push_back(dataset[pool[i]]);
      for (size_t i : folds[static_cast<size_t>(f)].second) fold_data.dev.push_back(dataset[pool[i]]);

      auto strategy = factory(cfg.grid[c], fit_seed(c, f));
      TrainConfig fit_cfg = cfg.base;
      fit_cfg.lr = cfg.grid[c].lr;
      fit_cfg.seed = fit_seed(c, f);
      RunResult run = train_downstream(backbone, *strategy, fold_data, verbalizer_ids, fit_cfg);
      ++report.fits_performed;
      report.cv_cells.push_back({c, f, run.best_dev_accuracy});
      mean += run.best_dev_accuracy;
    }
    report.cv_means[c] = mean / static_cast<double>(cfg.folds);
  }

  // ties break toward the lower grid index
  report.chosen_config = 0;
  for (size_t c = 1; c < cfg.grid.size(); ++c) {
    if (report.cv_means[c] > report.cv_means[report.chosen_config]) report.chosen_config = c;
  }

  Dataset final_data;
  for (size_t i : split.train_idx) final_data.train.push_back(dataset[i]);
  for (size_t i : split.dev_idx) final_data.dev.push_back(dataset[i]);
  for (size_t i : split.pool_idx) final_data.test.push_back(dataset[i]);

  auto strategy = factory(cfg.grid[report.chosen_config], fit_seed(report.chosen_config, cfg.folds));
  TrainConfig final_cfg = cfg.base;
  final_cfg.lr = cfg.grid[report.chosen_config].lr;
  final_cfg.seed = cfg.seed;
  report.final_run = train_downstream(backbone, *strategy, final_data, verbalizer_ids, final_cfg);
  ++report.fits_performed;
  return report;
}

// ------------------------------ aggregation ------------------------------

MultiSeedReport multi_seed_report(const std::function<double(uint64_t)>& run,
                                  const std::vector<uint64_t>& seeds) {
  if (seeds.size() < 2) throw std::invalid_argument("multi_seed_report: need at least 2 seeds");
  MultiSeedReport report;
  for (uint64_t seed : seeds) report.rows.push_back({seed, run(seed)});
  double mean = 0.0;
  for (const SeedRow& row : report.rows) mean += row.accuracy;
  mean /= static_cast<double>(report.rows.size());
  double var = 0.0;
  for (const SeedRow& row : report.rows) var += (row.accuracy - mean) * (row.accuracy - mean);
  var /= static_cast<double>(report.rows.size() - 1);
  report.mean = mean;
  report.stddev = std::sqrt(var);
  return report;
}

// ------------------------------ sweeps ------------------------------

std::vector<SweepCell> sweep(Transformer& backbone, const Vocabulary& vocab, const Dataset& data,
                             const std::vector<int64_t>& verbalizer_ids, const SweepRequest& request,
                             const Tensor* pretrained_table) {
  // validate everything before any training starts
  request.train.validate();
  request.strategy.validate();
  int64_t max_len = 0;
  for (const LabeledInstance& inst : data.train) {
    max_len = std::max<int64_t>(max_len, static_cast<int64_t>(inst.token_ids.size()));
  }
  std::vector<std::pair<std::string, StrategyConfig>> cells;
  if (request.axis == "prompt-length") {
    if (request.values.empty()) throw std::invalid_argument("sweep: empty value list");
    for (double v : request.values) {
      if (v < 1.0 || v != std::floor(v)) {
        throw std::invalid_argument("sweep: prompt-length values must be positive integers");
      }
      StrategyConfig cfg = request.strategy;
      cfg.prompt_len = static_cast<int64_t>(v);
      if (cfg.prompt_len + max_len > backbone.config().max_context) {
        throw std::invalid_argument("sweep: prompt length " + std::to_string(cfg.prompt_len) +
                                    " + longest instance " + std::to_string(max_len) +
                                    " exceeds max_context " +
                                    std::to_string(backbone.config().max_context));
      }
      std::ostringstream label;
      label << cfg.prompt_len;
      cells.emplace_back(label.str(), cfg);
    }
  } else if (request.axis == "utilization-rate") {
    if (request.values.empty()) throw std::invalid_argument("sweep: empty value list");
    for (double v : request.values) {
      if (v <= 0.0 || v > 1.0) throw std::invalid_argument("sweep: utilization rates must be in (0, 1]");
      StrategyConfig cfg = request.strategy;
      cfg.kind = "encoder-ipt";
      cfg.utilization_rate = v;
      std::ostringstream label;
      label << v;
      cells.emplace_back(label.str(), cfg);
    }
  } else if (request.axis == "strategy") {
    if (request.strategy_values.empty()) throw std::invalid_argument("sweep: empty value list");
    for (const std::string& name : request.strategy_values) {
      StrategyConfig cfg = request.strategy;
      cfg.kind = name;
      cfg.validate();
      cells.emplace_back(name, cfg);
    }
  } else {
    throw std::invalid_argument("sweep: unknown axis '" + request.axis +
                                "' (allowed: prompt-length, utilization-rate, strategy)");
  }

  std::vector<SweepCell> results(cells.size());
  auto run_cell = [&](Transformer& model, size_t i) {
    const auto& [label, cfg] = cells[i];
    auto strategy = make_strategy(cfg, model, vocab, pretrained_table);
    const bool fine_tune = cfg.kind == "fine-tuning";
    RunResult run = train_downstream(model, *strategy, data, verbalizer_ids, request.train, fine_tune);
    results[i] = {request.axis, label, std::move(run)};
  };

  const int64_t jobs = std::max<int64_t>(1, std::min<int64_t>(request.jobs,
                                                              static_cast<int64_t>(cells.size())));
  if (jobs == 1) {
    for (size_t i = 0; i < cells.size(); ++i) run_cell(backbone, i);
  } else {
    // each worker trains against its own model copy; results land in
    // preassigned slots so the output is independent of scheduling
    std::atomic<size_t> next{0};
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(jobs));
    for (int64_t w = 0; w < jobs; ++w) {
      workers.emplace_back([&, w] {
        try {
          Transformer local = backbone.deep_copy();
          for (size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1)) {
            run_cell(local, i);
          }
        } catch (...) {
          errors[static_cast<size_t>(w)] = std::current_exception();
        }
      });
    }
    for (auto& t : workers) t.join();
    for (const auto& err : errors) {
      if (err) std::rethrow_exception(err);
    }
  }
  return results;
}

void write_sweep_csv(const std::vector<SweepCell>& cells, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "axis,value,strategy,best_dev_accuracy,best_epoch,test_accuracy,trainable_params,epochs_run\n";
  for (const SweepCell& cell : cells) {
    out << cell.axis << ',' << cell.value << ',' << cell.result.strategy << ','
        << cell.result.best_dev_accuracy << ',' << cell.result.best_epoch << ','
        << cell.result.test_accuracy << ',' << cell.result.trainable_params << ','
        << cell.result.epochs.size() << "\n";
  }
}

// ------------------------------ parameter accounting ------------------------------

std::vector<ParamRatioRow> param_ratio_report(const std::vector<const PromptStrategy*>& strategies,
                                              const Transformer& backbone) {
  const int64_t backbone_params = param_count(backbone.config());
  int64_t prefix_trainable = -1;
  for (const PromptStrategy* s : strategies) {
    if (s->name() == "prefix") prefix_trainable = trainable_param_count(*s);
  }

  std::vector<ParamRatioRow> rows;
  for (const PromptStrategy* s : strategies) {
    ParamRatioRow row;
    row.strategy = s->name();
    int64_t strategy_total = 0;
    for (const Parameter& p : s->parameters()) strategy_total += p.size();
    row.total_with_backbone = backbone_params + strategy_total;
    row.trainable = s->name() == "fine-tuning" ? row.total_with_backbone : trainable_param_count(*s);
    row.ratio_vs_finetune =
        static_cast<double>(row.trainable) / static_cast<double>(row.total_with_backbone);
    if (prefix_trainable > 0) {
      row.ratio_vs_prefix = static_cast<double>(row.trainable) / static_cast<double>(prefix_trainable);
    }
    rows.push_back(row);
  }
  return rows;
}

std::string render_param_ratio_table(const std::vector<ParamRatioRow>& rows) {
  std::ostringstream out;
  out << "| strategy | trainable | vs fine-tuning | vs prefix tuning |\n";
  out << "|---|---|---|---|\n";
  for (const ParamRatioRow& row : rows) {
    out << "| " << row.strategy << " | " << row.trainable << " | ";
    out.setf(std::ios::fixed);
    out.precision(4);
    out << row.ratio_vs_finetune << " | ";
    if (std::isnan(row.ratio_vs_prefix)) {
      out << "-";
    } else {
      out << row.ratio_vs_prefix;
    }
    out << " |\n";
    out.unsetf(std::ios::fixed);
  }
  return out.str();
}

}  // namespace ipt
