#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ipt/backbone.hpp"
#include "ipt/strategies.hpp"
#include "ipt/text.hpp"

namespace ipt {

struct TrainConfig {
  // Defaults follow the paper protocol; desk_defaults() shrinks them for
  // minutes-scale CPU runs.
  int64_t batch_size = 32;
  double lr = 1e-5;  // lr == 0 runs the loop without updates
  int64_t grad_accum_steps = 2;
  int64_t warmup_steps = 2000;
  int64_t max_epochs = 20;
  int64_t early_stop_patience = 5;
  uint64_t seed = 1;

  void validate() const;
  static TrainConfig paper_defaults() { return {}; }
  static TrainConfig desk_defaults();
};

struct EpochMetrics {
  int64_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double dev_accuracy = 0.0;
};

struct RunResult {
  std::string strategy;
  std::vector<EpochMetrics> epochs;
  double best_dev_accuracy = 0.0;
  int64_t best_epoch = -1;
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();
  int64_t trainable_params = 0;
  double trainable_ratio_vs_finetune = 0.0;
  double wall_seconds = 0.0;
  uint64_t seed = 0;
};

// Content hashes of every frozen parameter, taken before training; verify()
// fails hard, naming drifted parameters.
class FrozenSnapshot {
 public:
  explicit FrozenSnapshot(const std::vector<Parameter>& params);
  void verify(const std::vector<Parameter>& params) const;
  size_t tracked() const { return hashes_.size(); }

 private:
  std::map<std::string, std::string> hashes_;
};

struct Dataset {
  std::vector<LabeledInstance> train;
  std::vector<LabeledInstance> dev;
  std::vector<LabeledInstance> test;
};

double accuracy(const Transformer& backbone, const PromptStrategy& strategy,
                const std::vector<LabeledInstance>& instances,
                const std::vector<int64_t>& verbalizer_ids);

// Downstream tuning: only the strategy's trainable parameters move (plus the
// backbone in fine-tune mode); early stops on dev accuracy with train loss as
// the tie-break; restores the best-epoch parameters before the test pass; and
// verifies the frozen snapshot at the end.
RunResult train_downstream(Transformer& backbone, PromptStrategy& strategy, const Dataset& data,
                           const std::vector<int64_t>& verbalizer_ids, const TrainConfig& cfg,
                           bool fine_tune_backbone = false,
                           const std::function<void(const EpochMetrics&)>& on_epoch = {});

// ------------------------------ few-shot protocol ------------------------------

struct GridPoint {
  double lr = 1e-2;
  int64_t prompt_len = 20;
};

struct FewShotConfig {
  int64_t k = 32;
  int64_t folds = 4;
  std::vector<GridPoint> grid;  // searched by mean CV accuracy, ties -> lower index
  TrainConfig base;             // epochs/batching shared by CV fits and the final fit
  uint64_t seed = 1;
};

struct CvCell {
  size_t config_index = 0;
  int64_t fold = 0;
  double val_accuracy = 0.0;
};

struct FewShotReport {
  std::vector<CvCell> cv_cells;
  std::vector<double> cv_means;  // one per grid point
  size_t chosen_config = 0;
  int64_t fits_performed = 0;  // folds x grid + 1 final
  RunResult final_run;
};

using StrategyFactory =
    std::function<std::unique_ptr<PromptStrategy>(const GridPoint& point, uint64_t seed)>;

// 2K examples per label -> k-fold CV over the grid -> winner retrained on the
// first K with early stopping on the second K; test accuracy on the remainder.
FewShotReport few_shot_protocol(Transformer& backbone, const StrategyFactory& factory,
                                const std::vector<LabeledInstance>& dataset,
                                const std::vector<int64_t>& verbalizer_ids,
                                const std::vector<std::string>& label_names,
                                const FewShotConfig& cfg);

// ------------------------------ aggregation ------------------------------

struct SeedRow {
  uint64_t seed = 0;
  double accuracy = 0.0;
};

struct MultiSeedReport {
  std::vector<SeedRow> rows;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation
};

MultiSeedReport multi_seed_report(const std::function<double(uint64_t)>& run,
                                  const std::vector<uint64_t>& seeds);

// ------------------------------ sweeps ------------------------------

struct SweepRequest {
  std::string axis;  // prompt-length | utilization-rate | strategy
  std::vector<double> values;               // numeric axes
  std::vector<std::string> strategy_values; // axis == strategy
  StrategyConfig strategy;                  // base strategy configuration
  TrainConfig train;
  int64_t jobs = 1;  // parallel workers; each owns a private backbone copy
};

struct SweepCell {
  std::string axis;
  std::string value;  // rendered value (numeric or strategy name)
  RunResult result;
};

// Validates the whole request before any training starts.
std::vector<SweepCell> sweep(Transformer& backbone, const Vocabulary& vocab, const Dataset& data,
                             const std::vector<int64_t>& verbalizer_ids, const SweepRequest& request,
                             const Tensor* pretrained_table = nullptr);

void write_sweep_csv(const std::vector<SweepCell>& cells, const std::string& path);

// ------------------------------ parameter accounting ------------------------------

struct ParamRatioRow {
  std::string strategy;
  int64_t trainable = 0;
  int64_t total_with_backbone = 0;     // backbone + all strategy params
  double ratio_vs_finetune = 0.0;      // trainable / total_with_backbone
  double ratio_vs_prefix = std::numeric_limits<double>::quiet_NaN();
};

// One row per strategy; ratio_vs_prefix uses the "prefix" row when present.
std::vector<ParamRatioRow> param_ratio_report(const std::vector<const PromptStrategy*>& strategies,
                                              const Transformer& backbone);

std::string render_param_ratio_table(const std::vector<ParamRatioRow>& rows);

}  // namespace ipt
