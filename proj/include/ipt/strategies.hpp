#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ipt/backbone.hpp"
#include "ipt/tensor.hpp"
#include "ipt/text.hpp"

namespace ipt {

struct PromptVectors {
  Tensor rows;  // [k, d]
  std::string strategy;
  std::string instance_id;
};

struct GeneratedPrompts {
  PromptVectors input;                 // input-layer soft prefix (rows may be undefined)
  std::vector<Tensor> layer_prefixes;  // per-layer prefixes (may be empty)
  bool composed = false;               // true only for the prefix+IPT projection
};

// G_w: produces prompts for one instance. Generation is read-only with
// respect to parameters, so concurrent generation is safe; updates need
// exclusive access.
class PromptStrategy {
 public:
  virtual ~PromptStrategy() = default;
  virtual std::string name() const = 0;
  virtual GeneratedPrompts generate(const LabeledInstance& instance) const = 0;
  // Every owned parameter, frozen ones included.
  virtual std::vector<Parameter> parameters() const = 0;
  // Rows prepended at the input layer / injected per layer.
  virtual int64_t input_prefix_len() const = 0;
  virtual int64_t layer_prefix_len() const { return 0; }
  // Matmul FLOPs spent generating prompts for an n-token instance
  // (table lookups cost zero).
  virtual int64_t generation_flops(int64_t n) const = 0;
};

// Exactly the frozen=false parameters; never any backbone parameter.
std::vector<Parameter> trainable_params(const PromptStrategy& strategy);
int64_t trainable_param_count(const PromptStrategy& strategy);

// Builds the prompted input for one instance.
PromptedInput make_prompted_input(const PromptStrategy& strategy, const LabeledInstance& instance);

// Backbone forward FLOPs plus generation FLOPs for one n-token instance.
int64_t prompted_flop_count(const TransformerConfig& cfg, const PromptStrategy& strategy, int64_t n);

// ------------------------------ task-level baselines ------------------------------

// Prompt Tuning: one shared L x d soft prompt per task, identical for every
// instance.
class TaskPromptStrategy : public PromptStrategy {
 public:
  TaskPromptStrategy(int64_t prompt_len, int64_t d_model, uint64_t seed);
  std::string name() const override { return "task-prompt"; }
  GeneratedPrompts generate(const LabeledInstance& instance) const override;
  std::vector<Parameter> parameters() const override;
  int64_t input_prefix_len() const override { return prompt_.rows(); }
  int64_t generation_flops(int64_t) const override { return 0; }

 private:
  Tensor prompt_;
};

// Prefix Tuning: a stored k x d block reparameterized through a small MLP
// into one k x d prefix per layer.
class PrefixTuningStrategy : public PromptStrategy {
 public:
  PrefixTuningStrategy(int64_t prefix_len, int64_t d_model, int64_t n_layers, uint64_t seed,
                       int64_t reparam_hidden = 0 /* 0 -> 2*d */);
  std::string name() const override { return "prefix"; }
  GeneratedPrompts generate(const LabeledInstance& instance) const override;
  std::vector<Parameter> parameters() const override;
  int64_t input_prefix_len() const override { return 0; }
  int64_t layer_prefix_len() const override { return base_.rows(); }
  int64_t generation_flops(int64_t n) const override;

 private:
  int64_t n_layers_, d_model_, hidden_;
  Tensor base_;        // [k, d]
  Tensor w1_, b1_;     // d -> hidden
  Tensor w2_, b2_;     // hidden -> n_layers * d
};

// ------------------------------ instance-wise strategies ------------------------------

// Random/Pretrained IPT: a |V| x d_p prompt table indexed by the instance's
// leading tokens, truncated (or cycled) to length L.
class TableIptStrategy : public PromptStrategy {
 public:
  // Random initialization.
  TableIptStrategy(std::string name, int64_t vocab_size, int64_t table_dim, int64_t d_model,
                   int64_t prompt_len, uint64_t seed);
  // Pretrained initialization: the table starts as a copy of initial_table.
  TableIptStrategy(std::string name, Tensor initial_table, int64_t d_model, int64_t prompt_len,
                   uint64_t seed);

  std::string name() const override { return name_; }
  GeneratedPrompts generate(const LabeledInstance& instance) const override;
  std::vector<Parameter> parameters() const override;
  int64_t input_prefix_len() const override { return prompt_len_; }
  int64_t generation_flops(int64_t) const override;

  const Tensor& table() const { return table_; }
  // Prompt-row token ids for an n-token instance: leading min(n, L) ids,
  // cycled from the start when the instance is shorter than L.
  std::vector<int64_t> prompt_token_ids(const std::vector<int64_t>& token_ids) const;

 private:
  void init_projection(uint64_t seed);

  std::string name_;
  int64_t d_model_, prompt_len_;
  Tensor table_;       // [|V|, d_p]
  Tensor projection_;  // [d_p, d]; undefined when d_p == d
};

enum class EncoderVariant { kCnn, kRnn, kMlp };

EncoderVariant encoder_variant_from_string(const std::string& s);
std::string to_string(EncoderVariant v);

// Encoder IPT: a frozen prompt table feeding a small trainable encoder that
// reads the first ceil(r*n) tokens and emits exactly k prompt rows.
class EncoderIptStrategy : public PromptStrategy {
 public:
  EncoderIptStrategy(Tensor frozen_table, EncoderVariant variant, double utilization_rate,
                     int64_t prompt_len, int64_t d_model, int64_t hidden, uint64_t seed);

  std::string name() const override { return "encoder-ipt-" + to_string(variant_); }
  GeneratedPrompts generate(const LabeledInstance& instance) const override;
  std::vector<Parameter> parameters() const override;
  int64_t input_prefix_len() const override { return prompt_len_; }
  int64_t generation_flops(int64_t n) const override;

  int64_t consumed_tokens(int64_t n) const;  // clamp(ceil(r*n), 1, n)
  int64_t hidden_width() const { return hidden_; }

 private:
  Tensor encode_cnn(const Tensor& embedded) const;
  Tensor encode_rnn(const Tensor& embedded) const;
  Tensor encode_mlp(const Tensor& embedded) const;

  EncoderVariant variant_;
  double rate_;
  int64_t prompt_len_, d_model_, d_table_, hidden_;
  Tensor table_;  // frozen, requires_grad=false
  std::vector<Parameter> weights_;
};

// Closed-form trainable parameter count of an encoder variant at hidden width h.
int64_t encoder_trainable_count(EncoderVariant v, int64_t hidden, int64_t d_table, int64_t d_model,
                                int64_t prompt_len);
// Largest hidden width whose trainable count stays within target_ratio of the
// backbone parameter count (at least 1).
int64_t pick_encoder_hidden(EncoderVariant v, int64_t backbone_params, int64_t d_table,
                            int64_t d_model, int64_t prompt_len, double target_ratio = 0.005);

// ------------------------------ variants and composition ------------------------------

// Backbone token embeddings of a category phrase prepended before the soft rows.
Tensor hard_prefix_apply(const Transformer& backbone, const std::vector<int64_t>& phrase_ids,
                         const Tensor& prompt_rows);

// Random IPT + hard type-prefix: e(phrase) rows ahead of the generated prompts.
class HardPrefixStrategy : public PromptStrategy {
 public:
  HardPrefixStrategy(std::unique_ptr<TableIptStrategy> inner, const Transformer& backbone,
                     std::vector<int64_t> phrase_ids);
  std::string name() const override { return inner_->name() + "+hard"; }
  GeneratedPrompts generate(const LabeledInstance& instance) const override;
  std::vector<Parameter> parameters() const override { return inner_->parameters(); }
  int64_t input_prefix_len() const override;
  int64_t generation_flops(int64_t n) const override { return inner_->generation_flops(n); }

 private:
  std::unique_ptr<TableIptStrategy> inner_;
  const Transformer* backbone_;
  std::vector<int64_t> phrase_ids_;
};

// Prefix + IPT composition: one trainable d -> d projection per layer maps the
// instance-wise prompt rows into per-layer prefixes (identity at init).
class PrefixIptStrategy : public PromptStrategy {
 public:
  PrefixIptStrategy(std::unique_ptr<PromptStrategy> inner, int64_t n_layers, int64_t d_model);
  std::string name() const override { return "prefix+" + inner_->name(); }
  GeneratedPrompts generate(const LabeledInstance& instance) const override;
  std::vector<Parameter> parameters() const override;
  int64_t input_prefix_len() const override { return 0; }
  int64_t layer_prefix_len() const override { return inner_->input_prefix_len(); }
  int64_t generation_flops(int64_t n) const override;

 private:
  std::unique_ptr<PromptStrategy> inner_;
  int64_t n_layers_, d_model_;
  std::vector<Tensor> proj_w_, proj_b_;
};

// No prompts at all (the fine-tuning baseline).
class NoPromptStrategy : public PromptStrategy {
 public:
  std::string name() const override { return "fine-tuning"; }
  GeneratedPrompts generate(const LabeledInstance& instance) const override;
  std::vector<Parameter> parameters() const override { return {}; }
  int64_t input_prefix_len() const override { return 0; }
  int64_t generation_flops(int64_t) const override { return 0; }
};

// ------------------------------ config-driven construction ------------------------------

struct StrategyConfig {
  std::string kind = "random-ipt";  // task-prompt | prefix | random-ipt | pretrained-ipt |
                                    // encoder-ipt | fine-tuning
  std::string encoder = "cnn";      // cnn | rnn | mlp
  int64_t prompt_len = 20;
  double utilization_rate = 0.10;
  int64_t table_dim = 0;       // d_p; 0 means d_model
  int64_t encoder_hidden = 0;  // 0 means sized by the 0.5% rule
  std::string hard_prefix;     // optional category phrase
  bool compose_prefix = false; // wrap instance-wise prompts into per-layer prefixes
  uint64_t seed = 1;

  void validate() const;
};

// pretrained_table is required for kind == pretrained-ipt and encoder-ipt
// (encoder-ipt falls back to a random frozen table when it is null).
std::unique_ptr<PromptStrategy> make_strategy(const StrategyConfig& cfg, const Transformer& backbone,
                                              const Vocabulary& vocab,
                                              const Tensor* pretrained_table = nullptr);

}  // namespace ipt
