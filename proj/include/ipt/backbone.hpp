#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ipt/rng.hpp"
#include "ipt/tensor.hpp"

namespace ipt {

struct TransformerConfig {
  int64_t vocab_size = 2000;
  int64_t d_model = 64;
  int64_t n_layers = 4;
  int64_t n_heads = 4;
  int64_t ff_dim = 256;
  int64_t max_context = 256;
  double dropout = 0.0;  // 0 keeps eval/training bit-deterministic

  void validate() const;
};

// One instance ready for the prompted forward pass. Soft input prefixes
// occupy positions 0..k-1; per-layer prefixes join attention as extra
// key/value rows at every layer but produce no output positions.
struct PromptedInput {
  std::vector<int64_t> token_ids;
  Tensor input_soft_prefix;                // optional [k, d]
  std::vector<Tensor> per_layer_prefixes;  // optional, one [k', d] per layer
  int64_t mask_position = -1;              // index into token_ids
  bool composed = false;  // both prefix kinds are only valid via the prefix+IPT projection

  int64_t prefix_len() const { return input_soft_prefix.defined() ? input_soft_prefix.rows() : 0; }
};

// Encoder-only transformer with a masked-token cloze head (pre-norm blocks,
// learned positions, untied output projection).
class Transformer {
 public:
  Transformer(const TransformerConfig& cfg, uint64_t seed);

  const TransformerConfig& config() const { return cfg_; }

  // e(x): token embedding rows, no positions added.
  Tensor embed_tokens(const std::vector<int64_t>& ids) const;

  // Final hidden states [(k+n), d]. dropout_rng enables dropout (training).
  Tensor forward_states(const PromptedInput& input, Rng* dropout_rng = nullptr) const;
  // Per-position vocabulary logits [(k+n), |V|].
  Tensor forward_logits(const PromptedInput& input, Rng* dropout_rng = nullptr) const;

  // Cloze logits restricted to the verbalizer tokens at the mask row: [1, n_labels].
  Tensor classify_logits(const PromptedInput& input, const std::vector<int64_t>& verbalizer_ids) const;
  // p(y | t, x): softmax over the restricted logits (no gradient).
  std::vector<double> classify(const PromptedInput& input, const std::vector<int64_t>& verbalizer_ids) const;

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  void set_frozen(bool frozen);

  // Independent copy with identical parameter values (for parallel runs that
  // must each own a private model).
  Transformer deep_copy() const;

  int64_t step_count() const { return step_count_; }
  void set_step_count(int64_t n) { step_count_ = n; }

 private:
  struct Block {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor ff_w1, ff_b1, ff_w2, ff_b2;
  };

  Tensor attention(const Block& blk, const Tensor& x, const Tensor* layer_prefix) const;

  TransformerConfig cfg_;
  Tensor tok_emb_, pos_emb_;
  std::vector<Block> blocks_;
  Tensor lnf_gain_, lnf_bias_;
  Tensor head_w_, head_b_;
  std::vector<Parameter> params_;
  int64_t step_count_ = 0;
};

// ------------------------------ masked-LM pretraining ------------------------------

struct MlmConfig {
  double mask_rate = 0.15;
  int64_t steps = 300;
  int64_t batch_size = 16;
  double lr = 1e-3;
  int64_t warmup_steps = 20;
  uint64_t seed = 1;
};

struct MlmReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> step_losses;
};

MlmReport mlm_pretrain(Transformer& model, const std::vector<std::vector<int64_t>>& corpus,
                       const MlmConfig& cfg);

// Fraction of masked positions recovered exactly (argmax over the full vocabulary).
double masked_accuracy(const Transformer& model, const std::vector<std::vector<int64_t>>& corpus,
                       double mask_rate, uint64_t seed);

// ------------------------------ accounting ------------------------------

// Closed-form parameter count for the architecture above.
int64_t param_count(const TransformerConfig& cfg);

// Closed-form forward FLOPs at a given sequence length, counting matmul terms
// (2*m*n*p per product). per_layer_prefix adds key/value rows at every layer.
int64_t flop_count(const TransformerConfig& cfg, int64_t seq_len, int64_t per_layer_prefix = 0);

// ------------------------------ checkpoints ------------------------------

// JSON checkpoint with base64 float64 blobs and a SHA-256 content hash:
// {format_version, kind, config, step_count, params: [{name, shape, data}], sha256}.
void save_checkpoint_blobs(const std::string& path, const std::string& kind,
                           const std::string& config_json, int64_t step_count,
                           const std::vector<Parameter>& params);

struct CheckpointPayload {
  std::string kind;
  std::string config_json;
  int64_t step_count = 0;
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<std::vector<double>> blobs;
};

CheckpointPayload load_checkpoint_blobs(const std::string& path);

void save_backbone(const Transformer& model, const std::string& path);
Transformer load_backbone(const std::string& path);

}  // namespace ipt
