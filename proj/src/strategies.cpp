#include "ipt/strategies.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ipt {

namespace {

Tensor identity_matrix(int64_t d) {
  Tensor m = Tensor::zeros({d, d});
  for (int64_t i = 0; i < d; ++i) m.data()[i * d + i] = 1.0;
  return m;
}

Tensor trainable(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

}  // namespace

std::vector<Parameter> trainable_params(const PromptStrategy& strategy) {
  std::vector<Parameter> out;
  for (const Parameter& p : strategy.parameters()) {
    if (!p.frozen()) out.push_back(p);
  }
  return out;
}

int64_t trainable_param_count(const PromptStrategy& strategy) {
  int64_t count = 0;
  for (const Parameter& p : trainable_params(strategy)) count += p.size();
  return count;
}

PromptedInput make_prompted_input(const PromptStrategy& strategy, const LabeledInstance& instance) {
  GeneratedPrompts prompts = strategy.generate(instance);
  PromptedInput input;
  input.token_ids = instance.token_ids;
  input.mask_position = instance.mask_position;
  input.input_soft_prefix = prompts.input.rows;
  input.per_layer_prefixes = std::move(prompts.layer_prefixes);
  input.composed = prompts.composed;
  return input;
}

int64_t prompted_flop_count(const TransformerConfig& cfg, const PromptStrategy& strategy, int64_t n) {
  return flop_count(cfg, n + strategy.input_prefix_len(), strategy.layer_prefix_len()) +
         strategy.generation_flops(n);
}

// ------------------------------ Prompt Tuning ------------------------------

TaskPromptStrategy::TaskPromptStrategy(int64_t prompt_len, int64_t d_model, uint64_t seed) {
  if (prompt_len < 1) throw std::invalid_argument("task-prompt: prompt_len must be positive");
  Rng rng(seed);
  prompt_ = trainable(Tensor::randn({prompt_len, d_model}, rng, 0.02));
}

GeneratedPrompts TaskPromptStrategy::generate(const LabeledInstance& instance) const {
  // instance-agnostic by definition: the same shared rows for every input
  return {{prompt_, name(), instance.id}, {}, false};
}

std::vector<Parameter> TaskPromptStrategy::parameters() const {
  return {{"strategy.task_prompt.matrix", prompt_}};
}

// ------------------------------ Prefix Tuning ------------------------------

PrefixTuningStrategy::PrefixTuningStrategy(int64_t prefix_len, int64_t d_model, int64_t n_layers,
                                           uint64_t seed, int64_t reparam_hidden)
    : n_layers_(n_layers), d_model_(d_model), hidden_(reparam_hidden > 0 ? reparam_hidden : 2 * d_model) {
  if (prefix_len < 1) throw std::invalid_argument("prefix: prefix_len must be positive");
  if (n_layers < 1) throw std::invalid_argument("prefix: n_layers must be positive");
  Rng rng(seed);
  base_ = trainable(Tensor::randn({prefix_len, d_model}, rng, 0.02));
  w1_ = trainable(Tensor::randn({d_model, hidden_}, rng, 0.1));
  b1_ = trainable(Tensor::zeros({1, hidden_}));
  w2_ = trainable(Tensor::randn({hidden_, n_layers_ * d_model}, rng, 0.1));
  b2_ = trainable(Tensor::zeros({1, n_layers_ * d_model}));
}

GeneratedPrompts PrefixTuningStrategy::generate(const LabeledInstance& instance) const {
  Tensor h = ipt::tanh(add_rows(matmul(base_, w1_), b1_));
  Tensor z = add_rows(matmul(h, w2_), b2_);  // [k, n_layers * d]
  GeneratedPrompts out;
  out.input = {Tensor{}, name(), instance.id};
  for (int64_t l = 0; l < n_layers_; ++l) {
    out.layer_prefixes.push_back(slice_cols(z, l * d_model_, (l + 1) * d_model_));
  }
  return out;
}

std::vector<Parameter> PrefixTuningStrategy::parameters() const {
  return {{"strategy.prefix.base", base_},
          {"strategy.prefix.mlp.w1", w1_},
          {"strategy.prefix.mlp.b1", b1_},
          {"strategy.prefix.mlp.w2", w2_},
          {"strategy.prefix.mlp.b2", b2_}};
}

int64_t PrefixTuningStrategy::generation_flops(int64_t) const {
  const int64_t k = base_.rows();
  return 2 * k * d_model_ * hidden_ + 2 * k * hidden_ * (n_layers_ * d_model_);
}

// ------------------------------ Random / Pretrained IPT ------------------------------

TableIptStrategy::TableIptStrategy(std::string name, int64_t vocab_size, int64_t table_dim,
                                   int64_t d_model, int64_t prompt_len, uint64_t seed)
    : name_(std::move(name)), d_model_(d_model), prompt_len_(prompt_len) {
  if (prompt_len < 1) throw std::invalid_argument("table-ipt: prompt_len must be positive");
  if (vocab_size < 5) throw std::invalid_argument("table-ipt: vocab too small");
  Rng rng(seed);
  table_ = trainable(Tensor::randn({vocab_size, table_dim}, rng, 0.02));
  init_projection(seed + 1);
}

TableIptStrategy::TableIptStrategy(std::string name, Tensor initial_table, int64_t d_model,
                                   int64_t prompt_len, uint64_t seed)
    : name_(std::move(name)), d_model_(d_model), prompt_len_(prompt_len) {
  if (prompt_len < 1) throw std::invalid_argument("table-ipt: prompt_len must be positive");
  if (!initial_table.defined() || initial_table.shape().size() != 2) {
    throw std::invalid_argument("table-ipt: initial table must be 2-D");
  }
  // the strategy owns its copy: later tuning never touches the source
  table_ = trainable(initial_table.clone());
  table_.set_frozen(false);
  init_projection(seed + 1);
}

void TableIptStrategy::init_projection(uint64_t seed) {
  const int64_t d_table = table_.cols();
  if (d_table == d_model_) return;  // identity projection
  Rng rng(seed);
  projection_ = trainable(Tensor::randn({d_table, d_model_}, rng, 1.0 / std::sqrt(static_cast<double>(d_table))));
}

std::vector<int64_t> TableIptStrategy::prompt_token_ids(const std::vector<int64_t>& token_ids) const {
  if (token_ids.empty()) throw std::invalid_argument("table-ipt: empty instance");
  const int64_t n = static_cast<int64_t>(token_ids.size());
  std::vector<int64_t> ids;
  ids.reserve(static_cast<size_t>(prompt_len_));
  for (int64_t i = 0; i < std::min(n, prompt_len_); ++i) ids.push_back(token_ids[static_cast<size_t>(i)]);
  // short instances cycle their ids from the start until L rows exist
  while (static_cast<int64_t>(ids.size()) < prompt_len_) {
    ids.push_back(token_ids[ids.size() % static_cast<size_t>(n)]);
  }
  return ids;
}

GeneratedPrompts TableIptStrategy::generate(const LabeledInstance& instance) const {
  Tensor rows = gather_rows(table_, prompt_token_ids(instance.token_ids));
  if (projection_.defined()) rows = matmul(rows, projection_);
  return {{rows, name_, instance.id}, {}, false};
}

std::vector<Parameter> TableIptStrategy::parameters() const {
  std::vector<Parameter> out = {{"strategy." + name_ + ".table", table_}};
  if (projection_.defined()) out.push_back({"strategy." + name_ + ".projection", projection_});
  return out;
}

int64_t TableIptStrategy::generation_flops(int64_t) const {
  if (!projection_.defined()) return 0;  // pure lookup
  return 2 * prompt_len_ * table_.cols() * d_model_;
}

// ------------------------------ Encoder IPT ------------------------------

EncoderVariant encoder_variant_from_string(const std::string& s) {
  if (s == "cnn") return EncoderVariant::kCnn;
  if (s == "rnn" || s == "lstm") return EncoderVariant::kRnn;
  if (s == "mlp") return EncoderVariant::kMlp;
  throw std::invalid_argument("unknown encoder variant '" + s + "' (allowed: cnn, rnn, mlp)");
}

std::string to_string(EncoderVariant v) {
  switch (v) {
    case EncoderVariant::kCnn: return "cnn";
    case EncoderVariant::kRnn: return "rnn";
    case EncoderVariant::kMlp: return "mlp";
  }
  return "?";
}

int64_t encoder_trainable_count(EncoderVariant v, int64_t h, int64_t d_table, int64_t d_model,
                                int64_t prompt_len) {
  switch (v) {
    case EncoderVariant::kCnn:
      // three width-3 conv layers plus the per-position output head
      return (3 * d_table * h + h) + 2 * (3 * h * h + h) + (h * d_model + d_model);
    case EncoderVariant::kRnn:
      // three stacked LSTM layers plus three linear layers
      return 4 * (d_table * h + h * h + h) + 2 * (4 * (h * h + h * h + h)) +
             2 * (h * h + h) + (h * d_model + d_model);
    case EncoderVariant::kMlp:
      // three linear layers, the last expanding to k*d
      return (d_table * h + h) + (h * h + h) + (h * prompt_len * d_model + prompt_len * d_model);
  }
  return 0;
}

int64_t pick_encoder_hidden(EncoderVariant v, int64_t backbone_params, int64_t d_table,
                            int64_t d_model, int64_t prompt_len, double target_ratio) {
  const auto budget = static_cast<int64_t>(target_ratio * static_cast<double>(backbone_params));
  int64_t best = 1;
  for (int64_t h = 1; h <= 4 * d_model; ++h) {
    if (encoder_trainable_count(v, h, d_table, d_model, prompt_len) <= budget) best = h;
  }
  return best;
}

EncoderIptStrategy::EncoderIptStrategy(Tensor frozen_table, EncoderVariant variant,
                                       double utilization_rate, int64_t prompt_len, int64_t d_model,
                                       int64_t hidden, uint64_t seed)
    : variant_(variant),
      rate_(utilization_rate),
      prompt_len_(prompt_len),
      d_model_(d_model),
      hidden_(hidden) {
  if (rate_ <= 0.0 || rate_ > 1.0) throw std::invalid_argument("encoder-ipt: utilization rate must be in (0, 1]");
  if (prompt_len_ < 1 || hidden_ < 1) throw std::invalid_argument("encoder-ipt: invalid sizes");
  if (!frozen_table.defined() || frozen_table.shape().size() != 2) {
    throw std::invalid_argument("encoder-ipt: frozen table must be 2-D");
  }
  table_ = frozen_table.clone();
  // the table is fixed: no optimizer updates and no gradient accumulation
  table_.set_requires_grad(false);
  table_.set_frozen(true);
  d_table_ = table_.cols();

  Rng rng(seed);
  const int64_t h = hidden_;
  const std::string p = "strategy." + name() + ".";
  auto reg = [&](const std::string& n, Tensor t) {
    weights_.push_back({p + n, trainable(std::move(t))});
    return weights_.back().tensor;
  };
  switch (variant_) {
    case EncoderVariant::kCnn: {
      const double std1 = 1.0 / std::sqrt(static_cast<double>(3 * d_table_));
      const double std2 = 1.0 / std::sqrt(static_cast<double>(3 * h));
      // small positive conv biases keep relu channels alive at init
      reg("conv1.w", Tensor::randn({h, d_table_, 3}, rng, std1));
      reg("conv1.b", Tensor::full({1, h}, 0.01));
      reg("conv2.w", Tensor::randn({h, h, 3}, rng, std2));
      reg("conv2.b", Tensor::full({1, h}, 0.01));
      reg("conv3.w", Tensor::randn({h, h, 3}, rng, std2));
      reg("conv3.b", Tensor::full({1, h}, 0.01));
      reg("head.w", Tensor::randn({h, d_model_}, rng, 1.0 / std::sqrt(static_cast<double>(h))));
      reg("head.b", Tensor::zeros({1, d_model_}));
      break;
    }
    case EncoderVariant::kRnn: {
      for (int l = 0; l < 3; ++l) {
        const int64_t in = (l == 0) ? d_table_ : h;
        const double std = 1.0 / std::sqrt(static_cast<double>(in + h));
        reg("lstm" + std::to_string(l + 1) + ".w_ih", Tensor::randn({in, 4 * h}, rng, std));
        reg("lstm" + std::to_string(l + 1) + ".w_hh", Tensor::randn({h, 4 * h}, rng, std));
        reg("lstm" + std::to_string(l + 1) + ".b", Tensor::zeros({1, 4 * h}));
      }
      const double stdl = 1.0 / std::sqrt(static_cast<double>(h));
      reg("lin1.w", Tensor::randn({h, h}, rng, stdl));
      reg("lin1.b", Tensor::zeros({1, h}));
      reg("lin2.w", Tensor::randn({h, h}, rng, stdl));
      reg("lin2.b", Tensor::zeros({1, h}));
      reg("lin3.w", Tensor::randn({h, d_model_}, rng, stdl));
      reg("lin3.b", Tensor::zeros({1, d_model_}));
      break;
    }
    case EncoderVariant::kMlp: {
      reg("lin1.w", Tensor::randn({d_table_, h}, rng, 1.0 / std::sqrt(static_cast<double>(d_table_))));
      reg("lin1.b", Tensor::zeros({1, h}));
      reg("lin2.w", Tensor::randn({h, h}, rng, 1.0 / std::sqrt(static_cast<double>(h))));
      reg("lin2.b", Tensor::zeros({1, h}));
      reg("lin3.w", Tensor::randn({h, prompt_len_ * d_model_}, rng, 1.0 / std::sqrt(static_cast<double>(h))));
      reg("lin3.b", Tensor::zeros({1, prompt_len_ * d_model_}));
      break;
    }
  }
}

int64_t EncoderIptStrategy::consumed_tokens(int64_t n) const {
  const auto m = static_cast<int64_t>(std::ceil(rate_ * static_cast<double>(n)));
  return std::clamp<int64_t>(m, 1, n);
}

namespace {

const Tensor& weight(const std::vector<Parameter>& params, const std::string& suffix) {
  for (const Parameter& p : params) {
    if (p.name.size() >= suffix.size() &&
        p.name.compare(p.name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      return p.tensor;
    }
  }
  throw std::logic_error("encoder-ipt: missing weight " + suffix);
}

}  // namespace

Tensor EncoderIptStrategy::encode_cnn(const Tensor& embedded) const {
  Tensor x = embedded;
  for (int l = 1; l <= 3; ++l) {
    const std::string tag = "conv" + std::to_string(l);
    x = relu(conv1d(x, weight(weights_, tag + ".w"), weight(weights_, tag + ".b"), 1));
    x = maxpool1d(x, 2, 2);
  }
  x = adaptive_maxpool1d(x, prompt_len_);
  return add_rows(matmul(x, weight(weights_, "head.w")), weight(weights_, "head.b"));
}

Tensor EncoderIptStrategy::encode_rnn(const Tensor& embedded) const {
  const int64_t m = embedded.rows();
  std::vector<LstmState> states(3);
  for (int l = 0; l < 3; ++l) {
    states[static_cast<size_t>(l)] = {Tensor::zeros({1, hidden_}), Tensor::zeros({1, hidden_})};
  }
  std::vector<Tensor> top_hidden;
  for (int64_t t = 0; t < m; ++t) {
    Tensor x = slice_rows(embedded, t, t + 1);
    for (int l = 0; l < 3; ++l) {
      const std::string tag = "lstm" + std::to_string(l + 1);
      states[static_cast<size_t>(l)] =
          lstm_cell(x, states[static_cast<size_t>(l)], weight(weights_, tag + ".w_ih"),
                    weight(weights_, tag + ".w_hh"), weight(weights_, tag + ".b"));
      x = states[static_cast<size_t>(l)].h;
    }
    top_hidden.push_back(x);
  }
  // last k hidden states, zero rows on the left when the sequence is short
  std::vector<Tensor> rows;
  for (int64_t i = m; i < prompt_len_; ++i) rows.push_back(Tensor::zeros({1, hidden_}));
  const int64_t start = std::max<int64_t>(0, m - prompt_len_);
  for (int64_t i = start; i < m; ++i) rows.push_back(top_hidden[static_cast<size_t>(i)]);
  Tensor x = concat_rows(rows);
  x = ipt::tanh(add_rows(matmul(x, weight(weights_, "lin1.w")), weight(weights_, "lin1.b")));
  x = ipt::tanh(add_rows(matmul(x, weight(weights_, "lin2.w")), weight(weights_, "lin2.b")));
  return add_rows(matmul(x, weight(weights_, "lin3.w")), weight(weights_, "lin3.b"));
}

Tensor EncoderIptStrategy::encode_mlp(const Tensor& embedded) const {
  Tensor x = mean_rows(embedded);
  x = ipt::tanh(add_rows(matmul(x, weight(weights_, "lin1.w")), weight(weights_, "lin1.b")));
  x = ipt::tanh(add_rows(matmul(x, weight(weights_, "lin2.w")), weight(weights_, "lin2.b")));
  x = add_rows(matmul(x, weight(weights_, "lin3.w")), weight(weights_, "lin3.b"));
  return reshape(x, {prompt_len_, d_model_});
}

GeneratedPrompts EncoderIptStrategy::generate(const LabeledInstance& instance) const {
  if (instance.token_ids.empty()) throw std::invalid_argument("encoder-ipt: empty instance");
  const int64_t m = consumed_tokens(static_cast<int64_t>(instance.token_ids.size()));
  std::vector<int64_t> leading(instance.token_ids.begin(), instance.token_ids.begin() + m);
  Tensor embedded = gather_rows(table_, leading);
  Tensor rows;
  switch (variant_) {
    case EncoderVariant::kCnn: rows = encode_cnn(embedded); break;
    case EncoderVariant::kRnn: rows = encode_rnn(embedded); break;
    case EncoderVariant::kMlp: rows = encode_mlp(embedded); break;
  }
  return {{rows, name(), instance.id}, {}, false};
}

std::vector<Parameter> EncoderIptStrategy::parameters() const {
  std::vector<Parameter> out = {{"strategy." + name() + ".table", table_}};
  out.insert(out.end(), weights_.begin(), weights_.end());
  return out;
}

int64_t EncoderIptStrategy::generation_flops(int64_t n) const {
  const int64_t m = consumed_tokens(n);
  const int64_t h = hidden_;
  switch (variant_) {
    case EncoderVariant::kCnn: {
      int64_t flops = 0;
      int64_t len = m;
      int64_t cin = d_table_;
      for (int l = 0; l < 3; ++l) {
        flops += 2 * len * h * cin * 3;                       // conv at width-3 kernel
        len = std::max<int64_t>(1, (len - 2 + 1) / 2 + 1);    // pool(2, 2), ceil mode
        cin = h;
      }
      return flops + 2 * prompt_len_ * h * d_model_;          // head
    }
    case EncoderVariant::kRnn: {
      const int64_t per_step = 2 * (d_table_ * 4 * h + h * 4 * h) + 2 * (2 * (h * 4 * h + h * 4 * h));
      const int64_t linears = 2 * prompt_len_ * (h * h + h * h + h * d_model_);
      return m * per_step + linears;
    }
    case EncoderVariant::kMlp:
      return 2 * (d_table_ * h + h * h + h * prompt_len_ * d_model_);
  }
  return 0;
}

// ------------------------------ hard type-prefix variant ------------------------------

Tensor hard_prefix_apply(const Transformer& backbone, const std::vector<int64_t>& phrase_ids,
                         const Tensor& prompt_rows) {
  if (phrase_ids.empty()) throw std::invalid_argument("hard prefix: empty phrase");
  Tensor phrase = backbone.embed_tokens(phrase_ids);
  return concat_rows({phrase, prompt_rows});
}

HardPrefixStrategy::HardPrefixStrategy(std::unique_ptr<TableIptStrategy> inner,
                                       const Transformer& backbone, std::vector<int64_t> phrase_ids)
    : inner_(std::move(inner)), backbone_(&backbone), phrase_ids_(std::move(phrase_ids)) {
  if (phrase_ids_.empty()) throw std::invalid_argument("hard prefix: empty phrase");
  for (int64_t id : phrase_ids_) {
    if (id < 0 || id >= backbone_->config().vocab_size) {
      throw std::invalid_argument("hard prefix: phrase token out of vocabulary");
    }
  }
}

GeneratedPrompts HardPrefixStrategy::generate(const LabeledInstance& instance) const {
  GeneratedPrompts prompts = inner_->generate(instance);
  prompts.input.rows = hard_prefix_apply(*backbone_, phrase_ids_, prompts.input.rows);
  prompts.input.strategy = name();
  return prompts;
}

int64_t HardPrefixStrategy::input_prefix_len() const {
  return static_cast<int64_t>(phrase_ids_.size()) + inner_->input_prefix_len();
}

// ------------------------------ prefix + IPT composition ------------------------------

PrefixIptStrategy::PrefixIptStrategy(std::unique_ptr<PromptStrategy> inner, int64_t n_layers,
                                     int64_t d_model)
    : inner_(std::move(inner)), n_layers_(n_layers), d_model_(d_model) {
  if (inner_->input_prefix_len() < 1) {
    throw std::invalid_argument("prefix+ipt: inner strategy must produce input-layer prompts");
  }
  for (int64_t l = 0; l < n_layers_; ++l) {
    proj_w_.push_back(trainable(identity_matrix(d_model_)));
    proj_b_.push_back(trainable(Tensor::zeros({1, d_model_})));
  }
}

GeneratedPrompts PrefixIptStrategy::generate(const LabeledInstance& instance) const {
  GeneratedPrompts inner = inner_->generate(instance);
  GeneratedPrompts out;
  out.input = {Tensor{}, name(), instance.id};
  out.composed = true;
  for (int64_t l = 0; l < n_layers_; ++l) {
    out.layer_prefixes.push_back(add_rows(matmul(inner.input.rows, proj_w_[static_cast<size_t>(l)]),
                                          proj_b_[static_cast<size_t>(l)]));
  }
  return out;
}

std::vector<Parameter> PrefixIptStrategy::parameters() const {
  std::vector<Parameter> out = inner_->parameters();
  for (int64_t l = 0; l < n_layers_; ++l) {
    out.push_back({"strategy.prefix_ipt.proj" + std::to_string(l) + ".w", proj_w_[static_cast<size_t>(l)]});
    out.push_back({"strategy.prefix_ipt.proj" + std::to_string(l) + ".b", proj_b_[static_cast<size_t>(l)]});
  }
  return out;
}

int64_t PrefixIptStrategy::generation_flops(int64_t n) const {
  const int64_t k = inner_->input_prefix_len();
  return inner_->generation_flops(n) + n_layers_ * 2 * k * d_model_ * d_model_;
}

// ------------------------------ fine-tuning baseline ------------------------------

GeneratedPrompts NoPromptStrategy::generate(const LabeledInstance& instance) const {
  return {{Tensor{}, name(), instance.id}, {}, false};
}

// ------------------------------ config-driven construction ------------------------------

void StrategyConfig::validate() const {
  static const std::vector<std::string> kinds = {"task-prompt", "prefix",      "random-ipt",
                                                 "pretrained-ipt", "encoder-ipt", "fine-tuning"};
  if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end()) {
    std::string allowed;
    for (const auto& k : kinds) allowed += (allowed.empty() ? "" : ", ") + k;
    throw std::invalid_argument("unknown strategy '" + kind + "' (allowed: " + allowed + ")");
  }
  encoder_variant_from_string(encoder);
  if (prompt_len < 1) throw std::invalid_argument("strategy: prompt_len must be positive");
  if (utilization_rate <= 0.0 || utilization_rate > 1.0) {
    throw std::invalid_argument("strategy: utilization_rate must be in (0, 1]");
  }
  if (kind == "fine-tuning" && (compose_prefix || !hard_prefix.empty())) {
    throw std::invalid_argument("strategy: fine-tuning takes no prompt options");
  }
  if (!hard_prefix.empty() && kind != "random-ipt" && kind != "pretrained-ipt") {
    throw std::invalid_argument("strategy: hard_prefix applies to random-ipt/pretrained-ipt prompts");
  }
  if (compose_prefix && (kind == "task-prompt" || kind == "prefix")) {
    throw std::invalid_argument("strategy: compose_prefix applies to instance-wise strategies");
  }
}

std::unique_ptr<PromptStrategy> make_strategy(const StrategyConfig& cfg, const Transformer& backbone,
                                              const Vocabulary& vocab, const Tensor* pretrained_table) {
  cfg.validate();
  const TransformerConfig& bc = backbone.config();
  const int64_t d_table = cfg.table_dim > 0 ? cfg.table_dim : bc.d_model;

  if (cfg.kind == "fine-tuning") return std::make_unique<NoPromptStrategy>();
  if (cfg.kind == "task-prompt") {
    return std::make_unique<TaskPromptStrategy>(cfg.prompt_len, bc.d_model, cfg.seed);
  }
  if (cfg.kind == "prefix") {
    return std::make_unique<PrefixTuningStrategy>(cfg.prompt_len, bc.d_model, bc.n_layers, cfg.seed);
  }

  std::unique_ptr<PromptStrategy> strategy;
  if (cfg.kind == "random-ipt" || cfg.kind == "pretrained-ipt") {
    std::unique_ptr<TableIptStrategy> table;
    if (cfg.kind == "pretrained-ipt") {
      if (!pretrained_table || !pretrained_table->defined()) {
        throw std::invalid_argument("pretrained-ipt: a pretrained prompt table is required");
      }
      if (pretrained_table->rows() != vocab.size()) {
        throw std::invalid_argument("pretrained-ipt: table rows do not match the vocabulary");
      }
      table = std::make_unique<TableIptStrategy>("pretrained-ipt", *pretrained_table, bc.d_model,
                                                 cfg.prompt_len, cfg.seed);
    } else {
      table = std::make_unique<TableIptStrategy>("random-ipt", vocab.size(), d_table, bc.d_model,
                                                 cfg.prompt_len, cfg.seed);
    }
    if (!cfg.hard_prefix.empty()) {
      std::vector<int64_t> phrase_ids = vocab.encode(cfg.hard_prefix);
      for (int64_t id : phrase_ids) {
        if (id == Vocabulary::kUnk) {
          throw std::invalid_argument("hard_prefix: phrase token not in the vocabulary: " + cfg.hard_prefix);
        }
      }
      strategy = std::make_unique<HardPrefixStrategy>(std::move(table), backbone, std::move(phrase_ids));
    } else {
      strategy = std::move(table);
    }
  } else {  // encoder-ipt
    Tensor table;
    if (pretrained_table && pretrained_table->defined()) {
      table = pretrained_table->clone();
    } else {
      Rng rng(cfg.seed + 77);
      table = Tensor::randn({vocab.size(), d_table}, rng, 0.02);
    }
    const EncoderVariant variant = encoder_variant_from_string(cfg.encoder);
    const int64_t hidden = cfg.encoder_hidden > 0
                               ? cfg.encoder_hidden
                               : pick_encoder_hidden(variant, param_count(bc), table.cols(), bc.d_model,
                                                     cfg.prompt_len);
    strategy = std::make_unique<EncoderIptStrategy>(table, variant, cfg.utilization_rate,
                                                    cfg.prompt_len, bc.d_model, hidden, cfg.seed);
  }

  if (cfg.compose_prefix) {
    strategy = std::make_unique<PrefixIptStrategy>(std::move(strategy), bc.n_layers, bc.d_model);
  }
  return strategy;
}

}  // namespace ipt
