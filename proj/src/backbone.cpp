#include "ipt/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "ipt/optim.hpp"
#include "ipt/serialize.hpp"
#include "ipt/text.hpp"

using nlohmann::json;

namespace ipt {

void TransformerConfig::validate() const {
  if (vocab_size < 5) throw std::invalid_argument("transformer: vocab_size must be >= 5");
  if (d_model < 1 || n_layers < 1 || n_heads < 1 || ff_dim < 1 || max_context < 1) {
    throw std::invalid_argument("transformer: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw std::invalid_argument("transformer: d_model must be divisible by n_heads");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("transformer: dropout must be in [0, 1)");
}

Transformer::Transformer(const TransformerConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int64_t d = cfg_.d_model, ff = cfg_.ff_dim, v = cfg_.vocab_size;
  const double w_std = 0.02;

  auto reg = [&](const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    params_.push_back({name, t});
    return t;
  };

  tok_emb_ = reg("backbone.tok_emb", Tensor::randn({v, d}, rng, w_std));
  pos_emb_ = reg("backbone.pos_emb", Tensor::randn({cfg_.max_context, d}, rng, 0.01));
  for (int64_t i = 0; i < cfg_.n_layers; ++i) {
    const std::string p = "backbone.block" + std::to_string(i) + ".";
    Block blk;
    blk.ln1_gain = reg(p + "ln1.gain", Tensor::full({1, d}, 1.0));
    blk.ln1_bias = reg(p + "ln1.bias", Tensor::zeros({1, d}));
    blk.wq = reg(p + "attn.wq", Tensor::randn({d, d}, rng, w_std));
    blk.bq = reg(p + "attn.bq", Tensor::zeros({1, d}));
    blk.wk = reg(p + "attn.wk", Tensor::randn({d, d}, rng, w_std));
    blk.bk = reg(p + "attn.bk", Tensor::zeros({1, d}));
    blk.wv = reg(p + "attn.wv", Tensor::randn({d, d}, rng, w_std));
    blk.bv = reg(p + "attn.bv", Tensor::zeros({1, d}));
    blk.wo = reg(p + "attn.wo", Tensor::randn({d, d}, rng, w_std));
    blk.bo = reg(p + "attn.bo", Tensor::zeros({1, d}));
    blk.ln2_gain = reg(p + "ln2.gain", Tensor::full({1, d}, 1.0));
    blk.ln2_bias = reg(p + "ln2.bias", Tensor::zeros({1, d}));
    blk.ff_w1 = reg(p + "ff.w1", Tensor::randn({d, ff}, rng, w_std));
    blk.ff_b1 = reg(p + "ff.b1", Tensor::zeros({1, ff}));
    blk.ff_w2 = reg(p + "ff.w2", Tensor::randn({ff, d}, rng, w_std));
    blk.ff_b2 = reg(p + "ff.b2", Tensor::zeros({1, d}));
    blocks_.push_back(blk);
  }
  lnf_gain_ = reg("backbone.ln_f.gain", Tensor::full({1, d}, 1.0));
  lnf_bias_ = reg("backbone.ln_f.bias", Tensor::zeros({1, d}));
  head_w_ = reg("backbone.head.w", Tensor::randn({d, v}, rng, w_std));
  head_b_ = reg("backbone.head.b", Tensor::zeros({1, v}));
}

void Transformer::set_frozen(bool frozen) {
  for (Parameter& p : params_) p.set_frozen(frozen);
}

Transformer Transformer::deep_copy() const {
  Transformer copy(cfg_, 0);
  for (size_t i = 0; i < params_.size(); ++i) {
    copy.params_[i].tensor.values() = params_[i].tensor.values();
    copy.params_[i].set_frozen(params_[i].frozen());
  }
  copy.step_count_ = step_count_;
  return copy;
}

Tensor Transformer::embed_tokens(const std::vector<int64_t>& ids) const {
  return gather_rows(tok_emb_, ids);
}

Tensor Transformer::attention(const Block& blk, const Tensor& x, const Tensor* layer_prefix) const {
  const int64_t d = cfg_.d_model;
  const int64_t hd = d / cfg_.n_heads;
  Tensor xn = layer_norm(x, blk.ln1_gain, blk.ln1_bias);
  Tensor source = xn;
  if (layer_prefix) {
    // prefix rows join the layer input for key/value computation only
    Tensor pn = layer_norm(*layer_prefix, blk.ln1_gain, blk.ln1_bias);
    source = concat_rows({pn, xn});
  }
  Tensor q = add_rows(matmul(xn, blk.wq), blk.bq);
  Tensor k = add_rows(matmul(source, blk.wk), blk.bk);
  Tensor v = add_rows(matmul(source, blk.wv), blk.bv);

  std::vector<Tensor> head_outputs;
  for (int64_t h = 0; h < cfg_.n_heads; ++h) {
    Tensor qh = slice_cols(q, h * hd, (h + 1) * hd);
    Tensor kh = slice_cols(k, h * hd, (h + 1) * hd);
    Tensor vh = slice_cols(v, h * hd, (h + 1) * hd);
    Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(hd)));
    head_outputs.push_back(matmul(softmax(scores), vh));
  }
  return add_rows(matmul(concat_cols(head_outputs), blk.wo), blk.bo);
}

Tensor Transformer::forward_states(const PromptedInput& input, Rng* dropout_rng) const {
  const int64_t k = input.prefix_len();
  const int64_t n = static_cast<int64_t>(input.token_ids.size());
  if (n < 1) throw std::invalid_argument("forward: empty token sequence");
  if (k + n > cfg_.max_context) {
    throw std::runtime_error("context overflow: prompt " + std::to_string(k) + " + instance " +
                             std::to_string(n) + " > max_context " + std::to_string(cfg_.max_context));
  }
  if (!input.per_layer_prefixes.empty() &&
      static_cast<int64_t>(input.per_layer_prefixes.size()) != cfg_.n_layers) {
    throw std::invalid_argument("forward: need one per-layer prefix per layer");
  }
  if (k > 0 && !input.per_layer_prefixes.empty() && !input.composed) {
    throw std::invalid_argument(
        "forward: input soft prefix and per-layer prefixes combined outside the prefix+IPT projection");
  }
  if (input.input_soft_prefix.defined() && input.input_soft_prefix.cols() != cfg_.d_model) {
    throw std::invalid_argument("forward: soft prefix width differs from d_model");
  }

  Tensor x = gather_rows(tok_emb_, input.token_ids);
  if (k > 0) x = concat_rows({input.input_soft_prefix, x});
  x = add(x, slice_rows(pos_emb_, 0, k + n));

  const bool use_dropout = dropout_rng != nullptr && cfg_.dropout > 0.0;
  for (int64_t i = 0; i < cfg_.n_layers; ++i) {
    const Block& blk = blocks_[static_cast<size_t>(i)];
    const Tensor* prefix = input.per_layer_prefixes.empty()
                               ? nullptr
                               : &input.per_layer_prefixes[static_cast<size_t>(i)];
    Tensor attn = attention(blk, x, prefix);
    if (use_dropout) attn = dropout(attn, cfg_.dropout, *dropout_rng);
    x = add(x, attn);
    Tensor xn = layer_norm(x, blk.ln2_gain, blk.ln2_bias);
    Tensor ff = add_rows(matmul(gelu(add_rows(matmul(xn, blk.ff_w1), blk.ff_b1)), blk.ff_w2), blk.ff_b2);
    if (use_dropout) ff = dropout(ff, cfg_.dropout, *dropout_rng);
    x = add(x, ff);
  }
  return layer_norm(x, lnf_gain_, lnf_bias_);
}

Tensor Transformer::forward_logits(const PromptedInput& input, Rng* dropout_rng) const {
  return add_rows(matmul(forward_states(input, dropout_rng), head_w_), head_b_);
}

Tensor Transformer::classify_logits(const PromptedInput& input,
                                    const std::vector<int64_t>& verbalizer_ids) const {
  if (verbalizer_ids.empty()) throw std::invalid_argument("classify: no verbalizer tokens");
  const int64_t n = static_cast<int64_t>(input.token_ids.size());
  if (input.mask_position < 0 || input.mask_position >= n) {
    throw std::invalid_argument("classify: mask_position out of range");
  }
  for (int64_t id : verbalizer_ids) {
    if (id < 0 || id >= cfg_.vocab_size) throw std::runtime_error("classify: verbalizer token not in vocab");
  }
  Tensor logits = forward_logits(input);
  const int64_t row = input.prefix_len() + input.mask_position;
  return select_columns(slice_rows(logits, row, row + 1), verbalizer_ids);
}

std::vector<double> Transformer::classify(const PromptedInput& input,
                                          const std::vector<int64_t>& verbalizer_ids) const {
  NoGradGuard no_grad;
  Tensor probs = softmax(classify_logits(input, verbalizer_ids));
  return probs.values();
}

// ------------------------------ masked-LM pretraining ------------------------------

namespace {

// Masked copy of a sentence; forces at least one masked position.
std::vector<int64_t> apply_mask(const std::vector<int64_t>& ids, double mask_rate, Rng& rng,
                                std::vector<int64_t>* masked_positions) {
  std::vector<int64_t> corrupted = ids;
  masked_positions->clear();
  for (size_t i = 0; i < ids.size(); ++i) {
    if (rng.uniform() < mask_rate) {
      corrupted[i] = Vocabulary::kMask;
      masked_positions->push_back(static_cast<int64_t>(i));
    }
  }
  if (masked_positions->empty()) {
    const size_t i = static_cast<size_t>(rng.below(ids.size()));
    corrupted[i] = Vocabulary::kMask;
    masked_positions->push_back(static_cast<int64_t>(i));
  }
  return corrupted;
}

double batch_mlm_loss(const Transformer& model, const std::vector<std::vector<int64_t>>& corpus,
                      double mask_rate, uint64_t seed, int64_t batch) {
  NoGradGuard no_grad;
  Rng rng(seed);
  double total = 0.0;
  int64_t count = 0;
  for (int64_t b = 0; b < batch; ++b) {
    const auto& ids = corpus[static_cast<size_t>(rng.below(corpus.size()))];
    std::vector<int64_t> masked_positions;
    const auto corrupted = apply_mask(ids, mask_rate, rng, &masked_positions);
    PromptedInput input;
    input.token_ids = corrupted;
    Tensor logits = model.forward_logits(input);
    std::vector<int64_t> targets;
    for (int64_t pos : masked_positions) targets.push_back(ids[static_cast<size_t>(pos)]);
    total += cross_entropy(gather_rows(logits, masked_positions), targets).item();
    ++count;
  }
  return total / static_cast<double>(count);
}

}  // namespace

MlmReport mlm_pretrain(Transformer& model, const std::vector<std::vector<int64_t>>& corpus,
                       const MlmConfig& cfg) {
  if (corpus.empty()) throw std::invalid_argument("mlm_pretrain: empty corpus");
  for (const auto& ids : corpus) {
    if (ids.empty()) throw std::invalid_argument("mlm_pretrain: empty sentence");
    if (static_cast<int64_t>(ids.size()) > model.config().max_context) {
      throw std::invalid_argument("mlm_pretrain: sentence longer than max_context");
    }
    for (int64_t id : ids) {
      if (id < 0 || id >= model.config().vocab_size) throw std::invalid_argument("mlm_pretrain: token id out of vocab");
    }
  }

  MlmReport report;
  report.initial_loss = batch_mlm_loss(model, corpus, cfg.mask_rate, cfg.seed + 7, 24);
  if (cfg.steps == 0) {
    report.final_loss = report.initial_loss;
    return report;
  }

  Adam opt(model.parameters(), {.lr = cfg.lr, .warmup_steps = cfg.warmup_steps});
  Rng rng(cfg.seed);
  Rng dropout_rng(cfg.seed + 13);
  for (int64_t step = 0; step < cfg.steps; ++step) {
    opt.zero_grad();
    double step_loss = 0.0;
    for (int64_t b = 0; b < cfg.batch_size; ++b) {
      const auto& ids = corpus[static_cast<size_t>(rng.below(corpus.size()))];
      std::vector<int64_t> masked_positions;
      const auto corrupted = apply_mask(ids, cfg.mask_rate, rng, &masked_positions);
      PromptedInput input;
      input.token_ids = corrupted;
      std::vector<int64_t> targets;
      for (int64_t pos : masked_positions) targets.push_back(ids[static_cast<size_t>(pos)]);
      Tape tape;
      Tensor logits = model.forward_logits(input, &dropout_rng);
      Tensor loss = scale(cross_entropy(gather_rows(logits, masked_positions), targets),
                          1.0 / static_cast<double>(cfg.batch_size));
      tape.backward(loss);
      step_loss += loss.item() * static_cast<double>(cfg.batch_size);
    }
    opt.step();
    report.step_losses.push_back(step_loss / static_cast<double>(cfg.batch_size));
  }
  opt.zero_grad();
  model.set_step_count(model.step_count() + cfg.steps);
  report.final_loss = batch_mlm_loss(model, corpus, cfg.mask_rate, cfg.seed + 7, 24);
  return report;
}

double masked_accuracy(const Transformer& model, const std::vector<std::vector<int64_t>>& corpus,
                       double mask_rate, uint64_t seed) {
  NoGradGuard no_grad;
  Rng rng(seed);
  int64_t correct = 0, total = 0;
  for (const auto& ids : corpus) {
    std::vector<int64_t> masked_positions;
    const auto corrupted = apply_mask(ids, mask_rate, rng, &masked_positions);
    PromptedInput input;
    input.token_ids = corrupted;
    Tensor logits = model.forward_logits(input);
    const int64_t v = model.config().vocab_size;
    for (int64_t pos : masked_positions) {
      const double* row = logits.data() + pos * v;
      int64_t best = 0;
      for (int64_t c = 1; c < v; ++c) {
        if (row[c] > row[best]) best = c;
      }
      if (best == ids[static_cast<size_t>(pos)]) ++correct;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

// ------------------------------ accounting ------------------------------

int64_t param_count(const TransformerConfig& cfg) {
  const int64_t d = cfg.d_model, ff = cfg.ff_dim, v = cfg.vocab_size;
  const int64_t per_layer = 4 * (d * d + d)   // q, k, v, o projections with biases
                            + 2 * (2 * d)     // two layer norms
                            + d * ff + ff     // ff in
                            + ff * d + d;     // ff out
  return v * d                                // token embeddings
         + cfg.max_context * d                // position embeddings
         + cfg.n_layers * per_layer
         + 2 * d                              // final layer norm
         + d * v + v;                         // cloze head
}

int64_t flop_count(const TransformerConfig& cfg, int64_t seq_len, int64_t per_layer_prefix) {
  const int64_t d = cfg.d_model, ff = cfg.ff_dim, v = cfg.vocab_size;
  const int64_t s = seq_len;
  const int64_t skv = seq_len + per_layer_prefix;
  const int64_t per_layer = 2 * s * d * d          // queries
                            + 2 * (2 * skv * d * d)  // keys and values
                            + 2 * s * skv * d        // attention scores
                            + 2 * s * skv * d        // attention-weighted values
                            + 2 * s * d * d          // output projection
                            + 2 * s * d * ff         // ff in
                            + 2 * s * ff * d;        // ff out
  return cfg.n_layers * per_layer + 2 * s * d * v;   // blocks + cloze head
}

// ------------------------------ checkpoints ------------------------------

namespace {

std::string hash_params(const std::vector<std::string>& names, const std::vector<Shape>& shapes,
                        const std::vector<std::vector<double>>& blobs) {
  Sha256 hash;
  for (size_t i = 0; i < names.size(); ++i) {
    hash.update(names[i]);
    hash.update("\n", 1);
    std::string dims;
    for (int64_t dim : shapes[i]) dims += std::to_string(dim) + ",";
    hash.update(dims);
    hash.update("\n", 1);
    hash.update(blobs[i]);
  }
  return hash.hex_digest();
}

}  // namespace

void save_checkpoint_blobs(const std::string& path, const std::string& kind,
                           const std::string& config_json, int64_t step_count,
                           const std::vector<Parameter>& params) {
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<std::vector<double>> blobs;
  json jparams = json::array();
  for (const Parameter& p : params) {
    names.push_back(p.name);
    shapes.push_back(p.tensor.shape());
    blobs.push_back(p.tensor.values());
    json jp;
    jp["name"] = p.name;
    jp["shape"] = p.tensor.shape();
    jp["data"] = doubles_to_base64(p.tensor.values());
    jparams.push_back(jp);
  }
  json j;
  j["format_version"] = 1;
  j["kind"] = kind;
  j["config"] = json::parse(config_json);
  j["step_count"] = step_count;
  j["params"] = jparams;
  j["sha256"] = hash_params(names, shapes, blobs);

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << j.dump() << "\n";
}

CheckpointPayload load_checkpoint_blobs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  json j = json::parse(in);
  if (j.at("format_version").get<int>() != 1) {
    throw std::runtime_error("checkpoint: unsupported format_version");
  }
  CheckpointPayload payload;
  payload.kind = j.at("kind").get<std::string>();
  payload.config_json = j.at("config").dump();
  payload.step_count = j.at("step_count").get<int64_t>();
  for (const auto& jp : j.at("params")) {
    payload.names.push_back(jp.at("name").get<std::string>());
    payload.shapes.push_back(jp.at("shape").get<Shape>());
    payload.blobs.push_back(doubles_from_base64(jp.at("data").get<std::string>()));
  }
  const std::string expected = j.at("sha256").get<std::string>();
  const std::string actual = hash_params(payload.names, payload.shapes, payload.blobs);
  if (expected != actual) {
    throw std::runtime_error("checkpoint: sha256 mismatch (file corrupted or edited)");
  }
  return payload;
}

void save_backbone(const Transformer& model, const std::string& path) {
  const TransformerConfig& c = model.config();
  json jc;
  jc["vocab_size"] = c.vocab_size;
  jc["d_model"] = c.d_model;
  jc["n_layers"] = c.n_layers;
  jc["n_heads"] = c.n_heads;
  jc["ff_dim"] = c.ff_dim;
  jc["max_context"] = c.max_context;
  jc["dropout"] = c.dropout;
  save_checkpoint_blobs(path, "backbone", jc.dump(), model.step_count(), model.parameters());
}

Transformer load_backbone(const std::string& path) {
  CheckpointPayload payload = load_checkpoint_blobs(path);
  if (payload.kind != "backbone") {
    throw std::runtime_error("checkpoint: expected kind 'backbone', got '" + payload.kind + "'");
  }
  json jc = json::parse(payload.config_json);
  TransformerConfig cfg;
  cfg.vocab_size = jc.at("vocab_size").get<int64_t>();
  cfg.d_model = jc.at("d_model").get<int64_t>();
  cfg.n_layers = jc.at("n_layers").get<int64_t>();
  cfg.n_heads = jc.at("n_heads").get<int64_t>();
  cfg.ff_dim = jc.at("ff_dim").get<int64_t>();
  cfg.max_context = jc.at("max_context").get<int64_t>();
  cfg.dropout = jc.at("dropout").get<double>();

  Transformer model(cfg, 0);
  std::set<std::string> restored;
  for (Parameter& p : model.parameters()) {
    auto it = std::find(payload.names.begin(), payload.names.end(), p.name);
    if (it == payload.names.end()) throw std::runtime_error("checkpoint: missing parameter " + p.name);
    const size_t i = static_cast<size_t>(it - payload.names.begin());
    if (payload.shapes[i] != p.tensor.shape()) throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
    p.tensor.values() = payload.blobs[i];
    restored.insert(p.name);
  }
  if (restored.size() != payload.names.size()) {
    throw std::runtime_error("checkpoint: extra parameters in file");
  }
  model.set_step_count(payload.step_count);
  return model;
}

}  // namespace ipt
