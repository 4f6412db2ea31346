#include "ipt/knowledge.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "ipt/backbone.hpp"
#include "ipt/optim.hpp"
#include "ipt/rng.hpp"

using nlohmann::json;

namespace ipt {

namespace {

constexpr int64_t kNumCategories = 13;

std::string closed_set_message(const std::string& got) {
  std::string msg = "unknown category '" + got + "'; the closed set is: ";
  for (size_t i = 0; i < kCategoryNames.size(); ++i) {
    if (i) msg += "; ";
    msg += kCategoryNames[i];
  }
  return msg;
}

}  // namespace

int64_t category_index(const std::string& category) {
  for (size_t i = 0; i < kCategoryNames.size(); ++i) {
    if (kCategoryNames[i] == category) return static_cast<int64_t>(i);
  }
  throw std::invalid_argument(closed_set_message(category));
}

void ClassifierConfig::validate() const {
  if (arch != "textcnn" && arch != "lstm" && arch != "mlp") {
    throw std::invalid_argument("classifier: arch must be textcnn, lstm or mlp");
  }
  if (embed_dim < 1 || channels < 1 || epochs < 1 || batch_size < 1) {
    throw std::invalid_argument("classifier: sizes must be positive");
  }
  if (lr <= 0.0) throw std::invalid_argument("classifier: lr must be positive");
  if (held_out_fraction <= 0.0 || held_out_fraction >= 0.5) {
    throw std::invalid_argument("classifier: held_out_fraction must be in (0, 0.5)");
  }
}

TextClassifier::TextClassifier(const ClassifierConfig& cfg, int64_t vocab_size, uint64_t seed)
    : cfg_(cfg), vocab_size_(vocab_size) {
  cfg_.validate();
  if (vocab_size < 5) throw std::invalid_argument("classifier: vocab too small");
  Rng rng(seed);
  const int64_t d = cfg_.embed_dim, c = cfg_.channels;

  auto reg = [&](const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    params_.push_back({"classifier." + name, t});
    return t;
  };

  embedding_ = reg("embedding", Tensor::randn({vocab_size, d}, rng, 0.05));
  if (cfg_.arch == "textcnn") {
    for (int64_t k : {2, 3, 4}) {
      const double std = 1.0 / std::sqrt(static_cast<double>(k * d));
      reg("conv" + std::to_string(k) + ".w", Tensor::randn({c, d, k}, rng, std));
      reg("conv" + std::to_string(k) + ".b", Tensor::full({1, c}, 0.01));
    }
    reg("head.w", Tensor::zeros({3 * c, kNumCategories}));
  } else if (cfg_.arch == "lstm") {
    for (int l = 0; l < 3; ++l) {
      const int64_t in = (l == 0) ? d : c;
      const double std = 1.0 / std::sqrt(static_cast<double>(in + c));
      reg("lstm" + std::to_string(l + 1) + ".w_ih", Tensor::randn({in, 4 * c}, rng, std));
      reg("lstm" + std::to_string(l + 1) + ".w_hh", Tensor::randn({c, 4 * c}, rng, std));
      reg("lstm" + std::to_string(l + 1) + ".b", Tensor::zeros({1, 4 * c}));
    }
    reg("head.w", Tensor::zeros({c, kNumCategories}));
  } else {
    const double std = 1.0 / std::sqrt(static_cast<double>(d));
    reg("lin1.w", Tensor::randn({d, c}, rng, std));
    reg("lin1.b", Tensor::zeros({1, c}));
    reg("lin2.w", Tensor::randn({c, c}, rng, 1.0 / std::sqrt(static_cast<double>(c))));
    reg("lin2.b", Tensor::zeros({1, c}));
    reg("head.w", Tensor::zeros({c, kNumCategories}));
  }
  // zero head: exactly uniform predictions, so the initial loss is ln 13
  reg("head.b", Tensor::zeros({1, kNumCategories}));
}

const Tensor& TextClassifier::weight(const std::string& suffix) const {
  for (const Parameter& p : params_) {
    if (p.name.size() >= suffix.size() &&
        p.name.compare(p.name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      return p.tensor;
    }
  }
  throw std::logic_error("classifier: missing weight " + suffix);
}

Tensor TextClassifier::forward_textcnn(const Tensor& embedded) const {
  std::vector<Tensor> pooled;
  for (int64_t k : {2, 3, 4}) {
    const std::string tag = "conv" + std::to_string(k);
    Tensor c = relu(conv1d(embedded, weight(tag + ".w"), weight(tag + ".b"), k - 1));
    pooled.push_back(adaptive_maxpool1d(c, 1));  // global max pool
  }
  return concat_cols(pooled);
}

Tensor TextClassifier::forward_lstm(const Tensor& embedded) const {
  const int64_t c = cfg_.channels;
  std::vector<LstmState> states(3);
  for (auto& s : states) s = {Tensor::zeros({1, c}), Tensor::zeros({1, c})};
  for (int64_t t = 0; t < embedded.rows(); ++t) {
    Tensor x = slice_rows(embedded, t, t + 1);
    for (int l = 0; l < 3; ++l) {
      const std::string tag = "lstm" + std::to_string(l + 1);
      states[static_cast<size_t>(l)] = lstm_cell(x, states[static_cast<size_t>(l)],
                                                 weight(tag + ".w_ih"), weight(tag + ".w_hh"),
                                                 weight(tag + ".b"));
      x = states[static_cast<size_t>(l)].h;
    }
  }
  return states[2].h;
}

Tensor TextClassifier::forward_mlp(const Tensor& embedded) const {
  Tensor x = mean_rows(embedded);
  x = ipt::tanh(add_rows(matmul(x, weight("lin1.w")), weight("lin1.b")));
  return ipt::tanh(add_rows(matmul(x, weight("lin2.w")), weight("lin2.b")));
}

Tensor TextClassifier::logits(const std::vector<int64_t>& ids) const {
  if (ids.empty()) throw std::invalid_argument("classifier: empty input");
  Tensor embedded = gather_rows(embedding_, ids);
  Tensor features;
  if (cfg_.arch == "textcnn") {
    features = forward_textcnn(embedded);
  } else if (cfg_.arch == "lstm") {
    features = forward_lstm(embedded);
  } else {
    features = forward_mlp(embedded);
  }
  return add_rows(matmul(features, weight("head.w")), weight("head.b"));
}

int64_t TextClassifier::predict(const std::vector<int64_t>& ids) const {
  NoGradGuard no_grad;
  Tensor l = logits(ids);
  int64_t best = 0;
  for (int64_t c = 1; c < kNumCategories; ++c) {
    if (l.data()[c] > l.data()[best]) best = c;
  }
  return best;
}

// ------------------------------ corpus labeling ------------------------------

std::vector<CategoryExample> label_corpus_by_description(
    const std::map<std::string, std::string>& manifest) {
  std::vector<CategoryExample> out;
  for (const auto& [path, category] : manifest) {
    if (!is_known_category(category)) throw std::invalid_argument(closed_set_message(category));
    for (CategoryExample ex : load_category_jsonl(path)) {
      ex.category = category;  // dataset-level labeling overrides any per-row tag
      out.push_back(std::move(ex));
    }
  }
  return out;
}

std::vector<CategoryExample> label_texts(const std::vector<std::string>& texts,
                                         const std::string& category) {
  if (!is_known_category(category)) throw std::invalid_argument(closed_set_message(category));
  std::vector<CategoryExample> out;
  out.reserve(texts.size());
  for (const std::string& t : texts) out.push_back({t, category});
  return out;
}

// ------------------------------ training ------------------------------

TrainedClassifier train_classifier(const std::vector<CategoryExample>& examples,
                                   const Vocabulary& vocab, const ClassifierConfig& cfg,
                                   uint64_t seed) {
  cfg.validate();
  if (examples.empty()) throw std::invalid_argument("train_classifier: no examples");

  std::vector<std::vector<int64_t>> encoded(examples.size());
  std::vector<int64_t> labels(examples.size());
  std::map<int64_t, std::vector<size_t>> by_label;
  for (size_t i = 0; i < examples.size(); ++i) {
    encoded[i] = vocab.encode(examples[i].text);
    if (encoded[i].empty()) throw std::invalid_argument("train_classifier: empty text");
    labels[i] = category_index(examples[i].category);
    by_label[labels[i]].push_back(i);
  }
  if (by_label.size() < 2) {
    throw std::invalid_argument("train_classifier: need at least 2 categories, got " +
                                std::to_string(by_label.size()));
  }

  // stratified held-out split
  Rng rng(seed);
  std::vector<size_t> train_idx, held_idx;
  for (auto& [label, idx] : by_label) {
    (void)label;
    rng.shuffle(idx);
    const size_t held = std::max<size_t>(idx.size() >= 2 ? 1 : 0,
                                         static_cast<size_t>(cfg.held_out_fraction *
                                                             static_cast<double>(idx.size())));
    for (size_t i = 0; i < idx.size(); ++i) {
      (i < held ? held_idx : train_idx).push_back(idx[i]);
    }
  }
  if (train_idx.empty() || held_idx.empty()) {
    throw std::invalid_argument("train_classifier: not enough data for a held-out split");
  }

  TrainedClassifier result{TextClassifier(cfg, vocab.size(), seed), vocab, 0.0, {}};
  Adam opt(result.model.parameters(), {.lr = cfg.lr});

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(train_idx);
    double epoch_loss = 0.0;
    int64_t seen = 0;
    for (size_t start = 0; start < train_idx.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(train_idx.size(), start + static_cast<size_t>(cfg.batch_size));
      opt.zero_grad();
      const double inv = 1.0 / static_cast<double>(end - start);
      for (size_t i = start; i < end; ++i) {
        const size_t idx = train_idx[i];
        Tape tape;
        Tensor loss = scale(cross_entropy(result.model.logits(encoded[idx]), {labels[idx]}), inv);
        tape.backward(loss);
        epoch_loss += loss.item() * static_cast<double>(end - start);
        ++seen;
      }
      opt.step();
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(seen));
  }

  int64_t correct = 0;
  for (size_t idx : held_idx) {
    if (result.model.predict(encoded[idx]) == labels[idx]) ++correct;
  }
  result.held_out_accuracy = static_cast<double>(correct) / static_cast<double>(held_idx.size());
  return result;
}

Tensor extract_embedding(const TrainedClassifier& classifier) {
  return classifier.model.embedding().clone();
}

Tensor pretrained_ipt_init(const TrainedClassifier& classifier, const Vocabulary& task_vocab) {
  const Vocabulary& cv = classifier.vocab;
  if (cv.id_to_token != task_vocab.id_to_token) {
    std::string missing;
    int64_t missing_count = 0;
    for (const std::string& tok : task_vocab.id_to_token) {
      if (!cv.contains(tok)) {
        ++missing_count;
        if (missing_count <= 5) missing += (missing.empty() ? "" : ", ") + tok;
      }
    }
    throw std::runtime_error(
        "pretrained_ipt_init: classifier vocabulary differs from the task vocabulary (" +
        std::to_string(missing_count) + " task tokens missing" +
        (missing.empty() ? "" : ": " + missing) + ")");
  }
  return extract_embedding(classifier);
}

// ------------------------------ checkpointing ------------------------------

void save_classifier(const TrainedClassifier& classifier, const std::string& path) {
  json jc;
  jc["arch"] = classifier.model.config().arch;
  jc["embed_dim"] = classifier.model.config().embed_dim;
  jc["channels"] = classifier.model.config().channels;
  jc["epochs"] = classifier.model.config().epochs;
  jc["batch_size"] = classifier.model.config().batch_size;
  jc["lr"] = classifier.model.config().lr;
  jc["held_out_fraction"] = classifier.model.config().held_out_fraction;
  jc["held_out_accuracy"] = classifier.held_out_accuracy;
  jc["epoch_losses"] = classifier.epoch_losses;
  jc["vocab_tokens"] = std::vector<std::string>(classifier.vocab.id_to_token.begin() + 4,
                                                classifier.vocab.id_to_token.end());
  save_checkpoint_blobs(path, "classifier", jc.dump(), 0, classifier.model.parameters());
}

TrainedClassifier load_classifier(const std::string& path) {
  CheckpointPayload payload = load_checkpoint_blobs(path);
  if (payload.kind != "classifier") {
    throw std::runtime_error("checkpoint: expected kind 'classifier', got '" + payload.kind + "'");
  }
  json jc = json::parse(payload.config_json);
  ClassifierConfig cfg;
  cfg.arch = jc.at("arch").get<std::string>();
  cfg.embed_dim = jc.at("embed_dim").get<int64_t>();
  cfg.channels = jc.at("channels").get<int64_t>();
  cfg.epochs = jc.at("epochs").get<int64_t>();
  cfg.batch_size = jc.at("batch_size").get<int64_t>();
  cfg.lr = jc.at("lr").get<double>();
  cfg.held_out_fraction = jc.at("held_out_fraction").get<double>();

  Vocabulary vocab;
  vocab.id_to_token = {"[PAD]", "[UNK]", "[MASK]", "[BOS]"};
  for (const auto& tok : jc.at("vocab_tokens")) vocab.id_to_token.push_back(tok.get<std::string>());
  vocab.rebuild_index();

  TrainedClassifier out{TextClassifier(cfg, vocab.size(), 0), vocab,
                        jc.at("held_out_accuracy").get<double>(),
                        jc.at("epoch_losses").get<std::vector<double>>()};
  for (Parameter& p : out.model.parameters()) {
    auto it = std::find(payload.names.begin(), payload.names.end(), p.name);
    if (it == payload.names.end()) throw std::runtime_error("checkpoint: missing parameter " + p.name);
    const size_t i = static_cast<size_t>(it - payload.names.begin());
    if (payload.shapes[i] != p.tensor.shape()) throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
    p.tensor.values() = payload.blobs[i];
  }
  return out;
}

}  // namespace ipt
