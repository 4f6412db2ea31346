#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ipt/tensor.hpp"
#include "ipt/text.hpp"

namespace ipt {

struct ClassifierConfig {
  std::string arch = "textcnn";  // textcnn | lstm | mlp
  int64_t embed_dim = 64;        // d_p; defaults to the backbone width so
                                 // extraction needs no projection
  int64_t channels = 32;         // conv channels / hidden width
  int64_t epochs = 8;
  int64_t batch_size = 64;
  double lr = 2e-3;
  double held_out_fraction = 0.10;

  void validate() const;
};

// 13-way text classifier over the fixed category taxonomy. The default
// TextCNN uses three conv branches (widths 2/3/4) with one global max-pool
// each; lstm and mlp variants share the interface.
class TextClassifier {
 public:
  TextClassifier(const ClassifierConfig& cfg, int64_t vocab_size, uint64_t seed);

  Tensor logits(const std::vector<int64_t>& ids) const;  // [1, 13], differentiable
  int64_t predict(const std::vector<int64_t>& ids) const;

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  const Tensor& embedding() const { return embedding_; }
  const ClassifierConfig& config() const { return cfg_; }
  int64_t vocab_size() const { return vocab_size_; }

 private:
  Tensor forward_textcnn(const Tensor& embedded) const;
  Tensor forward_lstm(const Tensor& embedded) const;
  Tensor forward_mlp(const Tensor& embedded) const;
  const Tensor& weight(const std::string& suffix) const;

  ClassifierConfig cfg_;
  int64_t vocab_size_ = 0;
  Tensor embedding_;
  std::vector<Parameter> params_;
};

struct TrainedClassifier {
  TextClassifier model;
  Vocabulary vocab;
  double held_out_accuracy = 0.0;
  std::vector<double> epoch_losses;  // mean training loss per epoch
};

// Dataset-level labeling: every text in a manifest source inherits that
// source's category. Unknown category names list the closed set.
std::vector<CategoryExample> label_corpus_by_description(
    const std::map<std::string, std::string>& manifest);

// In-memory variant of the same rule.
std::vector<CategoryExample> label_texts(const std::vector<std::string>& texts,
                                         const std::string& category);

int64_t category_index(const std::string& category);  // throws, listing the closed set

// Minimizes the category cross-entropy by mini-batch Adam; reports accuracy
// on a stratified held-out split. Deterministic under seed.
TrainedClassifier train_classifier(const std::vector<CategoryExample>& examples,
                                   const Vocabulary& vocab, const ClassifierConfig& cfg,
                                   uint64_t seed);

// Copy of the trained embedding; the classifier itself stays untouched.
Tensor extract_embedding(const TrainedClassifier& classifier);

// extract_embedding plus the vocabulary-equality check required before the
// table can seed Pretrained/Encoder IPT.
Tensor pretrained_ipt_init(const TrainedClassifier& classifier, const Vocabulary& task_vocab);

void save_classifier(const TrainedClassifier& classifier, const std::string& path);
TrainedClassifier load_classifier(const std::string& path);

}  // namespace ipt
