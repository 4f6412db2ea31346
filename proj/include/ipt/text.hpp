#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace ipt {

// Wikipedia taxonomy categories used by the knowledge-pretraining pipeline.
inline const std::array<std::string, 13> kCategoryNames = {
    "General reference",
    "Culture and the arts",
    "Geography and places",
    "Health and fitness",
    "History and events",
    "Human activities",
    "Mathematics and logic",
    "Natural and physical sciences",
    "People and self",
    "Philosophy and thinking",
    "Religion and belief systems",
    "Society and social sciences",
    "Technology and applied sciences",
};

bool is_known_category(const std::string& name);

// Lowercased word tokenizer: alphanumeric runs are tokens, punctuation and
// whitespace separate, the literal "[MASK]" is kept as one token.
std::vector<std::string> tokenize(const std::string& text);

struct Vocabulary {
  static constexpr int64_t kPad = 0;
  static constexpr int64_t kUnk = 1;
  static constexpr int64_t kMask = 2;
  static constexpr int64_t kBos = 3;

  std::vector<std::string> id_to_token;  // specials occupy ids 0..3

  int64_t size() const { return static_cast<int64_t>(id_to_token.size()); }
  bool contains(const std::string& token) const;
  int64_t id(const std::string& token) const;  // kUnk for unknown tokens
  const std::string& token(int64_t id) const;

  std::vector<int64_t> encode(const std::string& text) const;
  std::string decode(const std::vector<int64_t>& ids) const;

  void rebuild_index();  // call after filling id_to_token

 private:
  std::unordered_map<std::string, int64_t> token_to_id_;
};

// Frequency-ordered vocabulary (ties lexicographic); tokens below min_count
// are dropped and encode as UNK.
Vocabulary build_vocab(const std::vector<std::string>& corpus, int64_t min_count);

void save_vocab(const Vocabulary& vocab, const std::string& path);
Vocabulary load_vocab(const std::string& path);

// ------------------------------ task specs ------------------------------

struct TaskSpec {
  std::string name;
  std::vector<std::string> field_names;
  std::string template_text;  // "{field}" placeholders plus exactly one [MASK]
  std::vector<std::string> labels;
  std::map<std::string, std::string> verbalizer;  // label -> vocabulary token
  int64_t max_len = 100;

  void validate() const;
  int64_t label_index(const std::string& label) const;  // throws for unknown labels
  // One token id per label, in label order; throws when a token is missing
  // from the vocabulary.
  std::vector<int64_t> verbalizer_token_ids(const Vocabulary& vocab) const;
};

TaskSpec load_task_spec(const std::string& path);
void save_task_spec(const TaskSpec& spec, const std::string& path);

struct RawExample {
  std::string id;
  std::map<std::string, std::string> fields;
  std::string label;
};

struct LabeledInstance {
  std::string id;
  std::vector<int64_t> token_ids;
  int64_t mask_position = -1;
  int64_t label_id = -1;
};

// Fills the template, tokenizes, truncates to max_len by trimming the tail of
// the longest field first. The [MASK] token always survives.
LabeledInstance verbalize_and_encode(const RawExample& raw, const TaskSpec& spec,
                                     const Vocabulary& vocab);

std::vector<LabeledInstance> verbalize_dataset(const std::vector<RawExample>& raws,
                                               const TaskSpec& spec, const Vocabulary& vocab);

// Vocabulary over the dataset texts plus the template literals and verbalizer
// tokens (so cloze scoring is always possible regardless of min_count).
Vocabulary build_task_vocab(const std::vector<RawExample>& raws, const TaskSpec& spec,
                            int64_t min_count);

// ------------------------------ splits ------------------------------

struct FewShotSplit {
  std::vector<size_t> train_idx;  // K per label
  std::vector<size_t> dev_idx;    // K per label, disjoint from train
  std::vector<size_t> pool_idx;   // remainder
};

// Draws 2K examples per label without replacement: first K -> train, second
// K -> dev. label_names (optional) improve error messages.
FewShotSplit sample_few_shot(const std::vector<LabeledInstance>& dataset, int64_t k,
                             uint64_t seed, const std::vector<std::string>& label_names = {});

// Label-stratified k-fold partition; val sizes differ by at most one.
std::vector<std::pair<std::vector<size_t>, std::vector<size_t>>> kfold_split(
    const std::vector<int64_t>& item_labels, int64_t folds, uint64_t seed);

// ------------------------------ synthetic data ------------------------------

struct CategoryExample {
  std::string text;
  std::string category;
};

struct SynthCategoryConfig {
  int64_t texts_per_category = 200;
  int64_t text_len = 12;             // background tokens per text
  int64_t markers_per_category = 3;  // distinct marker tokens per category
  int64_t background_vocab = 80;
  // Optional explicit marker sets (13 entries, pairwise disjoint).
  std::vector<std::vector<std::string>> custom_markers;
};

struct SynthCategoryCorpus {
  std::vector<CategoryExample> examples;
  std::vector<std::vector<std::string>> markers;  // per category
};

// Each text mixes shared background tokens with >=1 marker of its category,
// so the marker-lookup rule classifies the corpus perfectly.
SynthCategoryCorpus gen_synth_category_corpus(const SynthCategoryConfig& cfg, uint64_t seed);

struct SynthTaskConfig {
  int64_t n_classes = 2;
  int64_t n_triggers = 128;
  int64_t examples_per_class = 500;
  int64_t text_len = 9;  // background tokens around the trigger
  int64_t background_vocab = 60;
  // Trigger-free "... answer v_c" lines added to the pretraining corpus so a
  // backbone trained on it calibrates the verbalizer tokens at the cloze
  // slot (balanced across classes, so they carry no label signal).
  int64_t answer_context_lines = 120;
};

struct SynthTask {
  std::vector<RawExample> examples;
  TaskSpec spec;
  std::vector<std::string> triggers;      // trigger i belongs to class i % n_classes
  std::vector<std::string> corpus_texts;  // unlabeled texts (for MLM pretraining)
};

// Label is a pure function of which trigger token occurs; instances never mix
// triggers of different classes.
SynthTask gen_synth_task(const SynthTaskConfig& cfg, uint64_t seed);

// ------------------------------ file I/O ------------------------------

std::vector<RawExample> load_jsonl_dataset(const std::string& path, const TaskSpec& spec);
void save_jsonl_dataset(const std::vector<RawExample>& examples, const TaskSpec& spec,
                        const std::string& path);

std::vector<CategoryExample> load_category_jsonl(const std::string& path);
void save_category_jsonl(const std::vector<CategoryExample>& examples, const std::string& path);

}  // namespace ipt
