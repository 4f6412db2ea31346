#include "ipt/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "ipt/rng.hpp"

using nlohmann::json;

namespace ipt {

namespace {

const std::array<std::string, 4> kSpecialTokens = {"[PAD]", "[UNK]", "[MASK]", "[BOS]"};
const std::string kMaskLiteral = "[MASK]";

std::ifstream open_for_read(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  return in;
}

std::ofstream open_for_write(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  return out;
}

}  // namespace

bool is_known_category(const std::string& name) {
  return std::find(kCategoryNames.begin(), kCategoryNames.end(), name) != kCategoryNames.end();
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string current;
  size_t i = 0;
  while (i < text.size()) {
    if (text.compare(i, kMaskLiteral.size(), kMaskLiteral) == 0) {
      if (!current.empty()) {
        tokens.push_back(current);
        current.clear();
      }
      tokens.push_back(kMaskLiteral);
      i += kMaskLiteral.size();
      continue;
    }
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      tokens.push_back(current);
      current.clear();
    }
    ++i;
  }
  if (!current.empty()) tokens.push_back(current);
  return tokens;
}

// ------------------------------ Vocabulary ------------------------------

void Vocabulary::rebuild_index() {
  token_to_id_.clear();
  for (size_t i = 0; i < id_to_token.size(); ++i) token_to_id_[id_to_token[i]] = static_cast<int64_t>(i);
}

bool Vocabulary::contains(const std::string& token) const {
  return token_to_id_.find(token) != token_to_id_.end();
}

int64_t Vocabulary::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int64_t id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("vocabulary: id out of range");
  return id_to_token[static_cast<size_t>(id)];
}

std::vector<int64_t> Vocabulary::encode(const std::string& text) const {
  std::vector<int64_t> ids;
  for (const std::string& tok : tokenize(text)) {
    ids.push_back(tok == kMaskLiteral ? kMask : id(tok));
  }
  return ids;
}

std::string Vocabulary::decode(const std::vector<int64_t>& ids) const {
  std::string out;
  for (int64_t id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += token(id);
  }
  return out;
}

Vocabulary build_vocab(const std::vector<std::string>& corpus, int64_t min_count) {
  if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  std::map<std::string, int64_t> counts;
  for (const std::string& text : corpus) {
    for (const std::string& tok : tokenize(text)) {
      if (tok != kMaskLiteral) ++counts[tok];
    }
  }
  std::vector<std::pair<std::string, int64_t>> kept;
  for (const auto& [tok, n] : counts) {
    if (n >= min_count) kept.emplace_back(tok, n);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (kept.empty()) {
    throw std::invalid_argument("build_vocab: no token reaches min_count " + std::to_string(min_count));
  }
  Vocabulary vocab;
  vocab.id_to_token.assign(kSpecialTokens.begin(), kSpecialTokens.end());
  for (const auto& [tok, n] : kept) {
    (void)n;
    vocab.id_to_token.push_back(tok);
  }
  vocab.rebuild_index();
  return vocab;
}

void save_vocab(const Vocabulary& vocab, const std::string& path) {
  json j;
  j["tokens"] = std::vector<std::string>(vocab.id_to_token.begin() + 4, vocab.id_to_token.end());
  open_for_write(path) << j.dump(2) << "\n";
}

Vocabulary load_vocab(const std::string& path) {
  auto in = open_for_read(path);
  json j = json::parse(in);
  Vocabulary vocab;
  vocab.id_to_token.assign(kSpecialTokens.begin(), kSpecialTokens.end());
  for (const auto& tok : j.at("tokens")) vocab.id_to_token.push_back(tok.get<std::string>());
  vocab.rebuild_index();
  return vocab;
}

// ------------------------------ task specs ------------------------------

void TaskSpec::validate() const {
  if (name.empty()) throw std::invalid_argument("task spec: missing name");
  if (labels.empty()) throw std::invalid_argument("task spec: no labels");
  size_t masks = 0;
  for (size_t pos = 0; (pos = template_text.find(kMaskLiteral, pos)) != std::string::npos;
       pos += kMaskLiteral.size()) {
    ++masks;
  }
  if (masks != 1) throw std::invalid_argument("task spec: template must contain exactly one [MASK]");
  for (const std::string& label : labels) {
    auto it = verbalizer.find(label);
    if (it == verbalizer.end()) throw std::invalid_argument("task spec: label '" + label + "' missing from verbalizer");
    if (tokenize(it->second).size() != 1) {
      throw std::invalid_argument("task spec: verbalizer entry for '" + label + "' must be a single token");
    }
  }
  if (max_len < 1) throw std::invalid_argument("task spec: max_len must be positive");
}

int64_t TaskSpec::label_index(const std::string& label) const {
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == label) return static_cast<int64_t>(i);
  }
  throw std::invalid_argument("task spec '" + name + "': unknown label '" + label + "'");
}

std::vector<int64_t> TaskSpec::verbalizer_token_ids(const Vocabulary& vocab) const {
  std::vector<int64_t> ids;
  for (const std::string& label : labels) {
    const std::string tok = tokenize(verbalizer.at(label))[0];
    if (!vocab.contains(tok)) {
      throw std::runtime_error("verbalizer token '" + tok + "' for label '" + label + "' is not in the vocabulary");
    }
    ids.push_back(vocab.id(tok));
  }
  return ids;
}

TaskSpec load_task_spec(const std::string& path) {
  auto in = open_for_read(path);
  json j = json::parse(in);
  TaskSpec spec;
  spec.name = j.at("name").get<std::string>();
  spec.field_names = j.at("fields").get<std::vector<std::string>>();
  spec.template_text = j.at("template").get<std::string>();
  spec.labels = j.at("labels").get<std::vector<std::string>>();
  for (const auto& [label, tok] : j.at("verbalizer").items()) spec.verbalizer[label] = tok.get<std::string>();
  spec.max_len = j.value("max_len", int64_t{100});
  spec.validate();
  return spec;
}

void save_task_spec(const TaskSpec& spec, const std::string& path) {
  json j;
  j["name"] = spec.name;
  j["fields"] = spec.field_names;
  j["template"] = spec.template_text;
  j["labels"] = spec.labels;
  j["verbalizer"] = spec.verbalizer;
  j["max_len"] = spec.max_len;
  open_for_write(path) << j.dump(2) << "\n";
}

// ------------------------------ verbalization ------------------------------

namespace {

struct Segment {
  bool is_field = false;
  std::string text;  // literal text or field name
};

std::vector<Segment> parse_template(const std::string& tmpl) {
  std::vector<Segment> segments;
  std::string literal;
  size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const size_t close = tmpl.find('}', i);
      if (close == std::string::npos) throw std::invalid_argument("template: unterminated placeholder");
      if (!literal.empty()) {
        segments.push_back({false, literal});
        literal.clear();
      }
      segments.push_back({true, tmpl.substr(i + 1, close - i - 1)});
      i = close + 1;
    } else {
      literal.push_back(tmpl[i]);
      ++i;
    }
  }
  if (!literal.empty()) segments.push_back({false, literal});
  return segments;
}

}  // namespace

LabeledInstance verbalize_and_encode(const RawExample& raw, const TaskSpec& spec,
                                     const Vocabulary& vocab) {
  spec.validate();
  const std::vector<Segment> segments = parse_template(spec.template_text);

  // tokenize literals and fields separately so truncation can target fields
  std::vector<std::vector<std::string>> seg_tokens(segments.size());
  int64_t total = 0;
  std::vector<size_t> field_segments;
  for (size_t s = 0; s < segments.size(); ++s) {
    if (segments[s].is_field) {
      auto it = raw.fields.find(segments[s].text);
      if (it == raw.fields.end()) {
        throw std::invalid_argument("instance '" + raw.id + "': missing field '" + segments[s].text + "'");
      }
      seg_tokens[s] = tokenize(it->second);
      field_segments.push_back(s);
    } else {
      seg_tokens[s] = tokenize(segments[s].text);
    }
    total += static_cast<int64_t>(seg_tokens[s].size());
  }

  // trim the tail of the longest field until the instance fits
  while (total > spec.max_len) {
    size_t longest = 0;
    size_t longest_len = 0;
    bool found = false;
    for (size_t s : field_segments) {
      if (!seg_tokens[s].empty() && seg_tokens[s].size() >= longest_len) {
        longest = s;
        longest_len = seg_tokens[s].size();
        found = true;
      }
    }
    if (!found) {
      throw std::runtime_error("instance '" + raw.id + "': template tokens alone exceed max_len " +
                               std::to_string(spec.max_len) + " ([MASK] would be lost)");
    }
    const int64_t drop = std::min<int64_t>(total - spec.max_len, static_cast<int64_t>(longest_len));
    seg_tokens[longest].resize(longest_len - static_cast<size_t>(drop));
    total -= drop;
  }

  LabeledInstance inst;
  inst.id = raw.id;
  for (const auto& toks : seg_tokens) {
    for (const std::string& tok : toks) {
      if (tok == kMaskLiteral) {
        inst.mask_position = static_cast<int64_t>(inst.token_ids.size());
        inst.token_ids.push_back(Vocabulary::kMask);
      } else {
        inst.token_ids.push_back(vocab.id(tok));
      }
    }
  }
  if (inst.mask_position < 0) throw std::runtime_error("instance '" + raw.id + "': [MASK] lost by truncation");
  inst.label_id = spec.label_index(raw.label);
  return inst;
}

std::vector<LabeledInstance> verbalize_dataset(const std::vector<RawExample>& raws,
                                               const TaskSpec& spec, const Vocabulary& vocab) {
  std::vector<LabeledInstance> out;
  out.reserve(raws.size());
  for (const RawExample& raw : raws) out.push_back(verbalize_and_encode(raw, spec, vocab));
  return out;
}

Vocabulary build_task_vocab(const std::vector<RawExample>& raws, const TaskSpec& spec,
                            int64_t min_count) {
  std::vector<std::string> corpus;
  corpus.reserve(raws.size() + 1);
  for (const RawExample& raw : raws) {
    std::string joined;
    for (const auto& [name, value] : raw.fields) {
      (void)name;
      joined += value;
      joined.push_back(' ');
    }
    corpus.push_back(joined);
  }
  // template literals and verbalizer tokens must always be encodable
  std::string extra = spec.template_text;
  for (const auto& [label, tok] : spec.verbalizer) {
    (void)label;
    extra.push_back(' ');
    extra += tok;
  }
  for (int64_t i = 0; i < std::max<int64_t>(min_count, 1); ++i) corpus.push_back(extra);
  return build_vocab(corpus, min_count);
}

// ------------------------------ splits ------------------------------

FewShotSplit sample_few_shot(const std::vector<LabeledInstance>& dataset, int64_t k,
                             uint64_t seed, const std::vector<std::string>& label_names) {
  if (k < 1) throw std::invalid_argument("sample_few_shot: K must be positive");
  std::map<int64_t, std::vector<size_t>> by_label;
  for (size_t i = 0; i < dataset.size(); ++i) by_label[dataset[i].label_id].push_back(i);

  FewShotSplit split;
  Rng rng(seed);
  for (auto& [label, idx] : by_label) {
    if (static_cast<int64_t>(idx.size()) < 2 * k) {
      const std::string name = (label >= 0 && static_cast<size_t>(label) < label_names.size())
                                   ? "'" + label_names[static_cast<size_t>(label)] + "'"
                                   : "#" + std::to_string(label);
      throw std::runtime_error("sample_few_shot: label " + name + " has " + std::to_string(idx.size()) +
                               " examples, needs " + std::to_string(2 * k));
    }
    rng.shuffle(idx);
    for (int64_t i = 0; i < k; ++i) split.train_idx.push_back(idx[static_cast<size_t>(i)]);
    for (int64_t i = k; i < 2 * k; ++i) split.dev_idx.push_back(idx[static_cast<size_t>(i)]);
    for (size_t i = static_cast<size_t>(2 * k); i < idx.size(); ++i) split.pool_idx.push_back(idx[i]);
  }
  return split;
}

std::vector<std::pair<std::vector<size_t>, std::vector<size_t>>> kfold_split(
    const std::vector<int64_t>& item_labels, int64_t folds, uint64_t seed) {
  if (folds < 2) throw std::invalid_argument("kfold_split: folds must be >= 2");
  if (static_cast<int64_t>(item_labels.size()) < folds) {
    throw std::invalid_argument("kfold_split: fewer items than folds");
  }
  std::map<int64_t, std::vector<size_t>> by_label;
  for (size_t i = 0; i < item_labels.size(); ++i) by_label[item_labels[i]].push_back(i);

  Rng rng(seed);
  std::vector<std::vector<size_t>> fold_members(static_cast<size_t>(folds));
  // rotate the fold receiving each label's remainder so overall val fold
  // sizes differ by at most one
  int64_t next_fold = 0;
  for (auto& [label, idx] : by_label) {
    (void)label;
    rng.shuffle(idx);
    for (size_t i = 0; i < idx.size(); ++i) {
      fold_members[static_cast<size_t>((next_fold + static_cast<int64_t>(i)) % folds)].push_back(idx[i]);
    }
    next_fold = (next_fold + static_cast<int64_t>(idx.size())) % folds;
  }

  std::vector<std::pair<std::vector<size_t>, std::vector<size_t>>> out;
  for (int64_t f = 0; f < folds; ++f) {
    std::pair<std::vector<size_t>, std::vector<size_t>> entry;
    for (int64_t g = 0; g < folds; ++g) {
      auto& dst = (g == f) ? entry.second : entry.first;
      dst.insert(dst.end(), fold_members[static_cast<size_t>(g)].begin(),
                 fold_members[static_cast<size_t>(g)].end());
    }
    std::sort(entry.first.begin(), entry.first.end());
    std::sort(entry.second.begin(), entry.second.end());
    out.push_back(std::move(entry));
  }
  return out;
}

// ------------------------------ synthetic data ------------------------------

namespace {

std::string background_token(int64_t i) { return "w" + std::to_string(i); }

// skewed background distribution (quadratic bias toward low indices)
int64_t sample_background(Rng& rng, int64_t vocab) {
  const double u = rng.uniform();
  return static_cast<int64_t>(u * u * static_cast<double>(vocab)) % vocab;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string text;
  for (const std::string& tok : tokens) {
    if (!text.empty()) text.push_back(' ');
    text += tok;
  }
  return text;
}

}  // namespace

SynthCategoryCorpus gen_synth_category_corpus(const SynthCategoryConfig& cfg, uint64_t seed) {
  if (cfg.texts_per_category < 1 || cfg.text_len < 1 || cfg.markers_per_category < 1 ||
      cfg.background_vocab < 2) {
    throw std::invalid_argument("gen_synth_category_corpus: invalid sizes");
  }
  const size_t n_cat = kCategoryNames.size();

  std::vector<std::vector<std::string>> markers;
  if (!cfg.custom_markers.empty()) {
    if (cfg.custom_markers.size() != n_cat) {
      throw std::invalid_argument("gen_synth_category_corpus: need one marker set per category");
    }
    std::map<std::string, size_t> seen;
    for (size_t c = 0; c < n_cat; ++c) {
      if (cfg.custom_markers[c].empty()) {
        throw std::invalid_argument("gen_synth_category_corpus: empty marker set");
      }
      for (const std::string& m : cfg.custom_markers[c]) {
        auto [it, inserted] = seen.emplace(m, c);
        (void)it;
        if (!inserted) {
          throw std::invalid_argument("gen_synth_category_corpus: overlapping marker sets (token '" + m + "')");
        }
      }
    }
    markers = cfg.custom_markers;
  } else {
    markers.resize(n_cat);
    for (size_t c = 0; c < n_cat; ++c) {
      for (int64_t m = 0; m < cfg.markers_per_category; ++m) {
        markers[c].push_back("mk" + std::to_string(c) + "x" + std::to_string(m));
      }
    }
  }

  SynthCategoryCorpus corpus;
  corpus.markers = markers;
  Rng rng(seed);
  for (size_t c = 0; c < n_cat; ++c) {
    for (int64_t t = 0; t < cfg.texts_per_category; ++t) {
      std::vector<std::string> tokens;
      for (int64_t i = 0; i < cfg.text_len; ++i) {
        tokens.push_back(background_token(sample_background(rng, cfg.background_vocab)));
      }
      const int64_t n_markers = 1 + static_cast<int64_t>(rng.below(2));
      for (int64_t m = 0; m < n_markers; ++m) {
        const std::string& marker = markers[c][rng.below(markers[c].size())];
        tokens.insert(tokens.begin() + static_cast<int64_t>(rng.below(tokens.size() + 1)), marker);
      }
      corpus.examples.push_back({join_tokens(tokens), kCategoryNames[c]});
    }
  }
  return corpus;
}

SynthTask gen_synth_task(const SynthTaskConfig& cfg, uint64_t seed) {
  if (cfg.n_classes < 2) throw std::invalid_argument("gen_synth_task: need at least 2 classes");
  if (cfg.n_triggers < cfg.n_classes) {
    throw std::invalid_argument("gen_synth_task: need at least one trigger per class");
  }
  if (cfg.examples_per_class < 1 || cfg.text_len < 1 || cfg.background_vocab < 2) {
    throw std::invalid_argument("gen_synth_task: invalid sizes");
  }

  SynthTask task;
  for (int64_t t = 0; t < cfg.n_triggers; ++t) task.triggers.push_back("trig" + std::to_string(t));

  task.spec.name = "synth-trigger";
  task.spec.field_names = {"text"};
  task.spec.template_text = "{text} answer [MASK]";
  for (int64_t c = 0; c < cfg.n_classes; ++c) {
    const std::string label = "class" + std::to_string(c);
    task.spec.labels.push_back(label);
    task.spec.verbalizer[label] = "v" + std::to_string(c);
  }
  task.spec.max_len = cfg.text_len + 3;

  Rng rng(seed);
  int64_t id_counter = 0;
  for (int64_t c = 0; c < cfg.n_classes; ++c) {
    // triggers of class c are those with index = c (mod n_classes)
    std::vector<std::string> class_triggers;
    for (int64_t t = c; t < cfg.n_triggers; t += cfg.n_classes) {
      class_triggers.push_back(task.triggers[static_cast<size_t>(t)]);
    }
    for (int64_t e = 0; e < cfg.examples_per_class; ++e) {
      std::vector<std::string> tokens;
      for (int64_t i = 0; i < cfg.text_len; ++i) {
        tokens.push_back(background_token(sample_background(rng, cfg.background_vocab)));
      }
      const std::string& trigger = class_triggers[rng.below(class_triggers.size())];
      tokens.insert(tokens.begin() + static_cast<int64_t>(rng.below(tokens.size() + 1)), trigger);
      RawExample ex;
      ex.id = "synth-" + std::to_string(id_counter++);
      ex.fields["text"] = join_tokens(tokens);
      ex.label = task.spec.labels[static_cast<size_t>(c)];
      task.examples.push_back(ex);
      task.corpus_texts.push_back(ex.fields["text"]);
    }
  }
  // balanced, trigger-free answer contexts: the backbone learns that a
  // verbalizer token follows "answer" without any trigger association
  for (int64_t i = 0; i < cfg.answer_context_lines; ++i) {
    std::vector<std::string> tokens;
    const int64_t len = 3 + static_cast<int64_t>(rng.below(4));
    for (int64_t j = 0; j < len; ++j) {
      tokens.push_back(background_token(sample_background(rng, cfg.background_vocab)));
    }
    tokens.push_back("answer");
    tokens.push_back(task.spec.verbalizer.at(task.spec.labels[static_cast<size_t>(i % cfg.n_classes)]));
    task.corpus_texts.push_back(join_tokens(tokens));
  }
  return task;
}

// ------------------------------ file I/O ------------------------------

std::vector<RawExample> load_jsonl_dataset(const std::string& path, const TaskSpec& spec) {
  std::ifstream in = open_for_read(path);
  std::vector<RawExample> out;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j = json::parse(line);
    RawExample ex;
    ex.id = j.contains("id") ? j.at("id").get<std::string>() : path + ":" + std::to_string(line_no);
    for (const std::string& field : spec.field_names) {
      if (!j.contains(field)) {
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": missing field '" + field + "'");
      }
      const auto& v = j.at(field);
      ex.fields[field] = v.is_string() ? v.get<std::string>() : v.dump();
    }
    const auto& lv = j.at("label");
    ex.label = lv.is_string() ? lv.get<std::string>() : lv.dump();
    out.push_back(std::move(ex));
  }
  return out;
}

void save_jsonl_dataset(const std::vector<RawExample>& examples, const TaskSpec& spec,
                        const std::string& path) {
  std::ofstream out = open_for_write(path);
  for (const RawExample& ex : examples) {
    json j;
    j["id"] = ex.id;
    for (const std::string& field : spec.field_names) j[field] = ex.fields.at(field);
    j["label"] = ex.label;
    out << j.dump() << "\n";
  }
}

std::vector<CategoryExample> load_category_jsonl(const std::string& path) {
  std::ifstream in = open_for_read(path);
  std::vector<CategoryExample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j = json::parse(line);
    out.push_back({j.at("text").get<std::string>(), j.value("category", std::string{})});
  }
  return out;
}

void save_category_jsonl(const std::vector<CategoryExample>& examples, const std::string& path) {
  std::ofstream out = open_for_write(path);
  for (const CategoryExample& ex : examples) {
    json j;
    j["text"] = ex.text;
    j["category"] = ex.category;
    out << j.dump() << "\n";
  }
}

}  // namespace ipt
