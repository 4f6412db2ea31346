// Acceptance suite: one test case per criterion, each printing a PASS/FAIL
// line with its headline numbers. Shared fixtures are built once.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "ipt/analysis.hpp"
#include "ipt/harness.hpp"
#include "ipt/knowledge.hpp"
#include "ipt/optim.hpp"
#include "test_util.hpp"

using namespace ipt;
using ipt::testutil::fd_vs_analytic;
using ipt::testutil::max_abs_diff;

namespace fs = std::filesystem;

namespace {

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

void report(int criterion, bool pass, const std::string& detail) {
  std::printf("criterion %2d: %s  [%s]\n", criterion, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(prec);
  out << v;
  return out.str();
}

// ---------- toy bundle: 2-layer backbone, tiny task (criteria 1, 2) ----------

struct ToyBundle {
  SynthTask task = gen_synth_task(task_cfg(), 13);
  Vocabulary vocab = build_task_vocab(task.examples, task.spec, 1);
  TransformerConfig cfg = backbone_cfg(vocab.size());
  Transformer backbone{cfg, 17};
  std::vector<LabeledInstance> instances = verbalize_dataset(task.examples, task.spec, vocab);
  std::vector<int64_t> verbalizer = task.spec.verbalizer_token_ids(vocab);

  static SynthTaskConfig task_cfg() {
    SynthTaskConfig tc;
    tc.n_triggers = 12;
    tc.examples_per_class = 30;
    tc.text_len = 5;
    tc.background_vocab = 24;
    tc.answer_context_lines = 10;
    return tc;
  }
  static TransformerConfig backbone_cfg(int64_t vocab_size) {
    TransformerConfig cfg;
    cfg.vocab_size = vocab_size;
    cfg.d_model = 16;
    cfg.n_layers = 2;  // the 2-layer toy config of the gradient suite
    cfg.n_heads = 2;
    cfg.ff_dim = 32;
    cfg.max_context = 64;
    return cfg;
  }
};

ToyBundle& toy() {
  static ToyBundle b;
  return b;
}

// ---------- category bundle: corpus + trained classifier (criteria 5, 6) ----------

struct CategoryBundle {
  SynthCategoryCorpus corpus = gen_synth_category_corpus(corpus_cfg(), 29);
  Vocabulary vocab = make_vocab(corpus);
  ClassifierConfig cls_cfg = classifier_cfg();
  TrainedClassifier trained = train_classifier(corpus.examples, vocab, cls_cfg, 5);

  static SynthCategoryConfig corpus_cfg() {
    SynthCategoryConfig cfg;
    cfg.texts_per_category = 200;
    cfg.text_len = 12;
    cfg.markers_per_category = 3;
    cfg.background_vocab = 80;
    return cfg;
  }
  static ClassifierConfig classifier_cfg() {
    ClassifierConfig cfg;
    cfg.embed_dim = 64;
    cfg.channels = 32;
    cfg.epochs = 8;
    cfg.lr = 2e-3;
    return cfg;
  }
  static Vocabulary make_vocab(const SynthCategoryCorpus& corpus) {
    std::vector<std::string> texts;
    for (const auto& ex : corpus.examples) texts.push_back(ex.text);
    return build_vocab(texts, 1);
  }
};

CategoryBundle& category() {
  static CategoryBundle b;
  return b;
}

// ---------- desk bundle: 128-trigger task + MLM backbone (criteria 7, 8) ----------

struct DeskBundle {
  SynthTask task;
  Vocabulary vocab;
  Transformer backbone;
  std::vector<LabeledInstance> instances;
  std::vector<int64_t> verbalizer;
  Dataset data;  // fixed stratified split: 256 train / 64 dev / 340 test

  DeskBundle()
      : task(gen_synth_task(task_cfg(), 42)),
        vocab(build_task_vocab(task.examples, task.spec, 1)),
        backbone(backbone_cfg(vocab.size()), 7) {
    std::vector<std::vector<int64_t>> corpus;
    for (const auto& text : task.corpus_texts) corpus.push_back(vocab.encode(text));
    MlmConfig mlm;
    mlm.steps = 2500;
    mlm.batch_size = 16;
    mlm.lr = 2e-3;
    mlm.warmup_steps = 50;
    mlm.seed = 3;
    mlm_pretrain(backbone, corpus, mlm);

    instances = verbalize_dataset(task.examples, task.spec, vocab);
    verbalizer = task.spec.verbalizer_token_ids(vocab);
    Rng rng(99);
    std::map<int64_t, std::vector<size_t>> by_label;
    for (size_t i = 0; i < instances.size(); ++i) by_label[instances[i].label_id].push_back(i);
    for (auto& [label, idx] : by_label) {
      (void)label;
      rng.shuffle(idx);
      for (size_t i = 0; i < idx.size(); ++i) {
        if (i < 128) {
          data.train.push_back(instances[idx[i]]);
        } else if (i < 160) {
          data.dev.push_back(instances[idx[i]]);
        } else if (i < 330) {
          data.test.push_back(instances[idx[i]]);
        }
      }
    }
  }

  static SynthTaskConfig task_cfg() {
    SynthTaskConfig tc;
    tc.n_triggers = 128;
    tc.examples_per_class = 500;
    tc.text_len = 9;
    tc.background_vocab = 60;
    tc.answer_context_lines = 400;
    return tc;
  }
  static TransformerConfig backbone_cfg(int64_t vocab_size) {
    TransformerConfig cfg;
    cfg.vocab_size = vocab_size;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.ff_dim = 64;
    cfg.max_context = 160;  // fits prompt length 120 plus the longest instance
    return cfg;
  }
};

DeskBundle& desk() {
  static DeskBundle b;
  return b;
}

std::vector<std::vector<double>> snapshot_values(const std::vector<Parameter>& params) {
  std::vector<std::vector<double>> out;
  for (const Parameter& p : params) out.push_back(p.tensor.values());
  return out;
}

double max_param_delta(const std::vector<std::vector<double>>& before,
                       const std::vector<Parameter>& params) {
  double worst = 0.0;
  for (size_t i = 0; i < params.size(); ++i) {
    worst = std::max(worst, max_abs_diff(before[i], params[i].tensor.values()));
  }
  return worst;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(IPT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

// ===================== criterion 1: gradient suite =====================

TEST_CASE("criterion 1") {
  Timer timer;
  double worst = 0.0;
  std::string worst_name = "-";
  auto track = [&](const std::string& name, double err) {
    INFO(name);
    CHECK(err < 1e-4);
    if (err > worst) {
      worst = err;
      worst_name = name;
    }
  };

  // every registered op
  {
    Rng rng(23);
    auto probe = [](const Tensor& out, const Tensor& w) { return sum(mul(out, w)); };
    auto w = [](Shape s, uint64_t seed) {
      Rng r(seed);
      return Tensor::randn(std::move(s), r, 1.0);
    };
    Tensor a = Tensor::randn({3, 4}, rng, 1.0);
    Tensor b = Tensor::randn({3, 4}, rng, 1.0);
    Tensor ws = w({3, 4}, 101);
    track("op.add", finite_diff_check([&](const Tensor& p) { return probe(add(p, b), ws); }, a));
    track("op.mul", finite_diff_check([&](const Tensor& p) { return probe(mul(p, b), ws); }, a));
    Tensor m2 = Tensor::randn({4, 2}, rng, 1.0);
    track("op.matmul", finite_diff_check([&](const Tensor& p) { return probe(matmul(p, m2), w({3, 2}, 102)); }, a));
    Tensor table = Tensor::randn({6, 3}, rng, 1.0);
    track("op.gather_rows", finite_diff_check([&](const Tensor& p) { return probe(gather_rows(p, {2, 4, 2, 0}), w({4, 3}, 103)); }, table));
    Tensor gain = Tensor::randn({1, 4}, rng, 0.5);
    Tensor bias = Tensor::randn({1, 4}, rng, 0.5);
    track("op.layer_norm", finite_diff_check([&](const Tensor& p) { return probe(layer_norm(p, gain, bias), ws); }, a));
    Tensor act({2, 3}, {0.7, -1.3, 2.1, -0.4, 1.9, -2.6});
    Tensor wact = w({2, 3}, 104);
    track("op.gelu", finite_diff_check([&](const Tensor& p) { return probe(gelu(p), wact); }, act));
    track("op.relu", finite_diff_check([&](const Tensor& p) { return probe(relu(p), wact); }, act));
    Tensor cx = Tensor::randn({7, 3}, rng, 1.0);
    Tensor cw = Tensor::randn({2, 3, 3}, rng, 0.8);
    Tensor cb = Tensor::randn({1, 2}, rng, 0.5);
    track("op.conv1d", finite_diff_check([&](const Tensor& p) { return probe(conv1d(cx, p, cb, 1), w({7, 2}, 105)); }, cw));
    track("op.maxpool1d", finite_diff_check([&](const Tensor& p) { return probe(maxpool1d(p, 2, 2), w({4, 3}, 106)); }, cx));
    track("op.adaptive_maxpool1d", finite_diff_check([&](const Tensor& p) { return probe(adaptive_maxpool1d(p, 4), w({4, 3}, 107)); }, cx));
    track("op.softmax", finite_diff_check([&](const Tensor& p) { return probe(softmax(p), ws); }, a));
    track("op.log_softmax", finite_diff_check([&](const Tensor& p) { return probe(log_softmax(p), ws); }, a));
    track("op.cross_entropy", finite_diff_check([&](const Tensor& p) { return cross_entropy(p, {1, 0, 3}); }, a));
    // lstm cell through all of its weights
    Tensor lx = Tensor::randn({1, 3}, rng, 1.0);
    Tensor lh = Tensor::randn({1, 2}, rng, 0.5);
    Tensor lc = Tensor::randn({1, 2}, rng, 0.5);
    Tensor whh = Tensor::randn({2, 8}, rng, 0.6);
    Tensor lb = Tensor::randn({1, 8}, rng, 0.4);
    Tensor wih = Tensor::randn({3, 8}, rng, 0.6);
    auto lstm_loss = [&](const Tensor& p) {
      LstmState s = lstm_cell(lx, {lh, lc}, p, whh, lb);
      return add(probe(s.h, w({1, 2}, 108)), probe(s.c, w({1, 2}, 109)));
    };
    track("op.lstm_cell", finite_diff_check(lstm_loss, wih));
  }

  // end-to-end prompted-backbone losses for the five strategies
  {
    ToyBundle& t = toy();
    const LabeledInstance& i1 = t.instances[0];
    const LabeledInstance& i2 = t.instances[t.instances.size() / 2];
    auto e2e = [&](const PromptStrategy& s) {
      return [&] {
        Tensor l1 = cross_entropy(
            t.backbone.classify_logits(make_prompted_input(s, i1), t.verbalizer), {i1.label_id});
        Tensor l2 = cross_entropy(
            t.backbone.classify_logits(make_prompted_input(s, i2), t.verbalizer), {i2.label_id});
        return add(l1, l2);
      };
    };
    auto param_of = [](const PromptStrategy& s, const std::string& suffix) {
      for (const Parameter& p : s.parameters()) {
        if (p.name.size() >= suffix.size() &&
            p.name.compare(p.name.size() - suffix.size(), suffix.size(), suffix) == 0) {
          return p.tensor;
        }
      }
      throw std::runtime_error("missing " + suffix);
    };

    TaskPromptStrategy task_prompt(4, 16, 3);
    track("e2e.task-prompt", fd_vs_analytic(e2e(task_prompt), param_of(task_prompt, "matrix")));

    PrefixTuningStrategy prefix(4, 16, 2, 5);
    // base is the deepest parameter: its gradient crosses the whole reparam
    // MLP and the backbone (mlp.w1 coordinates sit at the fd noise floor)
    track("e2e.prefix.base", fd_vs_analytic(e2e(prefix), param_of(prefix, "base")));
    track("e2e.prefix.mlp", fd_vs_analytic(e2e(prefix), param_of(prefix, "mlp.b1")));

    TableIptStrategy random_ipt("random-ipt", t.vocab.size(), 16, 16, 4, 7);
    track("e2e.random-ipt", fd_vs_analytic(e2e(random_ipt), param_of(random_ipt, "table")));

    Rng rng(31);
    Tensor pretrained_table = Tensor::randn({t.vocab.size(), 16}, rng, 0.1);
    TableIptStrategy pretrained("pretrained-ipt", pretrained_table, 16, 4, 9);
    track("e2e.pretrained-ipt", fd_vs_analytic(e2e(pretrained), param_of(pretrained, "table")));

    Tensor frozen_table = Tensor::randn({t.vocab.size(), 16}, rng, 0.1);
    for (EncoderVariant v : {EncoderVariant::kCnn, EncoderVariant::kRnn, EncoderVariant::kMlp}) {
      EncoderIptStrategy enc(frozen_table, v, 0.5, 4, 16, 4, 11);
      const std::string probe_name = v == EncoderVariant::kCnn ? "head.w" : "lin1.w";
      track("e2e.encoder-" + to_string(v), fd_vs_analytic(e2e(enc), param_of(enc, probe_name)));
    }

    PrefixIptStrategy composed(
        std::make_unique<TableIptStrategy>("random-ipt", t.vocab.size(), 16, 16, 4, 13), 2, 16);
    track("e2e.prefix+ipt.proj", fd_vs_analytic(e2e(composed), param_of(composed, "proj0.w")));
    track("e2e.prefix+ipt.table", fd_vs_analytic(e2e(composed), param_of(composed, "table")));
  }

  const double elapsed = timer.seconds();
  const bool pass = worst < 1e-4 && elapsed < 120.0;
  report(1, pass, "max fd error " + fmt(worst, 8) + " (" + worst_name + "), " + fmt(elapsed, 1) + "s < 120s");
  CHECK(elapsed < 120.0);
}

// ===================== criterion 2: frozen-backbone invariance =====================

TEST_CASE("criterion 2") {
  Timer timer;
  ToyBundle& t = toy();
  Dataset data;
  for (size_t i = 0; i < 20; ++i) data.train.push_back(t.instances[i * 3 % t.instances.size()]);

  TrainConfig cfg;
  cfg.batch_size = 2;  // 10 optimizer steps per epoch x 20 epochs = 200 steps
  cfg.grad_accum_steps = 1;
  cfg.lr = 5e-2;
  cfg.warmup_steps = 20;
  cfg.max_epochs = 20;
  cfg.early_stop_patience = 100;
  cfg.seed = 3;

  Rng rng(41);
  Tensor shared_table = Tensor::randn({t.vocab.size(), 16}, rng, 0.1);
  std::vector<std::unique_ptr<PromptStrategy>> strategies;
  strategies.push_back(std::make_unique<TaskPromptStrategy>(4, 16, 1));
  strategies.push_back(std::make_unique<PrefixTuningStrategy>(4, 16, 2, 2));
  strategies.push_back(std::make_unique<TableIptStrategy>("random-ipt", t.vocab.size(), 16, 16, 4, 3));
  strategies.push_back(std::make_unique<TableIptStrategy>("pretrained-ipt", shared_table, 16, 4, 4));
  strategies.push_back(std::make_unique<EncoderIptStrategy>(shared_table, EncoderVariant::kCnn, 0.5, 4, 16, 4, 5));

  double worst = 0.0;
  int64_t total_steps = 0;
  for (auto& strategy : strategies) {
    const auto before = snapshot_values(t.backbone.parameters());
    RunResult run = train_downstream(t.backbone, *strategy, data, t.verbalizer, cfg);
    total_steps += static_cast<int64_t>(run.epochs.size()) * 10;
    worst = std::max(worst, max_param_delta(before, t.backbone.parameters()));
  }
  const bool pass = worst == 0.0 && total_steps == 5 * 200;
  report(2, pass, "5 strategies x 200 steps, backbone max |delta| = " + fmt(worst, 12) +
                      ", " + fmt(timer.seconds(), 1) + "s");
  CHECK(worst == 0.0);
  CHECK(total_steps == 1000);
}

// ===================== criterion 3: flop parity =====================

TEST_CASE("criterion 3") {
  TransformerConfig desk_cfg;  // default desk configuration
  TaskPromptStrategy task_prompt(20, desk_cfg.d_model, 1);
  TableIptStrategy random_ipt("random-ipt", desk_cfg.vocab_size, desk_cfg.d_model,
                              desk_cfg.d_model, 20, 2);
  bool pass = true;
  int64_t shown = 0;
  for (int64_t n : {10, 50, 100}) {
    const int64_t f_random = prompted_flop_count(desk_cfg, random_ipt, n);
    const int64_t f_task = prompted_flop_count(desk_cfg, task_prompt, n);
    pass = pass && (f_random == f_task);
    CHECK(f_random == f_task);
    if (n == 50) shown = f_random;
  }
  report(3, pass, "flops(random-ipt, L=20) == flops(task-prompt, L=20), e.g. n=50: " +
                      std::to_string(shown));
}

// ===================== criterion 4: parameter accounting =====================

TEST_CASE("criterion 4") {
  Timer timer;
  TransformerConfig desk_cfg;  // default desk configuration (|V|=2000, d=64, 4 layers)
  Transformer backbone(desk_cfg, 1);
  Vocabulary vocab;
  vocab.id_to_token.assign(4, "");
  vocab.id_to_token = {"[PAD]", "[UNK]", "[MASK]", "[BOS]"};
  for (int64_t i = 4; i < desk_cfg.vocab_size; ++i) vocab.id_to_token.push_back("w" + std::to_string(i));
  vocab.rebuild_index();

  NoPromptStrategy fine_tune;
  TaskPromptStrategy task_prompt(20, 64, 1);
  PrefixTuningStrategy prefix(20, 64, 4, 2);
  TableIptStrategy random_ipt("random-ipt", 2000, 64, 64, 20, 3);
  Rng rng(5);
  Tensor table = Tensor::randn({2000, 64}, rng, 0.05);
  TableIptStrategy pretrained("pretrained-ipt", table, 64, 20, 4);

  std::vector<std::unique_ptr<PromptStrategy>> encoders;
  for (const std::string enc : {"cnn", "rnn", "mlp"}) {
    StrategyConfig cfg;
    cfg.kind = "encoder-ipt";
    cfg.encoder = enc;
    cfg.prompt_len = 20;
    encoders.push_back(make_strategy(cfg, backbone, vocab, &table));
  }

  std::vector<const PromptStrategy*> all = {&fine_tune, &task_prompt, &prefix, &random_ipt, &pretrained};
  for (auto& e : encoders) all.push_back(e.get());
  auto rows = param_ratio_report(all, backbone);

  // enumeration oracle: walk every named tensor
  bool pass = true;
  for (size_t i = 0; i < all.size(); ++i) {
    int64_t enumerated = 0;
    for (const Parameter& p : all[i]->parameters()) {
      if (!p.frozen()) enumerated += p.size();
    }
    if (all[i]->name() == "fine-tuning") enumerated += param_count(desk_cfg);
    CHECK(rows[i].trainable == enumerated);
    pass = pass && rows[i].trainable == enumerated;
  }
  // closed forms for the simple strategies
  CHECK(rows[1].trainable == 20 * 64);
  CHECK(rows[3].trainable == 2000 * 64);
  const int64_t prefix_count = rows[2].trainable;
  CHECK(prefix_count == 20 * 64 + (64 * 128 + 128) + (128 * 4 * 64 + 4 * 64));

  // encoder defaults: <= 1% of fine-tuning and <= 1/3 of prefix tuning
  std::string encoder_info;
  for (size_t i = 5; i < rows.size(); ++i) {
    CHECK(rows[i].ratio_vs_finetune <= 0.01);
    CHECK(rows[i].trainable * 3 <= prefix_count);
    pass = pass && rows[i].ratio_vs_finetune <= 0.01 && rows[i].trainable * 3 <= prefix_count;
    encoder_info += rows[i].strategy.substr(12) + "=" + std::to_string(rows[i].trainable) + " ";
  }
  report(4, pass, "encoders " + encoder_info + "all <= 1% of fine-tune (" +
                      std::to_string(rows[0].trainable) + ") and <= prefix/3 (" +
                      std::to_string(prefix_count / 3) + "), " + fmt(timer.seconds(), 1) + "s");
}

// ===================== criterion 5: pretrained-IPT initialization =====================

TEST_CASE("criterion 5") {
  Timer timer;
  CategoryBundle& c = category();

  // bit-exact extraction
  Tensor extracted = pretrained_ipt_init(c.trained, c.vocab);
  const double extract_delta = max_abs_diff(extracted.values(), c.trained.model.embedding().values());

  // the table seeds the strategy bit-exactly as well
  TableIptStrategy strategy("pretrained-ipt", extracted, 64, 16, 3);
  const double seed_delta = max_abs_diff(strategy.table().values(), extracted.values());

  // held-out accuracy on the synthetic corpus
  const double acc = c.trained.held_out_accuracy;

  // initial loss on balanced batches with a fresh classifier
  TextClassifier fresh(c.cls_cfg, c.vocab.size(), 11);
  double init_loss = 0.0;
  int64_t n = 0;
  for (size_t i = 0; i < c.corpus.examples.size(); i += 100) {  // 2 per category
    const auto& ex = c.corpus.examples[i];
    init_loss += cross_entropy(fresh.logits(c.vocab.encode(ex.text)), {category_index(ex.category)}).item();
    ++n;
  }
  init_loss /= static_cast<double>(n);

  const bool pass = extract_delta == 0.0 && seed_delta == 0.0 && acc >= 0.95 &&
                    std::abs(init_loss - 2.5649493574615367) <= 0.05;
  report(5, pass, "extraction max |delta| = " + fmt(extract_delta, 12) + ", held-out acc " +
                      fmt(acc, 4) + " >= 0.95, init loss " + fmt(init_loss, 4) + " ~ ln 13, " +
                      fmt(timer.seconds(), 1) + "s");
  CHECK(extract_delta == 0.0);
  CHECK(seed_delta == 0.0);
  CHECK(acc >= 0.95);
  CHECK(std::abs(init_loss - 2.5649493574615367) <= 0.05);
}

// ===================== criterion 6: knowledge clustering =====================

TEST_CASE("criterion 6") {
  Timer timer;
  CategoryBundle& c = category();

  auto marker_stats = [&](const Tensor& table) {
    std::vector<std::vector<double>> vectors;
    std::vector<std::string> cats;
    const int64_t d = table.cols();
    for (size_t cat = 0; cat < c.corpus.markers.size(); ++cat) {
      for (const std::string& marker : c.corpus.markers[cat]) {
        const int64_t id = c.vocab.id(marker);
        REQUIRE(id != Vocabulary::kUnk);
        vectors.emplace_back(table.data() + id * d, table.data() + (id + 1) * d);
        cats.push_back(kCategoryNames[cat]);
      }
    }
    return distance_stats(vectors, cats);
  };

  const DistanceStats trained = marker_stats(c.trained.model.embedding());

  double random_ratio_sum = 0.0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed * 7919);
    Tensor random_table = Tensor::randn({c.vocab.size(), 64}, rng, 0.05);
    random_ratio_sum += marker_stats(random_table).ratio;
  }
  const double random_mean = random_ratio_sum / 5.0;

  const double elapsed = timer.seconds();
  const bool pass = trained.ratio < 1.0 && random_mean >= 0.9 && random_mean <= 1.1 && elapsed < 300.0;
  report(6, pass, "trained intra/inter " + fmt(trained.ratio, 4) + " < 1, random mean " +
                      fmt(random_mean, 4) + " in [0.9, 1.1], " + fmt(elapsed, 1) + "s < 300s");
  CHECK(trained.ratio < 1.0);
  CHECK(random_mean >= 0.9);
  CHECK(random_mean <= 1.1);
  CHECK(elapsed < 300.0);
}

// ===================== criterion 7: motivation analog =====================

TEST_CASE("criterion 7") {
  Timer timer;
  DeskBundle& d = desk();
  const auto backbone_before = snapshot_values(d.backbone.parameters());

  const std::vector<double> grid_lrs = {0.3, 0.1};
  auto tuned_test_accuracy = [&](const std::string& kind, uint64_t seed) {
    double best_dev = -1.0, best_test = 0.0;
    for (size_t g = 0; g < grid_lrs.size(); ++g) {
      TrainConfig cfg;
      cfg.batch_size = 16;
      cfg.grad_accum_steps = 1;
      cfg.lr = grid_lrs[g];
      cfg.warmup_steps = 20;
      cfg.max_epochs = 40;
      cfg.early_stop_patience = 10;
      cfg.seed = seed * 97 + g;
      std::unique_ptr<PromptStrategy> strategy;
      if (kind == "random-ipt") {
        strategy = std::make_unique<TableIptStrategy>("random-ipt", d.vocab.size(), 32, 32, 16,
                                                      seed * 31 + g);
      } else {
        strategy = std::make_unique<TaskPromptStrategy>(16, 32, seed * 31 + g);
      }
      RunResult run = train_downstream(d.backbone, *strategy, d.data, d.verbalizer, cfg);
      if (run.best_dev_accuracy > best_dev) {
        best_dev = run.best_dev_accuracy;
        best_test = run.test_accuracy;
      }
    }
    return best_test;
  };

  const std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
  MultiSeedReport random_report =
      multi_seed_report([&](uint64_t s) { return tuned_test_accuracy("random-ipt", s); }, seeds);
  MultiSeedReport task_report =
      multi_seed_report([&](uint64_t s) { return tuned_test_accuracy("task-prompt", s); }, seeds);

  const double backbone_delta = max_param_delta(backbone_before, d.backbone.parameters());
  const double margin = random_report.mean - task_report.mean;
  const double elapsed = timer.seconds();
  const bool pass = margin >= 0.05 && backbone_delta == 0.0 && elapsed < 900.0;
  report(7, pass, "random-ipt " + fmt(random_report.mean, 4) + " +- " + fmt(random_report.stddev, 4) +
                      " vs task-prompt " + fmt(task_report.mean, 4) + " +- " +
                      fmt(task_report.stddev, 4) + ", margin " + fmt(margin, 4) +
                      " >= 0.05, backbone |delta| = " + fmt(backbone_delta, 12) + ", " +
                      fmt(elapsed, 1) + "s < 900s");
  CHECK(margin >= 0.05);
  CHECK(backbone_delta == 0.0);
  CHECK(elapsed < 900.0);
}

// ===================== criterion 8: protocol fidelity =====================

TEST_CASE("criterion 8") {
  Timer timer;
  DeskBundle& d = desk();

  // few-shot protocol: K=32, 4 folds, 4-config grid -> exactly 16 + 1 fits
  StrategyFactory factory = [&](const GridPoint& point, uint64_t seed) {
    return std::unique_ptr<PromptStrategy>(
        std::make_unique<TableIptStrategy>("random-ipt", d.vocab.size(), 32, 32, point.prompt_len, seed));
  };
  FewShotConfig fs_cfg;
  fs_cfg.k = 32;
  fs_cfg.folds = 4;
  fs_cfg.grid = {{0.3, 8}, {0.1, 8}, {0.3, 16}, {0.1, 16}};
  fs_cfg.base.batch_size = 16;
  fs_cfg.base.grad_accum_steps = 1;
  fs_cfg.base.warmup_steps = 0;
  fs_cfg.base.max_epochs = 2;
  fs_cfg.seed = 21;

  FewShotReport r1 = few_shot_protocol(d.backbone, factory, d.instances, d.verbalizer,
                                       d.task.spec.labels, fs_cfg);
  FewShotReport r2 = few_shot_protocol(d.backbone, factory, d.instances, d.verbalizer,
                                       d.task.spec.labels, fs_cfg);
  const bool fits_ok = r1.fits_performed == 17 && r1.cv_cells.size() == 16;
  bool deterministic = r1.chosen_config == r2.chosen_config &&
                       r1.final_run.best_dev_accuracy == r2.final_run.best_dev_accuracy &&
                       r1.final_run.test_accuracy == r2.final_run.test_accuracy;
  for (size_t i = 0; i < r1.cv_means.size(); ++i) deterministic = deterministic && r1.cv_means[i] == r2.cv_means[i];

  // sweeps over the paper's prompt lengths and utilization rates
  Dataset sweep_data;
  for (size_t i = 0; i < 64; ++i) sweep_data.train.push_back(d.data.train[i]);
  for (size_t i = 0; i < 32; ++i) sweep_data.dev.push_back(d.data.dev[i]);

  SweepRequest lengths;
  lengths.axis = "prompt-length";
  lengths.values = {5, 10, 16, 32, 64, 100, 120};
  lengths.strategy.kind = "random-ipt";
  lengths.train.batch_size = 16;
  lengths.train.grad_accum_steps = 1;
  lengths.train.lr = 0.1;
  lengths.train.warmup_steps = 0;
  lengths.train.max_epochs = 1;
  auto length_cells = sweep(d.backbone, d.vocab, sweep_data, d.verbalizer, lengths);

  SweepRequest rates;
  rates.axis = "utilization-rate";
  rates.values = {0.002, 0.013, 0.03, 0.05, 0.10, 0.21, 0.26, 0.30};
  rates.strategy.kind = "encoder-ipt";
  rates.strategy.encoder = "cnn";
  rates.strategy.prompt_len = 8;
  rates.train = lengths.train;
  auto rate_cells = sweep(d.backbone, d.vocab, sweep_data, d.verbalizer, rates);

  auto csv_rows = [](const std::vector<SweepCell>& cells) {
    const std::string path = "/tmp/ipt_acceptance_sweep.csv";
    write_sweep_csv(cells, path);
    std::ifstream in(path);
    std::string line;
    int rows = -1;
    while (std::getline(in, line)) ++rows;
    std::remove(path.c_str());
    return rows;
  };
  const int length_rows = csv_rows(length_cells);
  const int rate_rows = csv_rows(rate_cells);

  const double elapsed = timer.seconds();
  const bool pass = fits_ok && deterministic && length_rows == 7 && rate_rows == 8;
  report(8, pass, "fits " + std::to_string(r1.fits_performed) + " == 17, deterministic " +
                      (deterministic ? "yes" : "NO") + ", length csv rows " +
                      std::to_string(length_rows) + "/7, rate csv rows " + std::to_string(rate_rows) +
                      "/8, " + fmt(elapsed, 1) + "s");
  CHECK(fits_ok);
  CHECK(deterministic);
  CHECK(length_rows == 7);
  CHECK(rate_rows == 8);
}

// ===================== criterion 9: analysis oracles =====================

TEST_CASE("criterion 9") {
  Timer timer;
  Rng rng(61);

  // distance_stats == brute force, exactly
  std::vector<std::vector<double>> vectors;
  std::vector<std::string> cats;
  for (int i = 0; i < 30; ++i) {
    std::vector<double> x(9);
    for (auto& v : x) v = rng.gauss();
    vectors.push_back(x);
    cats.push_back("c" + std::to_string(i % 3));
  }
  DistanceStats stats = distance_stats(vectors, cats);
  double intra = 0, inter = 0;
  int ni = 0, nx = 0;
  auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
      dot += a[i] * b[i];
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
  };
  for (size_t i = 0; i < vectors.size(); ++i) {
    for (size_t j = i + 1; j < vectors.size(); ++j) {
      const double dist = 1.0 - cosine(vectors[i], vectors[j]);
      if (cats[i] == cats[j]) {
        intra += dist;
        ++ni;
      } else {
        inter += dist;
        ++nx;
      }
    }
  }
  const bool dist_ok = stats.intra_mean == intra / ni && stats.inter_mean == inter / nx;

  // nearest_tokens == exhaustive scan, exactly
  Tensor reference = Tensor::randn({20, 7}, rng, 1.0);
  Tensor prompts = Tensor::randn({6, 7}, rng, 1.0);
  std::vector<std::string> names;
  for (int i = 0; i < 20; ++i) names.push_back("t" + std::to_string(i));
  auto result = nearest_tokens(prompts, reference, names, 1);
  bool nearest_ok = true;
  for (int64_t row = 0; row < 6; ++row) {
    std::vector<double> p(prompts.data() + row * 7, prompts.data() + (row + 1) * 7);
    double best = -2.0;
    int64_t best_id = 0;
    for (int64_t i = 0; i < 20; ++i) {
      std::vector<double> r(reference.data() + i * 7, reference.data() + (i + 1) * 7);
      const double s = cosine(p, r);
      if (s > best) {
        best = s;
        best_id = i;
      }
    }
    nearest_ok = nearest_ok && result[static_cast<size_t>(row)].token_id == best_id &&
                 result[static_cast<size_t>(row)].similarity == best;
  }

  // project_2d explained variances vs a power-iteration eigen oracle (1e-8)
  std::vector<std::vector<double>> pca_vectors;
  std::vector<std::string> pca_cats;
  for (int i = 0; i < 50; ++i) {
    std::vector<double> x(6);
    for (auto& v : x) v = rng.gauss();
    x[0] *= 2.5;
    x[1] *= 1.5;
    pca_vectors.push_back(x);
    pca_cats.push_back("x");
  }
  Projection2D proj = project_2d(pca_vectors, pca_cats);
  // oracle: covariance + power iteration with deflation
  const int64_t dim = 6;
  std::vector<double> mean(dim, 0.0);
  for (const auto& v : pca_vectors) {
    for (int64_t j = 0; j < dim; ++j) mean[static_cast<size_t>(j)] += v[static_cast<size_t>(j)];
  }
  for (double& m : mean) m /= static_cast<double>(pca_vectors.size());
  std::vector<double> cov(static_cast<size_t>(dim * dim), 0.0);
  for (const auto& v : pca_vectors) {
    for (int64_t i = 0; i < dim; ++i) {
      for (int64_t j = 0; j < dim; ++j) {
        cov[static_cast<size_t>(i * dim + j)] +=
            (v[static_cast<size_t>(i)] - mean[static_cast<size_t>(i)]) *
            (v[static_cast<size_t>(j)] - mean[static_cast<size_t>(j)]);
      }
    }
  }
  for (double& c : cov) c /= static_cast<double>(pca_vectors.size() - 1);
  double total = 0.0;
  for (int64_t i = 0; i < dim; ++i) total += cov[static_cast<size_t>(i * dim + i)];
  std::vector<std::vector<double>> found;
  std::vector<double> lambdas;
  for (int comp = 0; comp < 2; ++comp) {
    std::vector<double> x(static_cast<size_t>(dim));
    for (auto& v : x) v = rng.gauss();
    double lambda = 0.0;
    for (int iter = 0; iter < 30000; ++iter) {
      for (const auto& u : found) {
        double proj_coef = 0.0;
        for (int64_t i = 0; i < dim; ++i) proj_coef += x[static_cast<size_t>(i)] * u[static_cast<size_t>(i)];
        for (int64_t i = 0; i < dim; ++i) x[static_cast<size_t>(i)] -= proj_coef * u[static_cast<size_t>(i)];
      }
      std::vector<double> y(static_cast<size_t>(dim), 0.0);
      for (int64_t i = 0; i < dim; ++i) {
        for (int64_t j = 0; j < dim; ++j) {
          y[static_cast<size_t>(i)] += cov[static_cast<size_t>(i * dim + j)] * x[static_cast<size_t>(j)];
        }
      }
      double norm = 0.0;
      for (double v : y) norm += v * v;
      norm = std::sqrt(norm);
      for (int64_t i = 0; i < dim; ++i) x[static_cast<size_t>(i)] = y[static_cast<size_t>(i)] / norm;
      lambda = norm;
    }
    lambdas.push_back(lambda);
    found.push_back(x);
  }
  const double err_x = std::abs(proj.explained_x - lambdas[0] / total);
  const double err_y = std::abs(proj.explained_y - lambdas[1] / total);
  const bool pca_ok = err_x < 1e-8 && err_y < 1e-8;

  const bool pass = dist_ok && nearest_ok && pca_ok;
  report(9, pass, std::string("distance exact ") + (dist_ok ? "yes" : "NO") + ", nearest exact " +
                      (nearest_ok ? "yes" : "NO") + ", eigen err " + fmt(std::max(err_x, err_y), 12) +
                      " < 1e-8, " + fmt(timer.seconds(), 1) + "s");
  CHECK(dist_ok);
  CHECK(nearest_ok);
  CHECK(pca_ok);
}

// ===================== criterion 10: CLI determinism =====================

TEST_CASE("criterion 10") {
  Timer timer;
  const fs::path root = fs::temp_directory_path() / "ipt_acceptance_cli";
  fs::remove_all(root);
  fs::create_directories(root);
  auto p = [&](const std::string& name) { return (root / name).string(); };

  {
    std::ofstream gen(p("gen.json"));
    gen << R"({"trigger_task": {"n_classes": 2, "n_triggers": 16, "examples_per_class": 50,
               "text_len": 6, "background_vocab": 40}})";
  }
  REQUIRE(run_cli("gen-data --config " + p("gen.json") + " --out " + p("data") + " --seed 1") == 0);
  {
    std::ofstream preb(p("preb.json"));
    preb << R"({"corpus": ")" << p("data") << R"(/corpus.txt",
      "model": {"d_model": 16, "n_layers": 2, "n_heads": 2, "ff_dim": 32, "max_context": 48},
      "mlm": {"steps": 30, "batch_size": 8, "lr": 2e-3, "warmup_steps": 10}})";
  }
  REQUIRE(run_cli("pretrain-backbone --config " + p("preb.json") + " --out " + p("backbone") +
                  " --seed 2") == 0);
  {
    std::ofstream train(p("train.json"));
    train << R"({
      "backbone": ")" << p("backbone") << R"(/backbone.ckpt",
      "vocab": ")" << p("backbone") << R"(/vocab.json",
      "task_spec": ")" << p("data") << R"(/task_spec.json",
      "train_data": ")" << p("data") << R"(/train.jsonl",
      "dev_data": ")" << p("data") << R"(/dev.jsonl",
      "strategy": {"strategy": "random-ipt", "prompt_len": 4},
      "train": {"batch_size": 8, "lr": 0.01, "warmup_steps": 0, "max_epochs": 3}})";
  }
  REQUIRE(run_cli("train --config " + p("train.json") + " --out " + p("run_a") + " --seed 11") == 0);
  REQUIRE(run_cli("train --config " + p("train.json") + " --out " + p("run_b") + " --seed 11") == 0);
  const std::string m1 = read_file(p("run_a") + "/metrics.jsonl");
  const std::string m2 = read_file(p("run_b") + "/metrics.jsonl");

  REQUIRE(run_cli("sweep --config " + p("train.json") + " --axis prompt-length --values 2,4 --out " +
                  p("sw_a") + " --seed 3") == 0);
  REQUIRE(run_cli("sweep --config " + p("train.json") + " --axis prompt-length --values 2,4 --out " +
                  p("sw_b") + " --seed 3") == 0);
  const std::string s1 = read_file(p("sw_a") + "/sweep.csv");
  const std::string s2 = read_file(p("sw_b") + "/sweep.csv");

  const bool pass = !m1.empty() && m1 == m2 && !s1.empty() && s1 == s2;
  report(10, pass, std::string("train metrics identical ") + (m1 == m2 ? "yes" : "NO") +
                       " (" + std::to_string(m1.size()) + " bytes), sweep csv identical " +
                       (s1 == s2 ? "yes" : "NO") + ", " + fmt(timer.seconds(), 1) + "s");
  CHECK(m1 == m2);
  CHECK(s1 == s2);
  CHECK(!m1.empty());
  fs::remove_all(root);
}
