// ipt: desk-scale instance-wise prompt tuning laboratory.
//
// Subcommands cover the full pipeline: synthetic data generation, backbone
// MLM pretraining, knowledge pretraining of the prompt table, downstream
// prompt training, the few-shot protocol, hyperparameter sweeps, embedding
// analysis and cross-run reports. All randomness is governed by --seed.

#include <CLI11.hpp>

#include <cstdio>
#include <string>
#include <vector>

#include "ipt/runconfig.hpp"

namespace {

std::vector<double> parse_values_list(const std::string& csv) {
  std::vector<double> out;
  std::string token;
  std::istringstream in(csv);
  while (std::getline(in, token, ',')) {
    if (token.empty()) continue;
    out.push_back(std::stod(token));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"instance-wise prompt tuning laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::string strategy_flag, axis_flag, values_flag;
  int64_t seed_flag = -1;
  int64_t k_flag = -1;
  int64_t jobs = 1;
  std::vector<std::string> run_dirs;

  auto add_common = [&](CLI::App* cmd, bool needs_config = true) {
    if (needs_config) {
      cmd->add_option("--config", config_path, "JSON config file")->required();
    }
    cmd->add_option("--out", out_dir, "output directory")->required();
    cmd->add_option("--seed", seed_flag, "random seed (overrides the config)");
    cmd->add_option("--jobs", jobs, "parallel worker bound");
    return cmd;
  };

  CLI::App* gen = add_common(app.add_subcommand("gen-data", "generate synthetic corpora and tasks"));
  CLI::App* preb = add_common(
      app.add_subcommand("pretrain-backbone", "build a vocabulary and MLM-pretrain the backbone"));
  CLI::App* prep = add_common(
      app.add_subcommand("pretrain-prompts", "train the 13-category classifier for prompt tables"));
  CLI::App* train = add_common(app.add_subcommand("train", "train a prompt strategy downstream"));
  train->add_option("--strategy", strategy_flag,
                    "task-prompt | prefix | random-ipt | pretrained-ipt | encoder-ipt | fine-tuning");
  CLI::App* few = add_common(app.add_subcommand("few-shot", "K-shot protocol with 4-fold CV"));
  few->add_option("--strategy", strategy_flag, "strategy override");
  few->add_option("--k", k_flag, "examples per label (default 32)");
  CLI::App* sw = add_common(app.add_subcommand("sweep", "sweep one axis across values"));
  sw->add_option("--strategy", strategy_flag, "strategy override");
  sw->add_option("--axis", axis_flag, "prompt-length | utilization-rate | strategy");
  sw->add_option("--values", values_flag, "comma-separated axis values");
  CLI::App* an = add_common(app.add_subcommand("analyze", "embedding projections and case studies"));
  CLI::App* rep = app.add_subcommand("report", "markdown comparison across run directories");
  rep->add_option("--out", out_dir, "output directory")->required();
  rep->add_option("runs", run_dirs, "run directories with result.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  ipt::CliOverrides overrides;
  if (seed_flag >= 0) overrides.seed = static_cast<uint64_t>(seed_flag);
  if (!strategy_flag.empty()) overrides.strategy = strategy_flag;
  if (!axis_flag.empty()) overrides.axis = axis_flag;
  if (!values_flag.empty()) overrides.values = parse_values_list(values_flag);
  if (k_flag > 0) overrides.few_shot_k = k_flag;
  overrides.jobs = jobs;

  try {
    if (gen->parsed()) {
      ipt::cmd_gen_data(config_path, out_dir, overrides);
    } else if (preb->parsed()) {
      ipt::cmd_pretrain_backbone(config_path, out_dir, overrides);
    } else if (prep->parsed()) {
      ipt::cmd_pretrain_prompts(config_path, out_dir, overrides);
    } else if (train->parsed()) {
      ipt::cmd_train(config_path, out_dir, overrides);
    } else if (few->parsed()) {
      ipt::cmd_few_shot(config_path, out_dir, overrides);
    } else if (sw->parsed()) {
      ipt::cmd_sweep(config_path, out_dir, overrides);
    } else if (an->parsed()) {
      ipt::cmd_analyze(config_path, out_dir, overrides);
    } else if (rep->parsed()) {
      ipt::cmd_report(run_dirs, out_dir);
    }
  } catch (const ipt::ConfigError& e) {
    ipt::log_error(e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    // validation failures surfaced by the library layer
    ipt::log_error(e.what());
    return 2;
  } catch (const std::exception& e) {
    ipt::log_error(e.what());
    return 1;
  }
  return 0;
}
