#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ipt {

inline constexpr const char* kIptVersion = "0.1.0";

// Configuration problems exit with status 2; runtime failures with 1.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// IPT_LOG={error|info|debug}; defaults to info.
void log_info(const std::string& msg);
void log_debug(const std::string& msg);
void log_error(const std::string& msg);

// Flag overrides shared across subcommands; unset fields fall back to the
// config file, then to defaults (flags > config > defaults).
struct CliOverrides {
  std::optional<uint64_t> seed;
  std::optional<std::string> strategy;
  std::optional<std::string> axis;
  std::optional<std::vector<double>> values;
  std::optional<int64_t> few_shot_k;
  int64_t jobs = 1;
};

// Each pipeline validates its config fully before producing any output and
// publishes the staged run directory atomically at the end.
void cmd_gen_data(const std::string& config_path, const std::string& out_dir,
                  const CliOverrides& overrides);
void cmd_pretrain_backbone(const std::string& config_path, const std::string& out_dir,
                           const CliOverrides& overrides);
void cmd_pretrain_prompts(const std::string& config_path, const std::string& out_dir,
                          const CliOverrides& overrides);
void cmd_train(const std::string& config_path, const std::string& out_dir,
               const CliOverrides& overrides);
void cmd_few_shot(const std::string& config_path, const std::string& out_dir,
                  const CliOverrides& overrides);
void cmd_sweep(const std::string& config_path, const std::string& out_dir,
               const CliOverrides& overrides);
void cmd_analyze(const std::string& config_path, const std::string& out_dir,
                 const CliOverrides& overrides);
void cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir);

}  // namespace ipt
