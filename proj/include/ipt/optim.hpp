#pragma once

#include <cstdint>
#include <vector>

#include "ipt/tensor.hpp"

namespace ipt {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t warmup_steps = 0;  // 0 disables the ramp
};

// Adam with bias-corrected moments and a linear learning-rate warmup.
// Frozen parameters are skipped entirely; their values stay bit-identical.
class Adam {
 public:
  Adam(std::vector<Parameter> params, AdamConfig cfg);

  // Applies one update from the accumulated gradients (params without a
  // gradient buffer are left alone), then advances the step counter.
  void step();
  void zero_grad();

  int64_t step_count() const { return t_; }
  // lr * min(1, s / warmup) at step s (1-based).
  double effective_lr(int64_t step) const;

 private:
  std::vector<Parameter> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

}  // namespace ipt
