#include "ipt/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace ipt {

Adam::Adam(std::vector<Parameter> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (cfg_.lr <= 0.0) throw std::invalid_argument("adam: lr must be positive");
  if (cfg_.warmup_steps < 0) throw std::invalid_argument("adam: warmup_steps must be >= 0");
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(static_cast<size_t>(params_[i].size()), 0.0);
    v_[i].assign(static_cast<size_t>(params_[i].size()), 0.0);
  }
}

double Adam::effective_lr(int64_t step) const {
  if (cfg_.warmup_steps <= 0 || step >= cfg_.warmup_steps) return cfg_.lr;
  return cfg_.lr * static_cast<double>(step) / static_cast<double>(cfg_.warmup_steps);
}

void Adam::step() {
  ++t_;
  const double lr = effective_lr(t_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = params_[i];
    if (p.frozen()) continue;
    auto pd = p.tensor.ptr();
    if (pd->grad.empty()) continue;
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < pd->values.size(); ++j) {
      const double g = pd->grad[j];
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      pd->values[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (Parameter& p : params_) p.tensor.zero_grad();
}

}  // namespace ipt
