#pragma once

#include <cmath>
#include <functional>
#include <limits>

#include "ipt/tensor.hpp"

namespace ipt::testutil {

// Finite-difference check against a live parameter tensor: loss_builder must
// re-read the tensor's current values on every call. Returns the max relative
// error |analytic - central| / (|analytic| + 1e-12) over all coordinates.
inline double fd_vs_analytic(const std::function<Tensor()>& loss_builder, Tensor param,
                             double h = 1e-5) {
  param.zero_grad();
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor loss = loss_builder();
    if (!std::isfinite(loss.item())) return std::numeric_limits<double>::infinity();
    tape.backward(loss);
    analytic = param.grad();
    param.zero_grad();
  }
  NoGradGuard no_grad;
  double max_rel = 0.0;
  for (int64_t i = 0; i < param.size(); ++i) {
    const double orig = param.data()[i];
    param.data()[i] = orig + h;
    const double fp = loss_builder().item();
    param.data()[i] = orig - h;
    const double fm = loss_builder().item();
    param.data()[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) return std::numeric_limits<double>::infinity();
    const double fd = (fp - fm) / (2.0 * h);
    const double rel = std::abs(analytic[static_cast<size_t>(i)] - fd) /
                       (std::abs(analytic[static_cast<size_t>(i)]) + 1e-12);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace ipt::testutil
