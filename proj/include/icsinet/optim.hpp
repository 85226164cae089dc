#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "icsinet/tensor.hpp"

namespace icsinet {

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Optional learning-rate multiplier as a function of the step about to be taken (1-based).
  // Empty means a constant rate.
  std::function<double(std::uint64_t)> schedule;

  void validate() const;
  double lr_at(std::uint64_t step) const { return schedule ? lr * schedule(step) : lr; }
};

/// Per-parameter moment buffers and the previous gradient, shaped like the parameters.
template <typename T>
struct OptimState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::vector<std::vector<T>> g_prev;
  std::uint64_t t = 0;

  /// All buffers zero, t = 0.
  static OptimState init(std::span<const Tensor<T>> params);
  bool initialized() const { return !m.empty() || t > 0; }
};

/// diffGrad friction coefficient: sigmoid(|g_prev - g|).
inline double diffgrad_friction(double delta) {
  return 1.0 / (1.0 + std::exp(-std::abs(delta)));
}

/// One diffGrad update using the gradients currently stored on `params`.
/// A parameter without a gradient buffer is treated as having zero gradient.
template <typename T>
void diffgrad_step(std::span<Tensor<T>> params, OptimState<T>& state, const OptimConfig& cfg);

template <typename T>
void zero_grads(std::span<Tensor<T>> params);

}  // namespace icsinet
