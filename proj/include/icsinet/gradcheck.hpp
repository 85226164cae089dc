#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "icsinet/tensor.hpp"

namespace icsinet {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;  // flat index (or sample slot) of the worst entry
  std::size_t checked = 0;
};

/// Compares backward() against central differences for a scalar-valued f.
///
/// Relative error per entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
/// Entries for which `skip` returns true are left out (kink-adjacent inputs).
GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                           const Tensor<double>& x, double h,
                           const std::function<bool(std::size_t)>& skip = {});

/// One (tensor, flat index) coordinate inside a parameter set.
struct ParamCoordinate {
  std::size_t tensor = 0;
  std::size_t index = 0;
};

/// Finite-difference check of `loss` with respect to selected coordinates of
/// leaf tensors. `loss` is re-evaluated after each perturbation.
GradCheckResult grad_check_params(const std::function<Tensor<double>()>& loss,
                                  std::span<Tensor<double>> params,
                                  std::span<const ParamCoordinate> coords, double h);

}  // namespace icsinet
