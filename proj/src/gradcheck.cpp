#include "icsinet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace icsinet {

namespace {

double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

double eval_scalar(const Tensor<double>& y) {
  if (y.numel() != 1) {
    throw ContractError("grad_check: function must return a scalar, got shape " + shape_str(y.shape()));
  }
  return y.item();
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                           const Tensor<double>& x, double h, const std::function<bool(std::size_t)>& skip) {
  if (h <= 0.0) throw ContractError("grad_check: step must be positive");

  Tensor<double> leaf = x.detach();
  leaf.set_requires_grad(true);
  const Tensor<double> y = f(leaf);
  eval_scalar(y);

  std::vector<double> analytic(leaf.numel(), 0.0);
  if (y.requires_grad()) {
    backward(y);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
  }

  GradCheckResult result;
  Tensor<double> probe = x.detach();
  auto values = probe.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (skip && skip(i)) continue;
    const double saved = values[i];
    values[i] = saved + h;
    const double up = eval_scalar(f(probe));
    values[i] = saved - h;
    const double down = eval_scalar(f(probe));
    values[i] = saved;
    const double err = rel_error(analytic[i], (up - down) / (2.0 * h));
    ++result.checked;
    if (err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = i;
    }
  }
  return result;
}

GradCheckResult grad_check_params(const std::function<Tensor<double>()>& loss,
                                  std::span<Tensor<double>> params,
                                  std::span<const ParamCoordinate> coords, double h) {
  if (h <= 0.0) throw ContractError("grad_check_params: step must be positive");
  for (auto& p : params) p.zero_grad();
  const Tensor<double> y = loss();
  eval_scalar(y);
  backward(y);

  std::vector<double> analytic;
  analytic.reserve(coords.size());
  for (const auto& c : coords) {
    const auto& p = params[c.tensor];
    analytic.push_back(p.has_grad() ? p.grad()[c.index] : 0.0);
  }

  GradCheckResult result;
  for (std::size_t k = 0; k < coords.size(); ++k) {
    auto values = params[coords[k].tensor].data();
    double& v = values[coords[k].index];
    const double saved = v;
    v = saved + h;
    const double up = eval_scalar(loss());
    v = saved - h;
    const double down = eval_scalar(loss());
    v = saved;
    const double err = rel_error(analytic[k], (up - down) / (2.0 * h));
    ++result.checked;
    if (err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = k;
    }
  }
  return result;
}

}  // namespace icsinet
