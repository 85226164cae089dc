#include "icsinet/optim.hpp"

#include <cmath>

namespace icsinet {

void OptimConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("optim.lr must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0) throw ConfigError("optim.beta1 must lie in [0, 1)");
  if (beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("optim.beta2 must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("optim.eps must be positive");
}

template <typename T>
OptimState<T> OptimState<T>::init(std::span<const Tensor<T>> params) {
  OptimState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.numel(), T{0});
    s.v.emplace_back(p.numel(), T{0});
    s.g_prev.emplace_back(p.numel(), T{0});
  }
  return s;
}

template <typename T>
void diffgrad_step(std::span<Tensor<T>> params, OptimState<T>& state, const OptimConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size() ||
      state.g_prev.size() != params.size()) {
    throw ContractError("diffgrad_step: optimizer state holds " + std::to_string(state.m.size()) +
                        " buffers for " + std::to_string(params.size()) + " parameters (uninitialised?)");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const std::size_t n = params[k].numel();
    if (state.m[k].size() != n || state.v[k].size() != n || state.g_prev[k].size() != n) {
      throw ContractError("diffgrad_step: state for parameter " + std::to_string(k) + " does not match shape " +
                          shape_str(params[k].shape()));
    }
  }

  state.t += 1;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, double(state.t));
  const double bc2 = 1.0 - std::pow(b2, double(state.t));
  const double lr = cfg.lr_at(state.t);

  for (std::size_t k = 0; k < params.size(); ++k) {
    auto theta = params[k].data();
    const bool has_grad = params[k].has_grad();
    const auto grad = has_grad ? params[k].grad() : std::span<const T>{};
    auto& m = state.m[k];
    auto& v = state.v[k];
    auto& gp = state.g_prev[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = has_grad ? double(grad[i]) : 0.0;
      const double xi = diffgrad_friction(double(gp[i]) - g);
      const double mi = b1 * double(m[i]) + (1.0 - b1) * g;
      const double vi = b2 * double(v[i]) + (1.0 - b2) * g * g;
      m[i] = T(mi);
      v[i] = T(vi);
      const double m_hat = mi / bc1;
      const double v_hat = vi / bc2;
      theta[i] = T(double(theta[i]) - lr * xi * m_hat / (std::sqrt(v_hat) + cfg.eps));
      gp[i] = T(g);
    }
  }
}

template <typename T>
void zero_grads(std::span<Tensor<T>> params) {
  for (auto& p : params) p.zero_grad();
}

template struct OptimState<float>;
template struct OptimState<double>;
template void diffgrad_step<float>(std::span<Tensor<float>>, OptimState<float>&, const OptimConfig&);
template void diffgrad_step<double>(std::span<Tensor<double>>, OptimState<double>&, const OptimConfig&);
template void zero_grads<float>(std::span<Tensor<float>>);
template void zero_grads<double>(std::span<Tensor<double>>);

}  // namespace icsinet
