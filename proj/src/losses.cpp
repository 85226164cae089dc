#include "icsinet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace icsinet {

void LossConfig::validate() const {
  if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("loss weights must be non-negative");
  if (sigma <= 0.0) throw ConfigError("loss.sigma must be positive");
  if (dice_smooth <= 0.0) throw ConfigError("loss.dice_smooth must be positive");
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target, double smooth) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("dice_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  if (pred.rank() < 2) throw ShapeError("dice_loss: expected [N,C,...], got " + shape_str(pred.shape()));
  const std::size_t groups = pred.dim(0) * pred.dim(1);
  const std::size_t len = pred.numel() / groups;
  const auto ps = pred.data();
  const auto ts = target.data();

  // Per (sample, class): numerator 2I + s and denominator P + T + s.
  auto num = std::make_shared<std::vector<double>>(groups);
  auto den = std::make_shared<std::vector<double>>(groups);
  double loss = 0.0;
  for (std::size_t g = 0; g < groups; ++g) {
    double inter = 0.0, psum = 0.0, tsum = 0.0;
    for (std::size_t i = g * len; i < (g + 1) * len; ++i) {
      inter += double(ps[i]) * double(ts[i]);
      psum += ps[i];
      tsum += ts[i];
    }
    (*num)[g] = 2.0 * inter + smooth;
    (*den)[g] = psum + tsum + smooth;
    loss += 1.0 - (*num)[g] / (*den)[g];
  }
  loss /= double(groups);

  return make_result<T>({1}, {T(loss)}, {pred, target}, [=](detail::Node<T>& self) {
    auto& pn = *self.parents[0];
    if (!pn.requires_grad) return;
    auto& g = pn.ensure_grad();
    const double up = double(self.grad[0]) / double(groups);
    const auto& tv = self.parents[1]->data;
    for (std::size_t k = 0; k < groups; ++k) {
      const double d = (*den)[k], nu = (*num)[k];
      for (std::size_t i = k * len; i < (k + 1) * len; ++i) {
        // d/dp of -(2I + s)/D = -(2t*D - (2I + s)) / D^2
        g[i] += T(up * -(2.0 * double(tv[i]) * d - nu) / (d * d));
      }
    }
  });
}

template <typename T>
Tensor<T> euclidean_loss(const TipCoords<T>& pred, const TipCoords<T>& target) {
  if (pred.xy.shape() != target.xy.shape()) {
    throw ShapeError("euclidean_loss: prediction " + shape_str(pred.xy.shape()) + " vs target " +
                     shape_str(target.xy.shape()));
  }
  const std::size_t n = pred.xy.dim(0);
  const auto ps = pred.xy.data();
  const auto ts = target.xy.data();
  auto dist = std::make_shared<std::vector<double>>(n);
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    const double dx = double(ps[2 * b]) - ts[2 * b];
    const double dy = double(ps[2 * b + 1]) - ts[2 * b + 1];
    (*dist)[b] = std::sqrt(dx * dx + dy * dy);
    total += (*dist)[b];
  }
  return make_result<T>({1}, {T(total / double(n))}, {pred.xy, target.xy}, [=](detail::Node<T>& self) {
    auto& pn = *self.parents[0];
    auto& tn = *self.parents[1];
    const double up = double(self.grad[0]) / double(n);
    if (pn.requires_grad) pn.ensure_grad();
    if (tn.requires_grad) tn.ensure_grad();
    for (std::size_t b = 0; b < n; ++b) {
      const double d = (*dist)[b];
      if (d == 0.0) continue;
      for (int k = 0; k < 2; ++k) {
        const double diff = double(pn.data[2 * b + k]) - tn.data[2 * b + k];
        if (pn.requires_grad) pn.ensure_grad()[2 * b + k] += T(up * diff / d);
        if (tn.requires_grad) tn.ensure_grad()[2 * b + k] -= T(up * diff / d);
      }
    }
  });
}

namespace {
constexpr double kRatioFloor = 1e-12;

// p * ln(p / m) with 0 * ln 0 := 0 and the ratio clamped from below.
double kl_term(double p, double m) {
  if (p <= 0.0) return 0.0;
  return p * std::log(std::max(p / m, kRatioFloor));
}
}  // namespace

template <typename T>
Tensor<T> js_loss(const Heatmap<T>& z, const Heatmap<T>& target) {
  if (z.values.shape() != target.values.shape()) {
    throw ShapeError("js_loss: heatmap " + shape_str(z.values.shape()) + " vs target " +
                     shape_str(target.values.shape()));
  }
  const std::size_t n = z.values.dim(0);
  const std::size_t len = z.values.numel() / n;
  const auto ps = z.values.data();
  const auto qs = target.values.data();
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    double js = 0.0;
    for (std::size_t i = b * len; i < (b + 1) * len; ++i) {
      const double p = ps[i], q = qs[i];
      const double m = 0.5 * (p + q);
      if (m <= 0.0) continue;
      js += 0.5 * kl_term(p, m) + 0.5 * kl_term(q, m);
    }
    total += js;
  }
  return make_result<T>({1}, {T(total / double(n))}, {z.values, target.values}, [n](detail::Node<T>& self) {
    auto& pn = *self.parents[0];
    if (!pn.requires_grad) return;
    auto& g = pn.ensure_grad();
    const auto& qv = self.parents[1]->data;
    const double up = double(self.grad[0]) / double(n);
    // Target treated as constant: dJS/dp_i = 0.5 * ln(p_i / m_i), ratio floored as in the forward pass.
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double p = pn.data[i];
      const double m = 0.5 * (p + double(qv[i]));
      if (m <= 0.0) continue;
      g[i] += T(up * 0.5 * std::log(std::max(p / m, kRatioFloor)));
    }
  });
}

template <typename T>
LossBreakdown<T> total_loss(const ModelOutput<T>& out, const Tensor<T>& gt_masks, const TipCoords<T>& gt_tip,
                            const LossConfig& cfg) {
  cfg.validate();
  const auto& hs = out.heatmap.values.shape();
  Heatmap<T> target;
  {
    NoGradGuard no_grad;
    target = render_gaussian_target(gt_tip, hs[1], hs[2], cfg.sigma);
  }
  const auto seg = dice_loss(out.seg.values, gt_masks, cfg.dice_smooth);
  const auto euc = euclidean_loss(out.coords, gt_tip);
  const auto js = js_loss(out.heatmap, target);
  auto total = add(add(seg, scale(euc, T(cfg.lambda1))), scale(js, T(cfg.lambda2)));
  return {total, double(seg.item()), double(euc.item()), double(js.item())};
}

#define ICSINET_INSTANTIATE(T)                                                                        \
  template Tensor<T> dice_loss<T>(const Tensor<T>&, const Tensor<T>&, double);                        \
  template Tensor<T> euclidean_loss<T>(const TipCoords<T>&, const TipCoords<T>&);                     \
  template Tensor<T> js_loss<T>(const Heatmap<T>&, const Heatmap<T>&);                                \
  template LossBreakdown<T> total_loss<T>(const ModelOutput<T>&, const Tensor<T>&, const TipCoords<T>&, \
                                          const LossConfig&);

ICSINET_INSTANTIATE(float)
ICSINET_INSTANTIATE(double)
#undef ICSINET_INSTANTIATE

}  // namespace icsinet
