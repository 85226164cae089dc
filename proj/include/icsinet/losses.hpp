#pragma once

#include "icsinet/model.hpp"
#include "icsinet/nn_ops.hpp"
#include "icsinet/tensor.hpp"

namespace icsinet {

struct LossConfig {
  double lambda1 = 1.0;  // weight of the coordinate (Euclidean) term
  double lambda2 = 1.0;  // weight of the heatmap (Jensen-Shannon) term
  double sigma = 1.0;    // Gaussian target stddev, heatmap pixels
  double dice_smooth = 1.0;

  void validate() const;
};

/// Mean over batch and classes of 1 - (2*sum(p*t) + smooth) / (sum(p) + sum(t) + smooth).
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, const Tensor<T>& target, double smooth);

/// Mean over the batch of the Euclidean distance between coordinate pairs.
/// The gradient at zero distance is defined as 0.
template <typename T>
Tensor<T> euclidean_loss(const TipCoords<T>& pred, const TipCoords<T>& target);

/// Mean over the batch of JS(P, Q) in nats; differentiable in `z` only.
template <typename T>
Tensor<T> js_loss(const Heatmap<T>& z, const Heatmap<T>& target);

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  double seg = 0.0;
  double euc = 0.0;
  double js = 0.0;
};

/// seg + lambda1 * euc + lambda2 * js against a Gaussian rendered around gt_tip.
template <typename T>
LossBreakdown<T> total_loss(const ModelOutput<T>& out, const Tensor<T>& gt_masks, const TipCoords<T>& gt_tip,
                            const LossConfig& cfg);

}  // namespace icsinet
