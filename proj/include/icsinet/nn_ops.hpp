#pragma once

#include <cstddef>
#include <vector>

#include "icsinet/tensor.hpp"

namespace icsinet {

enum class Mode { Train, Eval };

/// Stride-1 "same" convolution parameters. Kernel size is 1 or 3.
template <typename T>
struct ConvParams {
  Tensor<T> weight;  // [out_ch, in_ch, k, k]
  Tensor<T> bias;    // [out_ch]

  /// Zero-filled leaf tensors that require grad.
  static ConvParams create(std::size_t in_channels, std::size_t out_channels, std::size_t kernel);

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t kernel() const { return weight.dim(2); }
};

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;  // [C], initialised to 1
  Tensor<T> beta;   // [C], initialised to 0
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  static BatchNormParams create(std::size_t channels);
  std::size_t channels() const { return gamma.numel(); }
};

/// Per-sample spatial probability map, shape [N, H, W]; each map sums to 1.
template <typename T>
struct Heatmap {
  Tensor<T> values;
};

/// Normalised (x, y) coordinates in [-1, 1], shape [N, 2]. x follows columns.
template <typename T>
struct TipCoords {
  Tensor<T> xy;
};

/// Centre of pixel `index` on an axis of `size` pixels, in normalised units: (2i + 1 - size) / size.
double pixel_to_normalized(double index, std::size_t size);
/// Inverse of pixel_to_normalized.
double normalized_to_pixel(double value, std::size_t size);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p);

/// Train mode normalises with biased batch statistics and updates the running
/// statistics (running variance uses the unbiased estimate). Eval mode reads
/// the running statistics only.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, BatchNormParams<T>& p, Mode mode);

/// 2x2 max pooling; ties route the gradient to the first element in row-major window order.
template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& x);

/// Bilinear 2x upsampling, half-pixel centres, edge clamp.
template <typename T>
Tensor<T> upsample_bilinear2x(const Tensor<T>& x);

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs);

/// Softmax over the spatial positions of a single-channel map [N,1,H,W].
template <typename T>
Heatmap<T> spatial_softmax(const Tensor<T>& logits);

/// Expected grid coordinate under the heatmap.
template <typename T>
TipCoords<T> dsnt(const Heatmap<T>& z);

/// Normalised isotropic Gaussian centred on each tip, sigma in heatmap pixels.
/// The result is a constant (never recorded in the graph).
template <typename T>
Heatmap<T> render_gaussian_target(const TipCoords<T>& tip, std::size_t height, std::size_t width, double sigma);

}  // namespace icsinet
