#pragma once

#include <cstddef>

// Direct 3x3 "same" convolution kernels for float NCHW planes of one sample.
// Padded inputs carry a one-pixel zero border: [C][H+2][W+2].
namespace icsinet::kernels {

bool direct_conv_available();

void pad_planes(const float* src, std::size_t channels, std::size_t h, std::size_t w, float* dst);

/// out[O][H][W] = bias + conv(in_pad, w). With accumulate, adds into out and ignores bias.
void conv3x3_forward(const float* in_pad, std::size_t channels, std::size_t h, std::size_t w, const float* weight,
                     const float* bias, std::size_t out_channels, float* out, bool accumulate);

/// dw[O][C][3][3] += correlation of dy[O][H][W] with in_pad.
void conv3x3_weight_grad(const float* in_pad, std::size_t channels, std::size_t h, std::size_t w, const float* dy,
                         std::size_t out_channels, float* dw);

}  // namespace icsinet::kernels
