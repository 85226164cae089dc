#include "conv_kernels.hpp"

#include <algorithm>
#include <cstring>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace icsinet::kernels {

void pad_planes(const float* src, std::size_t channels, std::size_t h, std::size_t w, float* dst) {
  const std::size_t pw = w + 2, ph = h + 2;
  for (std::size_t c = 0; c < channels; ++c) {
    float* plane = dst + c * ph * pw;
    std::fill_n(plane, pw, 0.0f);
    for (std::size_t y = 0; y < h; ++y) {
      float* row = plane + (y + 1) * pw;
      row[0] = 0.0f;
      std::memcpy(row + 1, src + (c * h + y) * w, w * sizeof(float));
      row[w + 1] = 0.0f;
    }
    std::fill_n(plane + (h + 1) * pw, pw, 0.0f);
  }
}

#if defined(__AVX512F__)

bool direct_conv_available() { return true; }

namespace {
constexpr std::size_t kGradBlock = 2;  // output channels per weight-gradient block

inline __mmask16 lane_mask(std::size_t valid) {
  return valid >= 16 ? __mmask16(0xFFFF) : __mmask16((1u << valid) - 1u);
}

// Register tile: kVecs vectors of 16 columns for each of kOut output channels.
template <std::size_t kVecs, std::size_t kOut>
void forward_tiles(const float* in_pad, std::size_t channels, std::size_t h, std::size_t w, const float* weight,
                   const float* bias, std::size_t out_channels, float* out, bool accumulate) {
  const std::size_t pw = w + 2, ph = h + 2;
  constexpr std::size_t kTile = 16 * kVecs;
  for (std::size_t o0 = 0; o0 < out_channels; o0 += kOut) {
    const std::size_t ob = std::min(kOut, out_channels - o0);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x0 = 0; x0 < w; x0 += kTile) {
        __mmask16 mask[kVecs];
        for (std::size_t v = 0; v < kVecs; ++v) {
          mask[v] = x0 + 16 * v < w ? lane_mask(w - x0 - 16 * v) : __mmask16(0);
        }
        __m512 acc[kOut][kVecs];
        for (std::size_t q = 0; q < kOut; ++q) {
          if (q < ob && accumulate) {
            const float* dst = out + ((o0 + q) * h + y) * w + x0;
            for (std::size_t v = 0; v < kVecs; ++v) acc[q][v] = _mm512_maskz_loadu_ps(mask[v], dst + 16 * v);
          } else {
            const float b = (q < ob && bias) ? bias[o0 + q] : 0.0f;
            for (std::size_t v = 0; v < kVecs; ++v) acc[q][v] = _mm512_set1_ps(b);
          }
        }
        for (std::size_t c = 0; c < channels; ++c) {
          for (std::size_t ky = 0; ky < 3; ++ky) {
            const float* row = in_pad + (c * ph + y + ky) * pw + x0;
            for (std::size_t kx = 0; kx < 3; ++kx) {
              __m512 in[kVecs];
              for (std::size_t v = 0; v < kVecs; ++v) in[v] = _mm512_maskz_loadu_ps(mask[v], row + kx + 16 * v);
              const float* wp = weight + (o0 * channels + c) * 9 + ky * 3 + kx;
              for (std::size_t q = 0; q < kOut; ++q) {
                const __m512 wv = _mm512_set1_ps(q < ob ? wp[q * channels * 9] : 0.0f);
                for (std::size_t v = 0; v < kVecs; ++v) acc[q][v] = _mm512_fmadd_ps(wv, in[v], acc[q][v]);
              }
            }
          }
        }
        for (std::size_t q = 0; q < ob; ++q) {
          float* dst = out + ((o0 + q) * h + y) * w + x0;
          for (std::size_t v = 0; v < kVecs; ++v) _mm512_mask_storeu_ps(dst + 16 * v, mask[v], acc[q][v]);
        }
      }
    }
  }
}

}  // namespace

void conv3x3_forward(const float* in_pad, std::size_t channels, std::size_t h, std::size_t w, const float* weight,
                     const float* bias, std::size_t out_channels, float* out, bool accumulate) {
  if (w <= 16) {
    forward_tiles<1, 16>(in_pad, channels, h, w, weight, bias, out_channels, out, accumulate);
  } else {
    forward_tiles<2, 8>(in_pad, channels, h, w, weight, bias, out_channels, out, accumulate);
  }
}

void conv3x3_weight_grad(const float* in_pad, std::size_t channels, std::size_t h, std::size_t w, const float* dy,
                         std::size_t out_channels, float* dw) {
  const std::size_t pw = w + 2, ph = h + 2;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t o0 = 0; o0 < out_channels; o0 += kGradBlock) {
      const std::size_t ob = std::min(kGradBlock, out_channels - o0);
      __m512 acc[kGradBlock][9];
      for (auto& row : acc) {
        for (auto& a : row) a = _mm512_setzero_ps();
      }
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x0 = 0; x0 < w; x0 += 16) {
          const __mmask16 m = lane_mask(w - x0);
          __m512 g[kGradBlock];
          for (std::size_t q = 0; q < kGradBlock; ++q) {
            g[q] = q < ob ? _mm512_maskz_loadu_ps(m, dy + ((o0 + q) * h + y) * w + x0) : _mm512_setzero_ps();
          }
          for (std::size_t ky = 0; ky < 3; ++ky) {
            const float* row = in_pad + (c * ph + y + ky) * pw + x0;
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const __m512 v = _mm512_maskz_loadu_ps(m, row + kx);
              for (std::size_t q = 0; q < kGradBlock; ++q) {
                acc[q][ky * 3 + kx] = _mm512_fmadd_ps(g[q], v, acc[q][ky * 3 + kx]);
              }
            }
          }
        }
      }
      for (std::size_t q = 0; q < ob; ++q) {
        for (std::size_t t = 0; t < 9; ++t) dw[((o0 + q) * channels + c) * 9 + t] += _mm512_reduce_add_ps(acc[q][t]);
      }
    }
  }
}

#else

bool direct_conv_available() { return false; }

void conv3x3_forward(const float*, std::size_t, std::size_t, std::size_t, const float*, const float*, std::size_t,
                     float*, bool) {}
void conv3x3_weight_grad(const float*, std::size_t, std::size_t, std::size_t, const float*, std::size_t, float*) {}

#endif

}  // namespace icsinet::kernels
