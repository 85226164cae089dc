#include "icsinet/nn_ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <type_traits>

#include "conv_kernels.hpp"

namespace icsinet {

namespace {

// Row-major C = alpha * op(A) * op(B) + beta * C.
void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda, const float* b,
          int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n, k,
              alpha, a, lda, b, ldb, beta, c, ldc);
}

void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda, const double* b,
          int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n, k,
              alpha, a, lda, b, ldb, beta, c, ldc);
}

void require_nchw(const char* op, const Shape& s) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected NCHW tensor, got " + shape_str(s));
}

// cols: [C*9, H*W] for a 3x3 window with zero padding.
template <typename T>
void im2col3x3(const T* x, std::size_t channels, std::size_t h, std::size_t w, T* cols) {
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = x + c * hw;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        T* row = cols + ((c * 3 + ky) * 3 + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          T* dst = row + y * w;
          const long sy = static_cast<long>(y + ky) - 1;
          if (sy < 0 || sy >= static_cast<long>(h)) {
            std::fill_n(dst, w, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(sy) * w;
          if (kx == 0) {
            dst[0] = T{0};
            std::copy_n(src, w - 1, dst + 1);
          } else if (kx == 1) {
            std::copy_n(src, w, dst);
          } else {
            std::copy_n(src + 1, w - 1, dst);
            dst[w - 1] = T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im3x3_add(const T* cols, std::size_t channels, std::size_t h, std::size_t w, T* dx) {
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = dx + c * hw;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const T* row = cols + ((c * 3 + ky) * 3 + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y + ky) - 1;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          const T* src = row + y * w;
          T* dst = plane + static_cast<std::size_t>(sy) * w;
          if (kx == 0) {
            for (std::size_t x = 1; x < w; ++x) dst[x - 1] += src[x];
          } else if (kx == 1) {
            for (std::size_t x = 0; x < w; ++x) dst[x] += src[x];
          } else {
            for (std::size_t x = 0; x + 1 < w; ++x) dst[x + 1] += src[x];
          }
        }
      }
    }
  }
}

struct AxisSample {
  std::size_t i0, i1;
  double w1;  // weight of i1
};

// Half-pixel-centre 2x upsampling taps for one axis.
std::vector<AxisSample> upsample_taps(std::size_t in_size) {
  std::vector<AxisSample> taps(in_size * 2);
  const double max_coord = static_cast<double>(in_size - 1);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    const double src = std::clamp((static_cast<double>(o) + 0.5) / 2.0 - 0.5, 0.0, max_coord);
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in_size - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

double pixel_to_normalized(double index, std::size_t size) {
  const auto s = static_cast<double>(size);
  return (2.0 * index + 1.0 - s) / s;
}

double normalized_to_pixel(double value, std::size_t size) {
  const auto s = static_cast<double>(size);
  return (value * s + s - 1.0) / 2.0;
}

template <typename T>
ConvParams<T> ConvParams<T>::create(std::size_t in_channels, std::size_t out_channels, std::size_t kernel) {
  if (kernel != 1 && kernel != 3) throw ContractError("conv kernel must be 1 or 3");
  ConvParams p;
  p.weight = Tensor<T>({out_channels, in_channels, kernel, kernel}, T{0}, true);
  p.bias = Tensor<T>({out_channels}, T{0}, true);
  return p;
}

template <typename T>
BatchNormParams<T> BatchNormParams<T>::create(std::size_t channels) {
  BatchNormParams p;
  p.gamma = Tensor<T>({channels}, T{1}, true);
  p.beta = Tensor<T>({channels}, T{0}, true);
  p.running_mean.assign(channels, T{0});
  p.running_var.assign(channels, T{1});
  return p;
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
bool use_direct_kernel(std::size_t k) {
  if constexpr (std::is_same_v<T, float>) {
    return k == 3 && kernels::direct_conv_available();
  } else {
    return false;
  }
}

// im2col + GEMM path, used for double precision, 1x1 kernels and non-AVX-512 builds.
template <typename T>
void conv_forward_gemm(const T* xin, std::size_t cin, std::size_t h, std::size_t w, const T* weight,
                       const T* bias, std::size_t cout, std::size_t k, T* y, std::vector<T>& cols) {
  const std::size_t hw = h * w, rows = cin * k * k;
  for (std::size_t o = 0; o < cout; ++o) std::fill_n(y + o * hw, hw, bias[o]);
  const T* src = xin;
  if (k == 3) {
    cols.resize(rows * hw);
    im2col3x3(xin, cin, h, w, cols.data());
    src = cols.data();
  }
  gemm(false, false, int(cout), int(hw), int(rows), T{1}, weight, int(rows), src, int(hw), T{1}, y, int(hw));
}

template <typename T>
void conv_backward_gemm(const T* xin, const T* dy, std::size_t cin, std::size_t h, std::size_t w, const T* weight,
                        std::size_t cout, std::size_t k, T* dw, T* dx, std::vector<T>& buf) {
  const std::size_t hw = h * w, rows = cin * k * k;
  if (dw) {
    const T* src = xin;
    if (k == 3) {
      buf.resize(rows * hw);
      im2col3x3(xin, cin, h, w, buf.data());
      src = buf.data();
    }
    gemm(false, true, int(cout), int(rows), int(hw), T{1}, dy, int(hw), src, int(hw), T{1}, dw, int(rows));
  }
  if (dx) {
    if (k == 1) {
      gemm(true, false, int(cin), int(hw), int(cout), T{1}, weight, int(cin), dy, int(hw), T{1}, dx, int(hw));
    } else {
      buf.resize(rows * hw);
      gemm(true, false, int(rows), int(hw), int(cout), T{1}, weight, int(rows), dy, int(hw), T{0}, buf.data(),
           int(hw));
      col2im3x3_add(buf.data(), cin, h, w, dx);
    }
  }
}

// Weights for the input gradient as a forward convolution: wt[c][o][ky][kx] = w[o][c][2-ky][2-kx].
std::vector<float> flip_transpose3x3(const float* w, std::size_t cout, std::size_t cin) {
  std::vector<float> wt(cout * cin * 9);
  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t t = 0; t < 9; ++t) wt[(c * cout + o) * 9 + (8 - t)] = w[(o * cin + c) * 9 + t];
    }
  }
  return wt;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
  require_nchw("conv2d", x.shape());
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = p.out_channels(), k = p.kernel();
  if (p.in_channels() != cin) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(p.weight.shape()));
  }
  if (k != 1 && k != 3) throw ShapeError("conv2d: unsupported kernel " + shape_str(p.weight.shape()));
  if (p.bias.numel() != cout) {
    throw ShapeError("conv2d: bias " + shape_str(p.bias.shape()) + " does not match weight " +
                     shape_str(p.weight.shape()));
  }
  const std::size_t hw = h * w;
  const bool direct = use_direct_kernel<T>(k);

  const auto xs = x.data();
  const auto ws = p.weight.data();
  const auto bs = p.bias.data();
  std::vector<T> out(n * cout * hw);
  std::vector<T> scratch;
  for (std::size_t b = 0; b < n; ++b) {
    const T* xin = xs.data() + b * cin * hw;
    T* y = out.data() + b * cout * hw;
    if constexpr (std::is_same_v<T, float>) {
      if (direct) {
        scratch.resize(cin * (h + 2) * (w + 2));
        kernels::pad_planes(xin, cin, h, w, scratch.data());
        kernels::conv3x3_forward(scratch.data(), cin, h, w, ws.data(), bs.data(), cout, y, false);
        continue;
      }
    }
    conv_forward_gemm(xin, cin, h, w, ws.data(), bs.data(), cout, k, y, scratch);
  }

  return make_result<T>({n, cout, h, w}, std::move(out), {x, p.weight, p.bias}, [=](detail::Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    auto& bn = *self.parents[2];
    const T* dy_all = self.grad.data();
    T* dw = wn.requires_grad ? wn.ensure_grad().data() : nullptr;
    T* dx_all = xn.requires_grad ? xn.ensure_grad().data() : nullptr;
    std::vector<T> buf, dy_pad;
    [[maybe_unused]] std::vector<float> wt;
    if constexpr (std::is_same_v<T, float>) {
      if (direct && dx_all) wt = flip_transpose3x3(wn.data.data(), cout, cin);
    }
    for (std::size_t b = 0; b < n; ++b) {
      const T* dy = dy_all + b * cout * hw;
      const T* xin = xn.data.data() + b * cin * hw;
      T* dx = dx_all ? dx_all + b * cin * hw : nullptr;
      if (bn.requires_grad) {
        auto& g = bn.ensure_grad();
        for (std::size_t o = 0; o < cout; ++o) {
          T acc{0};
          for (std::size_t i = 0; i < hw; ++i) acc += dy[o * hw + i];
          g[o] += acc;
        }
      }
      if constexpr (std::is_same_v<T, float>) {
        if (direct) {
          if (dw) {
            buf.resize(cin * (h + 2) * (w + 2));
            kernels::pad_planes(xin, cin, h, w, buf.data());
            kernels::conv3x3_weight_grad(buf.data(), cin, h, w, dy, cout, dw);
          }
          if (dx) {
            dy_pad.resize(cout * (h + 2) * (w + 2));
            kernels::pad_planes(dy, cout, h, w, dy_pad.data());
            kernels::conv3x3_forward(dy_pad.data(), cout, h, w, wt.data(), nullptr, cin, dx, true);
          }
          continue;
        }
      }
      conv_backward_gemm(xin, dy, cin, h, w, wn.data.data(), cout, k, dw, dx, buf);
    }
  });
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, BatchNormParams<T>& p, Mode mode) {
  require_nchw("batchnorm2d", x.shape());
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (p.channels() != c) {
    throw ShapeError("batchnorm2d: input " + shape_str(x.shape()) + " has " + std::to_string(c) +
                     " channels, parameters have " + std::to_string(p.channels()));
  }
  const std::size_t m = n * hw;
  if (mode == Mode::Train && m < 2) {
    throw ContractError("batchnorm2d: train mode needs at least two values per channel, got input " +
                        shape_str(x.shape()));
  }

  const auto xs = x.data();
  const auto gamma = p.gamma.data();
  const auto beta = p.beta.data();
  auto xhat = std::make_shared<std::vector<T>>(xs.size());
  auto inv_std = std::make_shared<std::vector<T>>(c);
  std::vector<T> out(xs.size());

  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (mode == Mode::Train) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* src = xs.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += src[i];
      }
      const double mean = s / double(m);
      double sq = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* src = xs.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = src[i] - mean;
          sq += d * d;
        }
      }
      mu = T(mean);
      var = T(sq / double(m));
      p.running_mean[ch] = (T{1} - p.momentum) * p.running_mean[ch] + p.momentum * mu;
      p.running_var[ch] = (T{1} - p.momentum) * p.running_var[ch] + p.momentum * T(sq / double(m - 1));
    } else {
      mu = p.running_mean[ch];
      var = p.running_var[ch];
    }
    const T is = T{1} / std::sqrt(var + p.eps);
    (*inv_std)[ch] = is;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = (xs[off + i] - mu) * is;
        (*xhat)[off + i] = xh;
        out[off + i] = gamma[ch] * xh + beta[ch];
      }
    }
  }

  const bool train = mode == Mode::Train;
  return make_result<T>(x.shape(), std::move(out), {x, p.gamma, p.beta}, [=](detail::Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& gn = *self.parents[1];
    auto& bn = *self.parents[2];
    const auto& dy = self.grad;
    for (std::size_t ch = 0; ch < c; ++ch) {
      T sum_dy{0}, sum_dy_xhat{0};
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          sum_dy += dy[off + i];
          sum_dy_xhat += dy[off + i] * (*xhat)[off + i];
        }
      }
      if (gn.requires_grad) gn.ensure_grad()[ch] += sum_dy_xhat;
      if (bn.requires_grad) bn.ensure_grad()[ch] += sum_dy;
      if (!xn.requires_grad) continue;
      auto& dx = xn.ensure_grad();
      const T g = gn.data[ch];
      const T is = (*inv_std)[ch];
      if (train) {
        const T inv_m = T{1} / T(m);
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t off = (b * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            dx[off + i] += g * is * (dy[off + i] - inv_m * sum_dy - (*xhat)[off + i] * inv_m * sum_dy_xhat);
          }
        }
      } else {
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t off = (b * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) dx[off + i] += g * is * dy[off + i];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& x) {
  require_nchw("maxpool2x2", x.shape());
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ShapeError("maxpool2x2: spatial dims must be even, got " + shape_str(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  const auto xs = x.data();
  std::vector<T> out(n * c * oh * ow);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t in_off = plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t base = in_off + 2 * oy * w + 2 * ox;
        const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
        std::size_t best = cand[0];
        for (int q = 1; q < 4; ++q) {
          if (xs[cand[q]] > xs[best]) best = cand[q];
        }
        const std::size_t o = plane * oh * ow + oy * ow + ox;
        out[o] = xs[best];
        (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return make_result<T>({n, c, oh, ow}, std::move(out), {x}, [argmax](detail::Node<T>& self) {
    auto& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t o = 0; o < self.grad.size(); ++o) g[(*argmax)[o]] += self.grad[o];
  });
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> upsample_bilinear2x(const Tensor<T>& x) {
  require_nchw("upsample_bilinear2x", x.shape());
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = 2 * h, ow = 2 * w;
  auto ty = std::make_shared<std::vector<AxisSample>>(upsample_taps(h));
  auto tx = std::make_shared<std::vector<AxisSample>>(upsample_taps(w));
  const auto xs = x.data();
  std::vector<T> out(n * c * oh * ow);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = xs.data() + plane * h * w;
    T* dst = out.data() + plane * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const auto& sy = (*ty)[oy];
      const T wy1 = T(sy.w1), wy0 = T{1} - wy1;
      const T* r0 = src + sy.i0 * w;
      const T* r1 = src + sy.i1 * w;
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const auto& sx = (*tx)[ox];
        const T wx1 = T(sx.w1), wx0 = T{1} - wx1;
        dst[oy * ow + ox] = wy0 * (wx0 * r0[sx.i0] + wx1 * r0[sx.i1]) + wy1 * (wx0 * r1[sx.i0] + wx1 * r1[sx.i1]);
      }
    }
  }
  return make_result<T>({n, c, oh, ow}, std::move(out), {x}, [=](detail::Node<T>& self) {
    auto& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      T* dst = g.data() + plane * h * w;
      const T* dy = self.grad.data() + plane * oh * ow;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        const auto& sy = (*ty)[oy];
        const T wy1 = T(sy.w1), wy0 = T{1} - wy1;
        T* r0 = dst + sy.i0 * w;
        T* r1 = dst + sy.i1 * w;
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const auto& sx = (*tx)[ox];
          const T wx1 = T(sx.w1), wx0 = T{1} - wx1;
          const T gv = dy[oy * ow + ox];
          r0[sx.i0] += gv * wy0 * wx0;
          r0[sx.i1] += gv * wy0 * wx1;
          r1[sx.i0] += gv * wy1 * wx0;
          r1[sx.i1] += gv * wy1 * wx1;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ContractError("concat_channels: no inputs");
  for (const auto& t : xs) require_nchw("concat_channels", t.shape());
  const std::size_t n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& t : xs) {
    if (t.dim(0) != n || t.dim(2) != h || t.dim(3) != w) {
      throw ShapeError("concat_channels: " + shape_str(t.shape()) + " does not match " +
                       shape_str(xs[0].shape()) + " outside the channel axis");
    }
    widths.push_back(t.dim(1));
    total += t.dim(1);
  }
  const std::size_t hw = h * w;
  std::vector<T> out(n * total * hw);
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t c0 = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      const auto src = xs[k].data();
      std::copy_n(src.data() + b * widths[k] * hw, widths[k] * hw, out.data() + (b * total + c0) * hw);
      c0 += widths[k];
    }
  }
  return make_result<T>({n, total, h, w}, std::move(out), xs, [=](detail::Node<T>& self) {
    for (std::size_t b = 0; b < n; ++b) {
      std::size_t c0 = 0;
      for (std::size_t k = 0; k < widths.size(); ++k) {
        auto& in = *self.parents[k];
        if (in.requires_grad) {
          T* dst = in.ensure_grad().data() + b * widths[k] * hw;
          const T* src = self.grad.data() + (b * total + c0) * hw;
          for (std::size_t i = 0; i < widths[k] * hw; ++i) dst[i] += src[i];
        }
        c0 += widths[k];
      }
    }
  });
}

// ---------------------------------------------------------------------------

template <typename T>
Heatmap<T> spatial_softmax(const Tensor<T>& logits) {
  require_nchw("spatial_softmax", logits.shape());
  if (logits.dim(1) != 1) {
    throw ShapeError("spatial_softmax: expected a single channel, got " + shape_str(logits.shape()));
  }
  const std::size_t n = logits.dim(0), h = logits.dim(2), w = logits.dim(3), hw = h * w;
  const auto xs = logits.data();
  std::vector<T> out(n * hw);
  for (std::size_t b = 0; b < n; ++b) {
    const T* src = xs.data() + b * hw;
    T* dst = out.data() + b * hw;
    const T mx = *std::max_element(src, src + hw);
    double total = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      dst[i] = std::exp(src[i] - mx);
      total += dst[i];
    }
    const T inv = T(1.0 / total);
    for (std::size_t i = 0; i < hw; ++i) dst[i] *= inv;
  }
  auto z = make_result<T>({n, h, w}, std::move(out), {logits}, [n, hw](detail::Node<T>& self) {
    auto& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = self.data.data() + b * hw;
      const T* dy = self.grad.data() + b * hw;
      T dot{0};
      for (std::size_t i = 0; i < hw; ++i) dot += p[i] * dy[i];
      for (std::size_t i = 0; i < hw; ++i) g[b * hw + i] += p[i] * (dy[i] - dot);
    }
  });
  return {z};
}

template <typename T>
TipCoords<T> dsnt(const Heatmap<T>& z) {
  const auto& s = z.values.shape();
  if (s.size() != 3) throw ShapeError("dsnt: expected heatmap [N,H,W], got " + shape_str(s));
  const std::size_t n = s[0], h = s[1], w = s[2];
  auto gx = std::make_shared<std::vector<T>>(w);
  auto gy = std::make_shared<std::vector<T>>(h);
  for (std::size_t j = 0; j < w; ++j) (*gx)[j] = T(pixel_to_normalized(double(j), w));
  for (std::size_t i = 0; i < h; ++i) (*gy)[i] = T(pixel_to_normalized(double(i), h));

  const auto zs = z.values.data();
  std::vector<T> out(n * 2);
  for (std::size_t b = 0; b < n; ++b) {
    T x{0}, y{0};
    for (std::size_t i = 0; i < h; ++i) {
      const T* row = zs.data() + (b * h + i) * w;
      T row_mass{0};
      for (std::size_t j = 0; j < w; ++j) {
        x += row[j] * (*gx)[j];
        row_mass += row[j];
      }
      y += row_mass * (*gy)[i];
    }
    out[2 * b] = x;
    out[2 * b + 1] = y;
  }
  auto xy = make_result<T>({n, 2}, std::move(out), {z.values}, [=](detail::Node<T>& self) {
    auto& in = *self.parents[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t b = 0; b < n; ++b) {
      const T dx = self.grad[2 * b], dy = self.grad[2 * b + 1];
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) g[(b * h + i) * w + j] += dx * (*gx)[j] + dy * (*gy)[i];
      }
    }
  });
  return {xy};
}

template <typename T>
Heatmap<T> render_gaussian_target(const TipCoords<T>& tip, std::size_t height, std::size_t width, double sigma) {
  if (sigma <= 0.0) throw ContractError("render_gaussian_target: sigma must be positive");
  const auto& s = tip.xy.shape();
  if (s.size() != 2 || s[1] != 2) throw ShapeError("render_gaussian_target: expected tips [N,2], got " + shape_str(s));
  const std::size_t n = s[0];
  const auto xy = tip.xy.data();
  std::vector<T> out(n * height * width);
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t b = 0; b < n; ++b) {
    const double cx = normalized_to_pixel(double(xy[2 * b]), width);
    const double cy = normalized_to_pixel(double(xy[2 * b + 1]), height);
    std::vector<double> vals(height * width);
    double total = 0.0;
    for (std::size_t i = 0; i < height; ++i) {
      for (std::size_t j = 0; j < width; ++j) {
        const double dx = double(j) - cx, dy = double(i) - cy;
        const double v = std::exp(-(dx * dx + dy * dy) * inv2s2);
        vals[i * width + j] = v;
        total += v;
      }
    }
    if (!(total > 0.0)) throw ContractError("render_gaussian_target: target underflowed; tip far outside grid");
    for (std::size_t k = 0; k < vals.size(); ++k) out[b * height * width + k] = T(vals[k] / total);
  }
  return {Tensor<T>({n, height, width}, std::move(out))};
}

#define ICSINET_INSTANTIATE(T)                                                                           \
  template struct ConvParams<T>;                                                                         \
  template struct BatchNormParams<T>;                                                                    \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const ConvParams<T>&);                                  \
  template Tensor<T> batchnorm2d<T>(const Tensor<T>&, BatchNormParams<T>&, Mode);                        \
  template Tensor<T> maxpool2x2<T>(const Tensor<T>&);                                                    \
  template Tensor<T> upsample_bilinear2x<T>(const Tensor<T>&);                                           \
  template Tensor<T> concat_channels<T>(const std::vector<Tensor<T>>&);                                  \
  template Heatmap<T> spatial_softmax<T>(const Tensor<T>&);                                              \
  template TipCoords<T> dsnt<T>(const Heatmap<T>&);                                                      \
  template Heatmap<T> render_gaussian_target<T>(const TipCoords<T>&, std::size_t, std::size_t, double);

ICSINET_INSTANTIATE(float)
ICSINET_INSTANTIATE(double)
#undef ICSINET_INSTANTIATE

}  // namespace icsinet
