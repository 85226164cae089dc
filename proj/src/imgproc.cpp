#include "icsinet/imgproc.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "icsinet/errors.hpp"

namespace icsinet {

Image::Image(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill)
    : width(w), height(h), channels(c), data(w * h * c, fill) {
  validate();
}

void Image::validate() const {
  if (channels != 1 && channels != 3) {
    throw InputError("image must have 1 or 3 channels, got " + std::to_string(channels));
  }
  if (data.size() != width * height * channels) {
    throw InputError("image data holds " + std::to_string(data.size()) + " bytes, expected " +
                     std::to_string(width * height * channels));
  }
}

void Sample::validate() const {
  image.validate();
  if (masks.size() != classes * image.width * image.height) {
    throw InputError("sample " + id + ": mask size does not match the image");
  }
}

Image read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + png.message);
  }
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image img;
  img.width = png.width;
  img.height = png.height;
  img.channels = color ? 3 : 1;
  img.data.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.data.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError("cannot decode PNG " + path.string() + ": " + msg);
  }
  return img;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  img.validate();
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, img.data.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + png.message);
  }
}

std::vector<std::size_t> select_frames(std::size_t frame_count, std::size_t stride) {
  if (stride < 1) throw ConfigError("select_frames: stride must be >= 1");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < frame_count; i += stride) out.push_back(i);
  return out;
}

namespace {
std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0)); }
}  // namespace

Image to_grayscale(const Image& img) {
  img.validate();
  if (img.channels == 1) return img;
  Image out(img.width, img.height, 1);
  for (std::size_t i = 0; i < img.width * img.height; ++i) {
    const auto* px = &img.data[i * 3];
    out.data[i] = to_u8(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
  }
  return out;
}

Image resize_bilinear(const Image& img, std::size_t out_width, std::size_t out_height) {
  img.validate();
  if (out_width < 1 || out_height < 1) throw ConfigError("resize_bilinear: output size must be positive");
  if (out_width == img.width && out_height == img.height) return img;
  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = double(in) / double(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double src = std::clamp((o + 0.5) * scale - 0.5, 0.0, double(in - 1));
      const auto i0 = static_cast<std::size_t>(src);
      t[o] = {i0, std::min(i0 + 1, in - 1), src - double(i0)};
    }
    return t;
  };
  const auto tx = taps(img.width, out_width);
  const auto ty = taps(img.height, out_height);
  Image out(out_width, out_height, img.channels);
  for (std::size_t y = 0; y < out_height; ++y) {
    for (std::size_t x = 0; x < out_width; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = img.at(tx[x].i0, ty[y].i0, c) * (1 - tx[x].f) + img.at(tx[x].i1, ty[y].i0, c) * tx[x].f;
        const double bot = img.at(tx[x].i0, ty[y].i1, c) * (1 - tx[x].f) + img.at(tx[x].i1, ty[y].i1, c) * tx[x].f;
        out.at(x, y, c) = to_u8(top * (1 - ty[y].f) + bot * ty[y].f);
      }
    }
  }
  return out;
}

void ClaheConfig::validate() const {
  if (!(clip_limit > 0.0)) throw ConfigError("clahe: clip_limit must be > 0");
  if (tiles < 1) throw ConfigError("clahe: tiles must be >= 1");
  if (bins < 2 || bins > 256) throw ConfigError("clahe: bins must be in [2, 256]");
}

namespace {

std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * n - 2);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < static_cast<std::ptrdiff_t>(n) ? i : period - i);
}

}  // namespace

Image clahe(const Image& img, const ClaheConfig& cfg) {
  cfg.validate();
  img.validate();
  if (img.channels != 1) throw InputError("clahe: expected a single-channel image");
  const std::size_t T = cfg.tiles;
  const std::size_t tw = (img.width + T - 1) / T, th = (img.height + T - 1) / T;
  const std::size_t bins = cfg.bins;
  const double n = double(tw * th);
  auto bin_of = [bins](std::uint8_t v) { return std::size_t(v) * bins / 256; };

  // Per-tile lookup tables over the reflection-padded image.
  std::vector<double> lut(T * T * 256);
  std::vector<double> hist(bins);
  for (std::size_t ty = 0; ty < T; ++ty) {
    for (std::size_t tx = 0; tx < T; ++tx) {
      std::fill(hist.begin(), hist.end(), 0.0);
      for (std::size_t y = ty * th; y < (ty + 1) * th; ++y) {
        const std::size_t sy = reflect(std::ptrdiff_t(y), img.height);
        for (std::size_t x = tx * tw; x < (tx + 1) * tw; ++x) {
          hist[bin_of(img.at(reflect(std::ptrdiff_t(x), img.width), sy))] += 1.0;
        }
      }
      if (std::isfinite(cfg.clip_limit)) {
        const double limit = std::max(1.0, cfg.clip_limit * n / double(bins));
        double excess = 0.0;
        for (auto& h : hist) {
          if (h > limit) {
            excess += h - limit;
            h = limit;
          }
        }
        for (auto& h : hist) h += excess / double(bins);
      }
      // Midpoint CDF: each bin maps to the center of its rank interval.
      double* table = &lut[(ty * T + tx) * 256];
      std::vector<double> bin_value(bins);
      double below = 0.0;
      for (std::size_t b = 0; b < bins; ++b) {
        bin_value[b] = 255.0 * (below + 0.5 * hist[b]) / n;
        below += hist[b];
      }
      for (std::size_t v = 0; v < 256; ++v) table[v] = bin_value[bin_of(std::uint8_t(v))];
    }
  }

  Image out(img.width, img.height, 1);
  for (std::size_t y = 0; y < img.height; ++y) {
    const double fy = (double(y) + 0.5) / double(th) - 0.5;
    const auto y0 = static_cast<std::ptrdiff_t>(std::floor(fy));
    const double wy = fy - double(y0);
    const std::size_t ty0 = std::size_t(std::clamp<std::ptrdiff_t>(y0, 0, T - 1));
    const std::size_t ty1 = std::size_t(std::clamp<std::ptrdiff_t>(y0 + 1, 0, T - 1));
    for (std::size_t x = 0; x < img.width; ++x) {
      const double fx = (double(x) + 0.5) / double(tw) - 0.5;
      const auto x0 = static_cast<std::ptrdiff_t>(std::floor(fx));
      const double wx = fx - double(x0);
      const std::size_t tx0 = std::size_t(std::clamp<std::ptrdiff_t>(x0, 0, T - 1));
      const std::size_t tx1 = std::size_t(std::clamp<std::ptrdiff_t>(x0 + 1, 0, T - 1));
      const std::uint8_t v = img.at(x, y);
      auto m = [&](std::size_t ty, std::size_t tx) { return lut[(ty * T + tx) * 256 + v]; };
      const double top = m(ty0, tx0) * (1 - wx) + m(ty0, tx1) * wx;
      const double bot = m(ty1, tx0) * (1 - wx) + m(ty1, tx1) * wx;
      out.at(x, y) = to_u8(top * (1 - wy) + bot * wy);
    }
  }
  return out;
}

Image preprocess(const Image& img, std::size_t size, const ClaheConfig& cfg) {
  return clahe(resize_bilinear(to_grayscale(img), size, size), cfg);
}

}  // namespace icsinet
