#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "icsinet/geometry.hpp"
#include "icsinet/random.hpp"

namespace icsinet {

/// 8-bit image, row-major, interleaved channels.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> data;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0);

  void validate() const;
  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c = 0) { return data[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c = 0) const {
    return data[(y * width + x) * channels + c];
  }
  bool operator==(const Image&) const = default;
};

Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);

/// Labeled frame: binary masks [classes][height][width] (0 oolemma, 1 pipette) and
/// the needle tip in index coordinates.
struct Sample {
  Image image;
  std::size_t classes = 2;
  std::vector<std::uint8_t> masks;
  Point tip;
  std::string id;

  void validate() const;
};

std::vector<std::size_t> select_frames(std::size_t frame_count, std::size_t stride = 3);

/// Rec.601 luma, rounded.
Image to_grayscale(const Image& img);

/// Half-pixel centers, edge clamp, round half up.
Image resize_bilinear(const Image& img, std::size_t out_width, std::size_t out_height);

struct ClaheConfig {
  std::size_t tiles = 8;
  double clip_limit = 2.0;  // multiple of the mean bin count; +inf disables clipping
  std::size_t bins = 256;

  void validate() const;
};

Image clahe(const Image& img, const ClaheConfig& cfg = {});

/// Grayscale, resize to size x size, then CLAHE.
Image preprocess(const Image& img, std::size_t size, const ClaheConfig& cfg = {});

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct AugmentConfig {
  bool crop = true;
  Range crop_scale{0.8, 1.0};
  bool rotate = true;
  Range rotation_deg{-15.0, 15.0};
  double hflip_p = 0.5;
  double vflip_p = 0.5;
  bool elastic = true;
  double elastic_p = 0.3;
  double elastic_alpha = 34.0;  // displacement magnitude, pixels
  double elastic_sigma = 4.0;   // smoothing, pixels
  bool optical = true;
  double optical_p = 0.3;
  double distort_limit = 0.05;  // radial coefficient range [-limit, limit]
  bool noise = true;
  double noise_p = 0.5;
  Range noise_std{0.0, 10.0};  // u8 units
  bool erase = true;
  double erase_p = 0.3;
  Range erase_area{0.02, 0.10};
  Range erase_aspect{0.3, 3.3};
  std::uint64_t seed = 0;

  void validate() const;
  /// Every transform switched off.
  static AugmentConfig none();
};

/// Random geometric and photometric augmentation. Geometry is applied identically to
/// image (bilinear), masks (nearest) and tip; draws that push the tip out of frame are
/// resampled up to 10 times before falling back to the unmodified sample.
Sample augment(const Sample& sample, const AugmentConfig& cfg, Rng& rng);

// Exact geometric primitives, exposed for testing.
Sample flip_horizontal(const Sample& s);
Sample flip_vertical(const Sample& s);
/// Rotation about the image center by `degrees` (counterclockwise on screen).
Sample rotate(const Sample& s, double degrees);

}  // namespace icsinet
