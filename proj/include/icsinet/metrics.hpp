#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "icsinet/geometry.hpp"

namespace icsinet {

/// Binary mask, row-major, values 0 or 1.
struct Mask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(std::size_t w, std::size_t h) : width(w), height(h), data(w * h, 0) {}
  std::size_t count() const;
  bool operator==(const Mask&) const = default;
};

/// Even-odd scanline fill; pixel (i, j) is set iff its center (i + 0.5, j + 0.5) lies inside.
Mask polygon_to_mask(const Polygon& poly, std::size_t width, std::size_t height);
/// Square convenience overload.
Mask polygon_to_mask(const Polygon& poly, std::size_t size);

/// |a & b| / |a | b|, 1.0 when both are empty.
double iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);
double iou(const Mask& a, const Mask& b);

double tip_distance(Point a, Point b);

/// Class order used throughout: 0 oolemma, 1 pipette.
inline const std::vector<std::string>& class_names() {
  static const std::vector<std::string> names{"oolemma", "pipette"};
  return names;
}

struct AnnotationRecord {
  std::string frame_id;
  std::string operator_id;
  int round = 0;
  std::map<std::string, Polygon> polygons;  // keyed by class name
  Point tip;
  std::size_t image_size = 512;  // square frame used for rasterization
};

enum class AgreementMode { Inter, Intra };

struct Stat {
  double mean = 0.0;
  double stddev = 0.0;  // population
  std::size_t count = 0;
  std::vector<double> values;  // in deterministic pairing order
};

Stat summarize(std::vector<double> values);

struct AgreementReport {
  AgreementMode mode = AgreementMode::Inter;
  std::map<std::string, Stat> iou;  // per class
  Stat tip;
};

/// Inter: every unordered operator pair annotating the same frame in the same round.
/// Intra: every unordered round pair of the same operator on the same frame.
AgreementReport pairwise_agreement(const std::vector<AnnotationRecord>& records, AgreementMode mode);

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};

/// Two-sided Welch two-sample t-test.
WelchResult welch_t_test(std::span<const double> a, std::span<const double> b);

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
};

/// Bins [k*w, (k+1)*w) from 0 through the maximum value.
std::vector<HistogramBin> error_histogram(std::span<const double> distances, double bin_width);
std::string histogram_csv(const std::vector<HistogramBin>& bins);

/// "mean [stddev]" with fixed precision.
std::string mean_std(const Stat& s, int precision = 3);

/// Table layout: rows are the statistics (per-class IoU, tip distance), columns the
/// available modes. When both reports are given, Welch p-values are appended.
std::string agreement_table(const std::optional<AgreementReport>& inter, const std::optional<AgreementReport>& intra);
std::string agreement_csv(const std::optional<AgreementReport>& inter, const std::optional<AgreementReport>& intra);

}  // namespace icsinet
