#pragma once

#include <cmath>
#include <vector>

#include "icsinet/metrics.hpp"
#include "icsinet/random.hpp"

namespace fixtures {

using icsinet::AnnotationRecord;
using icsinet::Point;
using icsinet::Polygon;

inline Polygon rect(double x0, double y0, double x1, double y1) { return {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}}; }

/// Two operators, three rounds, one 8x8 frame.
///
/// Operator A draws the same oolemma square [0,4)^2 and tip (1,1) every round.
/// Operator B draws [0,4)^2, [0,4)x[0,2), [0,2)^2 with tips (1,1), (4,5), (1,4).
/// The pipette is identical everywhere.
///
/// Inter pairs (A_r, B_r): oolemma IoU {1, 1/2, 1/4}, tip distance {0, 5, 3}.
/// Intra pairs: A gives IoU 1 and distance 0 three times; B gives
/// IoU {1/2, 1/4, 1/2} and distance {5, 3, sqrt(10)}.
inline std::vector<AnnotationRecord> two_operator_records() {
  const Polygon pipette = rect(5, 5, 8, 8);
  const Polygon b_oolemma[3] = {rect(0, 0, 4, 4), rect(0, 0, 4, 2), rect(0, 0, 2, 2)};
  const Point b_tip[3] = {{1, 1}, {4, 5}, {1, 4}};
  std::vector<AnnotationRecord> out;
  for (int r = 1; r <= 3; ++r) {
    out.push_back({"frame0", "A", r, {{"oolemma", rect(0, 0, 4, 4)}, {"pipette", pipette}}, {1, 1}, 8});
    out.push_back({"frame0", "B", r, {{"oolemma", b_oolemma[r - 1]}, {"pipette", pipette}}, b_tip[r - 1], 8});
  }
  return out;
}

struct Expected {
  double mean, stddev;
};

inline Expected population(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x;
  m /= double(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / double(v.size()))};
}

// Hand-computed values of the fixture above.
inline const Expected kInterOolemma{7.0 / 12.0, std::sqrt(7.0 / 72.0)};
inline const Expected kInterTip{8.0 / 3.0, std::sqrt(38.0 / 9.0)};
inline const Expected kIntraOolemma{17.0 / 24.0, std::sqrt(53.0 / 576.0)};

/// Brute-force crossing test against the polygon edges, evaluated at a pixel center.
inline bool inside_convex(const Polygon& p, double x, double y) {
  bool pos = false, neg = false;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Point& a = p[i];
    const Point& b = p[(i + 1) % p.size()];
    const double cross = (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
    if (cross > 0) pos = true;
    if (cross < 0) neg = true;
  }
  return !(pos && neg);
}

/// Random convex polygon: sorted angles on a jittered ellipse.
inline Polygon random_convex(icsinet::Rng& rng, double size) {
  const std::size_t n = 3 + std::size_t(icsinet::uniform01(rng) * 8);
  std::vector<double> angles(n);
  for (auto& a : angles) a = icsinet::uniform(rng, 0.0, 2.0 * M_PI);
  std::sort(angles.begin(), angles.end());
  const double cx = icsinet::uniform(rng, 0.3, 0.7) * size, cy = icsinet::uniform(rng, 0.3, 0.7) * size;
  const double rx = icsinet::uniform(rng, 0.1, 0.5) * size, ry = icsinet::uniform(rng, 0.1, 0.5) * size;
  Polygon p;
  for (double a : angles) p.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
  return p;
}

}  // namespace fixtures
