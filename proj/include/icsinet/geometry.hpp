#pragma once

#include <vector>

namespace icsinet {

/// Planar point in pixels. Polygon vertices use corner coordinates (pixel i spans
/// [i, i+1)); tip points use index coordinates (pixel i is centered on i).
struct Point {
  double x = 0.0;
  double y = 0.0;
};

using Polygon = std::vector<Point>;

}  // namespace icsinet
