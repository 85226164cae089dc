#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>

#include "icsinet/errors.hpp"
#include "icsinet/imgproc.hpp"

namespace icsinet {

void AugmentConfig::validate() const {
  auto range = [](const Range& r, const char* name, double min, double max) {
    if (!(r.lo <= r.hi) || r.lo < min || r.hi > max) {
      throw ConfigError(std::string("augment: invalid range for ") + name);
    }
  };
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("augment: probability out of [0,1] for ") + name);
  };
  range(crop_scale, "crop_scale", 1e-3, 1.0);
  range(rotation_deg, "rotation_deg", -360.0, 360.0);
  range(noise_std, "noise_std", 0.0, 255.0);
  range(erase_area, "erase_area", 0.0, 1.0);
  range(erase_aspect, "erase_aspect", 1e-3, 1e3);
  prob(hflip_p, "hflip_p");
  prob(vflip_p, "vflip_p");
  prob(elastic_p, "elastic_p");
  prob(optical_p, "optical_p");
  prob(noise_p, "noise_p");
  prob(erase_p, "erase_p");
  if (elastic_alpha < 0.0 || !(elastic_sigma > 0.0)) throw ConfigError("augment: elastic alpha/sigma invalid");
  if (!(distort_limit >= 0.0 && distort_limit < 1.0)) throw ConfigError("augment: distort_limit out of [0,1)");
}

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  c.crop = c.rotate = c.elastic = c.optical = c.noise = c.erase = false;
  c.hflip_p = c.vflip_p = 0.0;
  return c;
}

namespace {

using PointMap = std::function<Point(Point)>;

// One geometric stage: `inverse` maps output coordinates to source coordinates,
// `forward` maps source coordinates to output coordinates.
struct Stage {
  PointMap inverse;
  PointMap forward;
};

double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

Sample resample(const Sample& s, const std::vector<Stage>& stages) {
  const std::size_t W = s.image.width, H = s.image.height, C = s.image.channels;
  Sample out = s;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      Point p{double(x), double(y)};
      for (auto it = stages.rbegin(); it != stages.rend(); ++it) p = it->inverse(p);
      p = {snap(p.x), snap(p.y)};
      // Image: bilinear, zero outside the frame.
      const double fx = std::floor(p.x), fy = std::floor(p.y);
      const double ax = p.x - fx, ay = p.y - fy;
      const auto x0 = static_cast<std::ptrdiff_t>(fx), y0 = static_cast<std::ptrdiff_t>(fy);
      auto px = [&](std::ptrdiff_t xi, std::ptrdiff_t yi, std::size_t c) -> double {
        if (xi < 0 || yi < 0 || xi >= std::ptrdiff_t(W) || yi >= std::ptrdiff_t(H)) return 0.0;
        return s.image.at(std::size_t(xi), std::size_t(yi), c);
      };
      for (std::size_t c = 0; c < C; ++c) {
        double v = px(x0, y0, c) * (1 - ax) * (1 - ay);
        if (ax > 0) v += px(x0 + 1, y0, c) * ax * (1 - ay);
        if (ay > 0) v += px(x0, y0 + 1, c) * (1 - ax) * ay;
        if (ax > 0 && ay > 0) v += px(x0 + 1, y0 + 1, c) * ax * ay;
        out.image.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
      }
      // Masks: nearest.
      const auto nx = static_cast<std::ptrdiff_t>(std::floor(p.x + 0.5));
      const auto ny = static_cast<std::ptrdiff_t>(std::floor(p.y + 0.5));
      const bool inside = nx >= 0 && ny >= 0 && nx < std::ptrdiff_t(W) && ny < std::ptrdiff_t(H);
      for (std::size_t k = 0; k < s.classes; ++k) {
        out.masks[(k * H + y) * W + x] = inside ? s.masks[(k * H + std::size_t(ny)) * W + std::size_t(nx)] : 0;
      }
    }
  }
  Point t = s.tip;
  for (const auto& st : stages) t = st.forward(t);
  out.tip = t;
  return out;
}

Stage hflip_stage(std::size_t W) {
  const double m = double(W) - 1.0;
  auto f = [m](Point p) { return Point{m - p.x, p.y}; };
  return {f, f};
}

Stage vflip_stage(std::size_t H) {
  const double m = double(H) - 1.0;
  auto f = [m](Point p) { return Point{p.x, m - p.y}; };
  return {f, f};
}

Stage rotation_stage(std::size_t W, std::size_t H, double degrees) {
  const double th = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double cx = (double(W) - 1) / 2, cy = (double(H) - 1) / 2;
  // Counterclockwise on screen (y grows downward).
  auto fwd = [=](Point p) {
    const double dx = p.x - cx, dy = p.y - cy;
    return Point{cx + c * dx + s * dy, cy - s * dx + c * dy};
  };
  auto inv = [=](Point p) {
    const double dx = p.x - cx, dy = p.y - cy;
    return Point{cx + c * dx - s * dy, cy + s * dx + c * dy};
  };
  return {inv, fwd};
}

// Crop window of relative size `scale` at (ox, oy), stretched back to the full frame.
Stage crop_stage(double scale, double ox, double oy) {
  auto inv = [=](Point p) { return Point{ox + (p.x + 0.5) * scale - 0.5, oy + (p.y + 0.5) * scale - 0.5}; };
  auto fwd = [=](Point p) { return Point{(p.x + 0.5 - ox) / scale - 0.5, (p.y + 0.5 - oy) / scale - 0.5}; };
  return {inv, fwd};
}

std::vector<double> gaussian_blur(const std::vector<double>& f, std::size_t W, std::size_t H, double sigma) {
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3 * sigma));
  std::vector<double> k(std::size_t(2 * radius + 1));
  double total = 0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    total += k[std::size_t(i + radius)] = std::exp(-0.5 * double(i * i) / (sigma * sigma));
  }
  for (auto& v : k) v /= total;
  auto clampi = [](std::ptrdiff_t i, std::size_t n) { return std::size_t(std::clamp<std::ptrdiff_t>(i, 0, n - 1)); };
  std::vector<double> tmp(f.size()), out(f.size());
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      double acc = 0;
      for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        acc += k[std::size_t(i + radius)] * f[y * W + clampi(std::ptrdiff_t(x) + i, W)];
      }
      tmp[y * W + x] = acc;
    }
  }
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      double acc = 0;
      for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        acc += k[std::size_t(i + radius)] * tmp[clampi(std::ptrdiff_t(y) + i, H) * W + x];
      }
      out[y * W + x] = acc;
    }
  }
  return out;
}

// Displacement field d on the output grid; source = p + d(p).
Stage elastic_stage(std::size_t W, std::size_t H, double alpha, double sigma, Rng& rng) {
  std::vector<double> dx(W * H), dy(W * H);
  for (auto& v : dx) v = uniform(rng, -1.0, 1.0);
  for (auto& v : dy) v = uniform(rng, -1.0, 1.0);
  auto fx = std::make_shared<std::vector<double>>(gaussian_blur(dx, W, H, sigma));
  auto fy = std::make_shared<std::vector<double>>(gaussian_blur(dy, W, H, sigma));
  for (auto& v : *fx) v *= alpha;
  for (auto& v : *fy) v *= alpha;
  auto disp = [=](Point p) {
    const double x = std::clamp(p.x, 0.0, double(W - 1)), y = std::clamp(p.y, 0.0, double(H - 1));
    const auto x0 = std::min(std::size_t(x), W - 1), y0 = std::min(std::size_t(y), H - 1);
    const auto x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
    const double ax = x - double(x0), ay = y - double(y0);
    auto bil = [&](const std::vector<double>& f) {
      return (f[y0 * W + x0] * (1 - ax) + f[y0 * W + x1] * ax) * (1 - ay) +
             (f[y1 * W + x0] * (1 - ax) + f[y1 * W + x1] * ax) * ay;
    };
    return Point{bil(*fx), bil(*fy)};
  };
  auto inv = [=](Point p) {
    const Point d = disp(p);
    return Point{p.x + d.x, p.y + d.y};
  };
  auto fwd = [=](Point q) {
    Point p = q;
    for (int i = 0; i < 50; ++i) {
      const Point d = disp(p);
      p = {q.x - d.x, q.y - d.y};
    }
    return p;
  };
  return {inv, fwd};
}

// Radial distortion: source = c + (p - c) * (1 + k * r^2), r relative to half the larger side.
Stage optical_stage(std::size_t W, std::size_t H, double k) {
  const double cx = (double(W) - 1) / 2, cy = (double(H) - 1) / 2;
  const double R = double(std::max(W, H)) / 2;
  auto factor = [=](Point p) {
    const double rx = (p.x - cx) / R, ry = (p.y - cy) / R;
    return 1.0 + k * (rx * rx + ry * ry);
  };
  auto inv = [=](Point p) {
    const double f = factor(p);
    return Point{cx + (p.x - cx) * f, cy + (p.y - cy) * f};
  };
  auto fwd = [=](Point q) {
    Point p = q;
    for (int i = 0; i < 50; ++i) {
      const double f = factor(p);
      p = {cx + (q.x - cx) / f, cy + (q.y - cy) / f};
    }
    return p;
  };
  return {inv, fwd};
}

std::vector<Stage> draw_geometry(const Sample& s, const AugmentConfig& cfg, Rng& rng) {
  const std::size_t W = s.image.width, H = s.image.height;
  std::vector<Stage> stages;
  if (cfg.crop) {
    const double scale = uniform(rng, cfg.crop_scale.lo, cfg.crop_scale.hi);
    const double ox = uniform(rng, 0.0, double(W) * (1 - scale));
    const double oy = uniform(rng, 0.0, double(H) * (1 - scale));
    stages.push_back(crop_stage(scale, ox, oy));
  }
  if (cfg.rotate) stages.push_back(rotation_stage(W, H, uniform(rng, cfg.rotation_deg.lo, cfg.rotation_deg.hi)));
  if (bernoulli(rng, cfg.hflip_p)) stages.push_back(hflip_stage(W));
  if (bernoulli(rng, cfg.vflip_p)) stages.push_back(vflip_stage(H));
  if (cfg.elastic && bernoulli(rng, cfg.elastic_p)) {
    stages.push_back(elastic_stage(W, H, cfg.elastic_alpha, cfg.elastic_sigma, rng));
  }
  if (cfg.optical && bernoulli(rng, cfg.optical_p)) {
    stages.push_back(optical_stage(W, H, uniform(rng, -cfg.distort_limit, cfg.distort_limit)));
  }
  return stages;
}

void add_noise(Image& img, double stddev, Rng& rng) {
  for (auto& v : img.data) {
    v = static_cast<std::uint8_t>(std::clamp(std::floor(double(v) + stddev * normal(rng) + 0.5), 0.0, 255.0));
  }
}

void erase_rect(Image& img, const AugmentConfig& cfg, Rng& rng) {
  const double area = uniform(rng, cfg.erase_area.lo, cfg.erase_area.hi) * double(img.width * img.height);
  const double aspect = uniform(rng, cfg.erase_aspect.lo, cfg.erase_aspect.hi);
  const auto h = std::clamp<std::size_t>(std::size_t(std::sqrt(area * aspect)), 1, img.height);
  const auto w = std::clamp<std::size_t>(std::size_t(std::sqrt(area / aspect)), 1, img.width);
  const auto x0 = std::min(std::size_t(uniform01(rng) * double(img.width - w + 1)), img.width - w);
  const auto y0 = std::min(std::size_t(uniform01(rng) * double(img.height - h + 1)), img.height - h);
  const auto fill = static_cast<std::uint8_t>(std::min(255.0, std::floor(uniform01(rng) * 256.0)));
  for (std::size_t y = y0; y < y0 + h; ++y) {
    for (std::size_t x = x0; x < x0 + w; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) img.at(x, y, c) = fill;
    }
  }
}

bool tip_inside(Point t, const Image& img) {
  return t.x >= 0.0 && t.y >= 0.0 && t.x <= double(img.width) - 1 && t.y <= double(img.height) - 1;
}

}  // namespace

Sample flip_horizontal(const Sample& s) {
  s.validate();
  return resample(s, {hflip_stage(s.image.width)});
}

Sample flip_vertical(const Sample& s) {
  s.validate();
  return resample(s, {vflip_stage(s.image.height)});
}

Sample rotate(const Sample& s, double degrees) {
  s.validate();
  return resample(s, {rotation_stage(s.image.width, s.image.height, degrees)});
}

Sample augment(const Sample& sample, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  sample.validate();
  std::vector<Stage> stages;
  bool accepted = false;
  for (int attempt = 0; attempt < 10 && !accepted; ++attempt) {
    stages = draw_geometry(sample, cfg, rng);
    Point t = sample.tip;
    for (const auto& st : stages) t = st.forward(t);
    accepted = tip_inside(t, sample.image);
  }
  if (!accepted) return sample;
  Sample out = stages.empty() ? sample : resample(sample, stages);
  if (cfg.noise && bernoulli(rng, cfg.noise_p)) {
    add_noise(out.image, uniform(rng, cfg.noise_std.lo, cfg.noise_std.hi), rng);
  }
  if (cfg.erase && bernoulli(rng, cfg.erase_p)) erase_rect(out.image, cfg, rng);
  return out;
}

}  // namespace icsinet
