#include "icsinet/synthgen.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "icsinet/errors.hpp"
#include "icsinet/metrics.hpp"

namespace icsinet {

namespace fs = std::filesystem;
using nlohmann::json;

void SceneConfig::validate() const {
  if (image_size < 16) throw ConfigError("scene: image_size must be >= 16");
  for (const auto* r : {&background, &oocyte, &rim_boost, &pipette, &needle, &noise_std}) {
    if (!(r->lo <= r->hi) || r->lo < 0 || r->hi > 255) throw ConfigError("scene: intensity range invalid");
  }
  if (!(axes.lo <= axes.hi) || axes.lo <= 0 || axes.hi > 0.45) throw ConfigError("scene: axes range invalid");
  if (!(pipette_half_width.lo <= pipette_half_width.hi) || pipette_half_width.lo <= 0 || pipette_half_width.hi > 0.2) {
    throw ConfigError("scene: pipette_half_width range invalid");
  }
  if (!(needle_thickness.lo <= needle_thickness.hi) || needle_thickness.lo <= 0 || needle_thickness.hi > 0.05) {
    throw ConfigError("scene: needle_thickness range invalid");
  }
  if (apply_clahe) clahe.validate();
}

namespace {

constexpr std::size_t kEllipseVertices = 256;
constexpr std::size_t kArcSegments = 16;
constexpr int kSuper = 4;  // supersampling per axis

// Vertices snapped to 1/256 px survive a JSON round trip exactly.
double snap256(double v) { return std::round(v * 256.0) / 256.0; }

struct Geometry {
  double cx, cy, a, b, angle;
  double pipe_end, pipe_half, pipe_round;
  double tip_x, tip_y, needle_r;  // corner coordinates
  bool tip_inside;
};

double ellipse_level(const Geometry& g, double x, double y) {
  const double dx = x - g.cx, dy = y - g.cy;
  const double c = std::cos(g.angle), s = std::sin(g.angle);
  const double u = dx * c + dy * s, v = -dx * s + dy * c;
  return (u * u) / (g.a * g.a) + (v * v) / (g.b * g.b);
}

bool in_pipette(const Geometry& g, double x, double y) {
  const double dy = std::abs(y - g.cy);
  if (x < 0.0 || x > g.pipe_end || dy > g.pipe_half) return false;
  const double corner_x = g.pipe_end - g.pipe_round;
  if (x <= corner_x || dy <= g.pipe_half - g.pipe_round) return true;
  const double ex = x - corner_x, ey = dy - (g.pipe_half - g.pipe_round);
  return ex * ex + ey * ey <= g.pipe_round * g.pipe_round;
}

bool in_needle(const Geometry& g, double x, double y) {
  if (x >= g.tip_x) return std::abs(y - g.tip_y) <= g.needle_r;
  return std::hypot(x - g.tip_x, y - g.tip_y) <= g.needle_r;
}

Polygon ellipse_polygon(const Geometry& g) {
  Polygon p;
  const double c = std::cos(g.angle), s = std::sin(g.angle);
  for (std::size_t k = 0; k < kEllipseVertices; ++k) {
    const double t = 2.0 * std::numbers::pi * double(k) / double(kEllipseVertices);
    const double u = g.a * std::cos(t), v = g.b * std::sin(t);
    p.push_back({snap256(g.cx + u * c - v * s), snap256(g.cy + u * s + v * c)});
  }
  return p;
}

Polygon pipette_polygon(const Geometry& g) {
  Polygon p;
  const double r = g.pipe_round, xr = g.pipe_end - r;
  p.push_back({0.0, snap256(g.cy - g.pipe_half)});
  // Upper right arc from the top edge to the right edge, then lower arc.
  for (std::size_t k = 0; k <= kArcSegments; ++k) {
    const double t = -std::numbers::pi / 2 + (std::numbers::pi / 2) * double(k) / double(kArcSegments);
    p.push_back({snap256(xr + r * std::cos(t)), snap256(g.cy - g.pipe_half + r + r * std::sin(t))});
  }
  for (std::size_t k = 0; k <= kArcSegments; ++k) {
    const double t = (std::numbers::pi / 2) * double(k) / double(kArcSegments);
    p.push_back({snap256(xr + r * std::cos(t)), snap256(g.cy + g.pipe_half - r + r * std::sin(t))});
  }
  p.push_back({0.0, snap256(g.cy + g.pipe_half)});
  return p;
}

double coverage(const Polygon& poly, std::size_t S) {
  return double(polygon_to_mask(poly, S).count()) / double(S * S);
}

Geometry sample_geometry(const SceneConfig& cfg, Rng& rng, Polygon& oolemma, Polygon& pipette) {
  const double S = double(cfg.image_size);
  Geometry g{};
  for (int attempt = 0; attempt < 1000; ++attempt) {
    g.a = uniform(rng, cfg.axes.lo, cfg.axes.hi) * S;
    g.b = uniform(rng, cfg.axes.lo, cfg.axes.hi) * S;
    g.angle = uniform(rng, 0.0, std::numbers::pi);
    g.cx = uniform(rng, 0.45, 0.65) * S;
    g.cy = uniform(rng, 0.40, 0.60) * S;
    const double c = std::cos(g.angle), s = std::sin(g.angle);
    const double ex = std::sqrt(g.a * g.a * c * c + g.b * g.b * s * s);
    const double ey = std::sqrt(g.a * g.a * s * s + g.b * g.b * c * c);
    if (g.cx - ex < 1.0 || g.cx + ex > S - 1.0 || g.cy - ey < 1.0 || g.cy + ey > S - 1.0) continue;
    g.pipe_end = g.cx - 1.0 / std::sqrt(c * c / (g.a * g.a) + s * s / (g.b * g.b));
    g.pipe_half = uniform(rng, cfg.pipette_half_width.lo, cfg.pipette_half_width.hi) * S;
    g.pipe_round = 0.5 * g.pipe_half;
    if (g.pipe_end < 2.0 * g.pipe_round) continue;
    oolemma = ellipse_polygon(g);
    pipette = pipette_polygon(g);
    const double oo = coverage(oolemma, cfg.image_size), pp = coverage(pipette, cfg.image_size);
    if (oo < 0.15 || oo > 0.50 || pp < 0.03 || pp > 0.15) continue;

    g.needle_r = 0.5 * uniform(rng, cfg.needle_thickness.lo, cfg.needle_thickness.hi) * S;
    g.tip_inside = bernoulli(rng, 0.5);
    bool placed = false;
    for (int t = 0; t < 1000 && !placed; ++t) {
      // Leave at least a tenth of the frame of shaft visible past the tip.
      const double x = uniform(rng, S / 3.0 + 0.5, 0.9 * S);
      const double y = uniform(rng, 0.05 * S, 0.95 * S);
      const double e = ellipse_level(g, x, y);
      placed = g.tip_inside ? e <= 0.9 : e >= 1.1 && !in_pipette(g, x, y);
      if (placed) {
        g.tip_x = x;
        g.tip_y = y;
      }
    }
    if (placed) return g;
  }
  throw ContractError("generate_scene: geometry constraints could not be met");
}

}  // namespace

Scene generate_scene(const SceneConfig& cfg, std::uint64_t index) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, index));
  const std::size_t S = cfg.image_size;
  Polygon oolemma, pipette;
  const Geometry g = sample_geometry(cfg, rng, oolemma, pipette);

  const double bg = uniform(rng, cfg.background.lo, cfg.background.hi);
  const double grad_x = uniform(rng, -15.0, 15.0), grad_y = uniform(rng, -15.0, 15.0);
  const double oo = uniform(rng, cfg.oocyte.lo, cfg.oocyte.hi);
  const double rim = oo + uniform(rng, cfg.rim_boost.lo, cfg.rim_boost.hi);
  const double pip = uniform(rng, cfg.pipette.lo, cfg.pipette.hi);
  const double ndl = uniform(rng, cfg.needle.lo, cfg.needle.hi);
  const double noise = uniform(rng, cfg.noise_std.lo, cfg.noise_std.hi);
  const double phase1 = uniform(rng, 0, 2 * std::numbers::pi), phase2 = uniform(rng, 0, 2 * std::numbers::pi);
  const double rim_width = std::max(1.0, 0.012 * double(S));
  const double mean_axis = 0.5 * (g.a + g.b);
  const double tex = 0.04 * double(S);

  auto shade = [&](double x, double y) {
    double v = bg + grad_x * (x / double(S) - 0.5) + grad_y * (y / double(S) - 0.5);
    const double e = ellipse_level(g, x, y);
    const double r = std::sqrt(e);
    if (r >= 1.08 && r <= 1.22) v = bg + 18.0;  // zona pellucida, unlabeled
    if (e <= 1.0) v = oo + 8.0 * std::sin(x / tex + phase1) * std::cos(y / tex + phase2);
    if (std::abs(r - 1.0) * mean_axis <= 0.5 * rim_width) v = rim;
    if (in_pipette(g, x, y)) {
      const bool lumen = std::abs(y - g.cy) <= 0.55 * g.pipe_half && x <= g.pipe_end - 0.1 * g.pipe_half;
      v = lumen ? bg - 15.0 : pip;
    }
    if (in_needle(g, x, y)) v = ndl;
    return v;
  };

  Scene scene;
  scene.sample.image = Image(S, S, 1);
  for (std::size_t j = 0; j < S; ++j) {
    for (std::size_t i = 0; i < S; ++i) {
      double acc = 0.0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          acc += shade(double(i) + (sx + 0.5) / kSuper, double(j) + (sy + 0.5) / kSuper);
        }
      }
      const double v = acc / (kSuper * kSuper) + noise * normal(rng);
      scene.sample.image.at(i, j) = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
    }
  }
  if (cfg.apply_clahe) scene.sample.image = clahe(scene.sample.image, cfg.clahe);

  scene.sample.classes = 2;
  scene.sample.masks.resize(2 * S * S);
  const Mask mo = polygon_to_mask(oolemma, S), mp = polygon_to_mask(pipette, S);
  std::copy(mo.data.begin(), mo.data.end(), scene.sample.masks.begin());
  std::copy(mp.data.begin(), mp.data.end(), scene.sample.masks.begin() + std::ptrdiff_t(S * S));
  scene.sample.tip = {g.tip_x - 0.5, g.tip_y - 0.5};
  char id[32];
  std::snprintf(id, sizeof id, "synth_%06llu", static_cast<unsigned long long>(index));
  scene.sample.id = id;

  scene.geometry.center = {g.cx, g.cy};
  scene.geometry.semi_a = g.a;
  scene.geometry.semi_b = g.b;
  scene.geometry.angle = g.angle;
  scene.geometry.oolemma = std::move(oolemma);
  scene.geometry.pipette = std::move(pipette);
  scene.geometry.needle_radius = g.needle_r;
  scene.geometry.tip_inside_oolemma = g.tip_inside;
  return scene;
}

// ---------------------------------------------------------------------------
// Annotation files

namespace {

json polygon_json(const Polygon& p) {
  json a = json::array();
  for (const auto& v : p) a.push_back({v.x, v.y});
  return a;
}

Polygon polygon_from(const json& j, const std::string& origin, const char* cls) {
  if (!j.is_array()) throw InputError(origin + ": polygons." + cls + " must be an array of [x, y]");
  Polygon p;
  for (const auto& v : j) {
    if (!v.is_array() || v.size() != 2) throw InputError(origin + ": polygons." + cls + " has a malformed vertex");
    p.push_back({v[0].get<double>(), v[1].get<double>()});
  }
  if (p.size() < 3) throw InputError(origin + ": polygons." + cls + " needs at least 3 vertices");
  return p;
}

}  // namespace

std::string annotation_to_json(const Annotation& a) {
  json j;
  j["id"] = a.id;
  j["polygons"] = {{"oolemma", polygon_json(a.oolemma)}, {"pipette", polygon_json(a.pipette)}};
  j["needle_tip"] = {a.needle_tip.x, a.needle_tip.y};
  j["image_size"] = a.image_size;
  if (!a.image.empty()) j["image"] = a.image;
  if (a.operator_id) j["operator"] = *a.operator_id;
  if (a.round) j["round"] = *a.round;
  if (a.frame_id) j["frame_id"] = *a.frame_id;
  return j.dump() + "\n";
}

Annotation annotation_from_json(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw InputError(origin + ": invalid JSON: " + e.what());
  }
  try {
    Annotation a;
    a.id = j.at("id").get<std::string>();
    const auto& polys = j.at("polygons");
    a.oolemma = polygon_from(polys.at("oolemma"), origin, "oolemma");
    a.pipette = polygon_from(polys.at("pipette"), origin, "pipette");
    const auto& tip = j.at("needle_tip");
    if (!tip.is_array() || tip.size() != 2) throw InputError(origin + ": needle_tip must be [x, y]");
    a.needle_tip = {tip[0].get<double>(), tip[1].get<double>()};
    a.image_size = j.value("image_size", std::size_t{512});
    a.image = j.value("image", std::string{});
    if (j.contains("operator")) a.operator_id = j["operator"].get<std::string>();
    if (j.contains("round")) a.round = j["round"].get<int>();
    if (j.contains("frame_id")) a.frame_id = j["frame_id"].get<std::string>();
    return a;
  } catch (const json::exception& e) {
    throw InputError(origin + ": " + e.what());
  }
}

namespace {
std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}
}  // namespace

Annotation read_annotation(const fs::path& path) { return annotation_from_json(read_text(path), path.string()); }

Sample load_sample(const fs::path& annotation_path) {
  const Annotation a = read_annotation(annotation_path);
  if (a.image.empty()) throw InputError(annotation_path.string() + ": no image file named");
  Sample s;
  s.image = to_grayscale(read_png(annotation_path.parent_path() / a.image));
  const std::size_t W = s.image.width, H = s.image.height;
  s.classes = 2;
  s.masks.resize(2 * W * H);
  const Mask mo = polygon_to_mask(a.oolemma, W, H), mp = polygon_to_mask(a.pipette, W, H);
  std::copy(mo.data.begin(), mo.data.end(), s.masks.begin());
  std::copy(mp.data.begin(), mp.data.end(), s.masks.begin() + std::ptrdiff_t(W * H));
  s.tip = a.needle_tip;
  s.id = a.id;
  return s;
}

// ---------------------------------------------------------------------------
// Datasets

std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

Split split_of(std::uint64_t seed, std::uint64_t index) {
  const auto h = derive_seed(seed ^ 0x5EED5EEDull, index) % 100;
  return h < 80 ? Split::Train : h < 85 ? Split::Val : Split::Test;
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_png_atomic(const fs::path& path, const Image& img) {
  const fs::path tmp = path.string() + ".tmp";
  write_png(tmp, img);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

namespace {

std::map<std::string, ManifestEntry> read_manifest(const fs::path& path) {
  std::map<std::string, ManifestEntry> out;
  if (!fs::exists(path)) return out;
  try {
    const json j = json::parse(read_text(path));
    for (const auto& e : j.at("samples")) {
      ManifestEntry m{e.at("id").get<std::string>(), e.at("split").get<std::string>(),
                      e.at("annotation").get<std::string>()};
      out[m.id] = m;
    }
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": malformed manifest: " + e.what());
  }
  return out;
}

void write_manifest(const fs::path& path, const std::map<std::string, ManifestEntry>& entries) {
  json samples = json::array();
  for (const auto& [id, e] : entries) {
    samples.push_back({{"id", e.id}, {"split", e.split}, {"annotation", e.annotation}});
  }
  write_file_atomic(path, json{{"count", entries.size()}, {"samples", samples}}.dump(1) + "\n");
}

}  // namespace

std::vector<ManifestEntry> generate_dataset(const SceneConfig& cfg, std::size_t n, const fs::path& out_dir,
                                            std::uint64_t first, std::optional<Split> forced) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  auto top = read_manifest(out_dir / "manifest.json");
  std::map<std::string, std::map<std::string, ManifestEntry>> per_split;
  std::vector<ManifestEntry> made;
  for (std::uint64_t index = first; index < first + n; ++index) {
    const Split split = forced ? *forced : split_of(cfg.seed, index);
    const std::string sname = split_name(split);
    const fs::path dir = out_dir / sname;
    if (!per_split.count(sname)) {
      fs::create_directories(dir, ec);
      if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
      per_split[sname] = read_manifest(dir / "manifest.json");
    }
    const Scene scene = generate_scene(cfg, index);
    const std::string& id = scene.sample.id;
    write_png_atomic(dir / (id + ".png"), scene.sample.image);
    Annotation a;
    a.id = id;
    a.oolemma = scene.geometry.oolemma;
    a.pipette = scene.geometry.pipette;
    a.needle_tip = scene.sample.tip;
    a.image_size = cfg.image_size;
    a.image = id + ".png";
    write_file_atomic(dir / (id + ".json"), annotation_to_json(a));
    per_split[sname][id] = {id, sname, id + ".json"};
    top[id] = {id, sname, sname + "/" + id + ".json"};
    made.push_back(top[id]);
  }
  for (const auto& [sname, entries] : per_split) write_manifest(out_dir / sname / "manifest.json", entries);
  write_manifest(out_dir / "manifest.json", top);
  return made;
}

std::vector<fs::path> list_annotations(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  const fs::path manifest = dir / "manifest.json";
  if (fs::exists(manifest)) {
    for (const auto& [id, e] : read_manifest(manifest)) out.push_back(dir / e.annotation);
    return out;
  }
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace icsinet
