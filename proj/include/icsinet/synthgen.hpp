#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "icsinet/geometry.hpp"
#include "icsinet/imgproc.hpp"

namespace icsinet {

struct SceneConfig {
  std::size_t image_size = 512;
  std::uint64_t seed = 0;
  Range background{70, 110};
  Range oocyte{120, 160};
  Range rim_boost{30, 60};   // added to the oocyte level along the oolemma
  Range pipette{160, 210};
  Range needle{15, 50};
  Range axes{0.25, 0.40};          // oolemma semi-axes, fraction of image size
  Range pipette_half_width{0.05, 0.10};  // fraction of image size
  Range needle_thickness{0.005, 0.015};  // fraction of image size
  Range noise_std{2, 6};
  bool apply_clahe = true;
  ClaheConfig clahe;

  void validate() const;
};

/// Ground-truth geometry behind a rendered scene. Polygons are in corner coordinates.
struct SceneGeometry {
  Point center;  // oolemma ellipse center, corner coordinates
  double semi_a = 0.0, semi_b = 0.0, angle = 0.0;
  Polygon oolemma;
  Polygon pipette;
  double needle_radius = 0.0;
  bool tip_inside_oolemma = false;
};

struct Scene {
  Sample sample;
  SceneGeometry geometry;
};

/// Deterministic in (cfg.seed, index).
Scene generate_scene(const SceneConfig& cfg, std::uint64_t index);

/// Annotation record as stored on disk next to each image.
struct Annotation {
  std::string id;
  Polygon oolemma;
  Polygon pipette;
  Point needle_tip;  // index coordinates
  std::size_t image_size = 0;
  std::string image;  // PNG file name relative to the annotation
  // Present only in operator annotation sets.
  std::optional<std::string> operator_id;
  std::optional<int> round;
  std::optional<std::string> frame_id;
};

std::string annotation_to_json(const Annotation& a);
Annotation annotation_from_json(const std::string& text, const std::string& origin);
Annotation read_annotation(const std::filesystem::path& path);

/// Image plus masks rasterized from the annotation polygons.
Sample load_sample(const std::filesystem::path& annotation_path);

enum class Split { Train, Val, Test };
std::string split_name(Split s);
Split split_from_name(const std::string& name);
/// 80 / 5 / 15 by a hash of (seed, index).
Split split_of(std::uint64_t seed, std::uint64_t index);

struct ManifestEntry {
  std::string id;
  std::string split;
  std::string annotation;  // path relative to the manifest
};

/// Writes samples [first, first + n) under out_dir/<split>/ with one manifest per split
/// directory and one at out_dir listing everything. A forced split puts every sample there.
std::vector<ManifestEntry> generate_dataset(const SceneConfig& cfg, std::size_t n,
                                            const std::filesystem::path& out_dir, std::uint64_t first = 0,
                                            std::optional<Split> forced = std::nullopt);

/// Annotation files of a split directory, from its manifest when present, otherwise by scan.
std::vector<std::filesystem::path> list_annotations(const std::filesystem::path& dir);

/// Writes via a temporary sibling and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
void write_png_atomic(const std::filesystem::path& path, const Image& img);

}  // namespace icsinet
