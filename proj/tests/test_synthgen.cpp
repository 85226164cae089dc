#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "icsinet/errors.hpp"
#include "icsinet/metrics.hpp"
#include "icsinet/synthgen.hpp"

using namespace icsinet;
namespace fs = std::filesystem;

namespace {

SceneConfig small_scene() {
  SceneConfig c;
  c.image_size = 128;
  c.seed = 3;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Scene, DeterministicInSeedAndIndex) {
  const auto a = generate_scene(small_scene(), 5);
  const auto b = generate_scene(small_scene(), 5);
  const auto c = generate_scene(small_scene(), 6);
  EXPECT_EQ(a.sample.image, b.sample.image);
  EXPECT_EQ(a.sample.masks, b.sample.masks);
  EXPECT_NE(a.sample.image, c.sample.image);
  EXPECT_EQ(a.sample.id, "synth_000005");
}

TEST(Scene, GeometryAndLabelsAgree) {
  const SceneConfig cfg = small_scene();
  const std::size_t S = cfg.image_size;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const Scene s = generate_scene(cfg, i);
    s.sample.validate();
    const Mask oo = polygon_to_mask(s.geometry.oolemma, S);
    const Mask pip = polygon_to_mask(s.geometry.pipette, S);
    EXPECT_TRUE(std::equal(oo.data.begin(), oo.data.end(), s.sample.masks.begin()));
    EXPECT_TRUE(std::equal(pip.data.begin(), pip.data.end(), s.sample.masks.begin() + S * S));
    const double fo = double(oo.count()) / double(S * S), fp = double(pip.count()) / double(S * S);
    EXPECT_GE(fo, 0.15);
    EXPECT_LE(fo, 0.5);
    EXPECT_GE(fp, 0.03);
    EXPECT_LE(fp, 0.15);
    EXPECT_GE(s.sample.tip.x, 0.0);
    EXPECT_LE(s.sample.tip.x, double(S - 1));
    EXPECT_GE(s.sample.tip.y, 0.0);
    EXPECT_LE(s.sample.tip.y, double(S - 1));
  }
}

TEST(Scene, NeedleIsDarkAtTip) {
  SceneConfig cfg = small_scene();
  cfg.apply_clahe = false;
  cfg.noise_std = {0, 0};
  const Scene s = generate_scene(cfg, 2);
  const auto& img = s.sample.image;
  const auto tx = std::size_t(std::lround(s.sample.tip.x)) + 2, ty = std::size_t(std::lround(s.sample.tip.y));
  EXPECT_LT(img.at(std::min(tx, img.width - 1), ty), 80);
}

TEST(Scene, ConfigValidation) {
  SceneConfig c = small_scene();
  c.image_size = 8;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_scene();
  c.axes = {0.5, 0.2};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Annotation, JsonRoundTrip) {
  Annotation a;
  a.id = "x1";
  a.oolemma = {{0, 0}, {4, 0}, {4, 4}};
  a.pipette = {{1, 1}, {2, 1}, {2, 2}};
  a.needle_tip = {3.25, 7.5};
  a.image_size = 256;
  a.image = "x1.png";
  a.operator_id = "op2";
  a.round = 3;
  const Annotation b = annotation_from_json(annotation_to_json(a), "t");
  EXPECT_EQ(b.id, "x1");
  EXPECT_EQ(b.oolemma.size(), 3u);
  EXPECT_DOUBLE_EQ(b.needle_tip.x, 3.25);
  EXPECT_EQ(b.image_size, 256u);
  EXPECT_EQ(*b.operator_id, "op2");
  EXPECT_EQ(*b.round, 3);
  EXPECT_FALSE(b.frame_id.has_value());
  EXPECT_THROW(annotation_from_json("{", "t"), InputError);
  EXPECT_THROW(annotation_from_json(R"({"id":"a"})", "t"), InputError);
}

TEST(Split, ProportionsAndNames) {
  std::size_t counts[3] = {0, 0, 0};
  for (std::uint64_t i = 0; i < 10000; ++i) counts[int(split_of(1, i))]++;
  EXPECT_NEAR(counts[0] / 10000.0, 0.80, 0.02);
  EXPECT_NEAR(counts[1] / 10000.0, 0.05, 0.01);
  EXPECT_NEAR(counts[2] / 10000.0, 0.15, 0.015);
  EXPECT_EQ(split_from_name(split_name(Split::Val)), Split::Val);
  EXPECT_THROW(split_from_name("dev"), ConfigError);
}

TEST(Dataset, WritesManifestsAndLoads) {
  const fs::path dir = fresh_dir("icsinet_synth_ds");
  SceneConfig cfg = small_scene();
  cfg.image_size = 64;
  const auto made = generate_dataset(cfg, 6, dir, 0, Split::Train);
  ASSERT_EQ(made.size(), 6u);
  const auto more = generate_dataset(cfg, 2, dir, 6, Split::Val);
  EXPECT_EQ(list_annotations(dir / "train").size(), 6u);
  EXPECT_EQ(list_annotations(dir / "val").size(), 2u);
  const Sample s = load_sample(list_annotations(dir / "train")[1]);
  const Scene ref = generate_scene(cfg, 1);
  EXPECT_EQ(s.image, ref.sample.image);
  EXPECT_EQ(s.masks, ref.sample.masks);
  EXPECT_DOUBLE_EQ(s.tip.x, ref.sample.tip.x);
  std::ifstream top(dir / "manifest.json");
  std::string text((std::istreambuf_iterator<char>(top)), {});
  EXPECT_NE(text.find("\"count\": 8"), std::string::npos) << text;
  fs::remove_all(dir);
}
