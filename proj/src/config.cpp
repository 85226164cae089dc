#include <nlohmann/json.hpp>

#include <fstream>
#include <set>
#include <sstream>

#include "icsinet/errors.hpp"
#include "icsinet/pipeline.hpp"

namespace icsinet {

using nlohmann::json;
namespace fs = std::filesystem;

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  optim.validate();
  augment.validate();
  if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
}

namespace {

// Reads fields of one JSON object, rejecting keys nobody asked for.
class Reader {
 public:
  Reader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_ + ": expected an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.count(key)) throw ConfigError(path_ + "." + key + ": unknown key");
    }
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<V>();
    } catch (const json::exception&) {
      throw ConfigError(path_ + "." + key + ": wrong type");
    }
  }

  void range(const char* key, Range& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
      throw ConfigError(path_ + "." + key + ": expected [lo, hi]");
    }
    out = {v[0].get<double>(), v[1].get<double>()};
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return obj_.contains(key) ? &obj_.at(key) : nullptr;
  }
  const std::string& path() const { return path_; }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

json range_json(const Range& r) { return json::array({r.lo, r.hi}); }

json parse_text(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(origin + ": invalid JSON: " + e.what());
  }
}

void read_clahe(Reader& r, ClaheConfig& c) {
  if (const auto* j = r.child("clahe")) {
    Reader q(*j, r.path() + ".clahe");
    q.get("tiles", c.tiles);
    q.get("clip_limit", c.clip_limit);
    q.get("bins", c.bins);
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  const json root = parse_text(text, origin);
  RunConfig cfg;
  {
    Reader r(root, origin);
    if (const auto* j = r.child("model")) {
      Reader m(*j, origin + ".model");
      m.get("input_size", cfg.model.input_size);
      m.get("depth", cfg.model.depth);
      m.get("channels", cfg.model.channels);
      m.get("seg_classes", cfg.model.seg_classes);
      m.get("seed", cfg.model.seed);
    }
    if (const auto* j = r.child("loss")) {
      Reader l(*j, origin + ".loss");
      l.get("lambda1", cfg.loss.lambda1);
      l.get("lambda2", cfg.loss.lambda2);
      l.get("sigma", cfg.loss.sigma);
      l.get("dice_smooth", cfg.loss.dice_smooth);
    }
    if (const auto* j = r.child("optim")) {
      Reader o(*j, origin + ".optim");
      o.get("lr", cfg.optim.lr);
      o.get("beta1", cfg.optim.beta1);
      o.get("beta2", cfg.optim.beta2);
      o.get("eps", cfg.optim.eps);
    }
    if (const auto* j = r.child("augment")) {
      Reader a(*j, origin + ".augment");
      auto& g = cfg.augment;
      a.get("crop", g.crop);
      a.range("crop_scale", g.crop_scale);
      a.get("rotate", g.rotate);
      a.range("rotation_deg", g.rotation_deg);
      a.get("hflip_p", g.hflip_p);
      a.get("vflip_p", g.vflip_p);
      a.get("elastic", g.elastic);
      a.get("elastic_p", g.elastic_p);
      a.get("elastic_alpha", g.elastic_alpha);
      a.get("elastic_sigma", g.elastic_sigma);
      a.get("optical", g.optical);
      a.get("optical_p", g.optical_p);
      a.get("distort_limit", g.distort_limit);
      a.get("noise", g.noise);
      a.get("noise_p", g.noise_p);
      a.range("noise_std", g.noise_std);
      a.get("erase", g.erase);
      a.get("erase_p", g.erase_p);
      a.range("erase_area", g.erase_area);
      a.range("erase_aspect", g.erase_aspect);
      a.get("seed", g.seed);
    }
    if (const auto* j = r.child("train")) {
      Reader t(*j, origin + ".train");
      t.get("batch_size", cfg.train.batch_size);
      t.get("max_steps", cfg.train.max_steps);
      t.get("eval_every", cfg.train.eval_every);
      t.get("seed", cfg.train.seed);
    }
    if (const auto* j = r.child("data")) {
      Reader d(*j, origin + ".data");
      d.get("train_dir", cfg.data.train_dir);
      d.get("val_dir", cfg.data.val_dir);
      d.get("test_dir", cfg.data.test_dir);
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg = parse_run_config(ss.str(), path.string());
  // Data directories are relative to the config file.
  for (auto* dir : {&cfg.data.train_dir, &cfg.data.val_dir, &cfg.data.test_dir}) {
    if (!dir->empty() && fs::path(*dir).is_relative()) *dir = (path.parent_path() / *dir).lexically_normal().string();
  }
  return cfg;
}

std::string run_config_to_json(const RunConfig& c) {
  const auto& g = c.augment;
  json j = {
      {"model",
       {{"input_size", c.model.input_size},
        {"depth", c.model.depth},
        {"channels", c.model.channels},
        {"seg_classes", c.model.seg_classes},
        {"seed", c.model.seed}}},
      {"loss",
       {{"lambda1", c.loss.lambda1},
        {"lambda2", c.loss.lambda2},
        {"sigma", c.loss.sigma},
        {"dice_smooth", c.loss.dice_smooth}}},
      {"optim", {{"lr", c.optim.lr}, {"beta1", c.optim.beta1}, {"beta2", c.optim.beta2}, {"eps", c.optim.eps}}},
      {"augment",
       {{"crop", g.crop},
        {"crop_scale", range_json(g.crop_scale)},
        {"rotate", g.rotate},
        {"rotation_deg", range_json(g.rotation_deg)},
        {"hflip_p", g.hflip_p},
        {"vflip_p", g.vflip_p},
        {"elastic", g.elastic},
        {"elastic_p", g.elastic_p},
        {"elastic_alpha", g.elastic_alpha},
        {"elastic_sigma", g.elastic_sigma},
        {"optical", g.optical},
        {"optical_p", g.optical_p},
        {"distort_limit", g.distort_limit},
        {"noise", g.noise},
        {"noise_p", g.noise_p},
        {"noise_std", range_json(g.noise_std)},
        {"erase", g.erase},
        {"erase_p", g.erase_p},
        {"erase_area", range_json(g.erase_area)},
        {"erase_aspect", range_json(g.erase_aspect)},
        {"seed", g.seed}}},
      {"train",
       {{"batch_size", c.train.batch_size},
        {"max_steps", c.train.max_steps},
        {"eval_every", c.train.eval_every},
        {"seed", c.train.seed}}},
      {"data", {{"train_dir", c.data.train_dir}, {"val_dir", c.data.val_dir}, {"test_dir", c.data.test_dir}}},
  };
  return j.dump(2);
}

SceneConfig parse_scene_config(const std::string& text, const std::string& origin) {
  const json root = parse_text(text, origin);
  SceneConfig c;
  {
    Reader r(root, origin);
    r.get("image_size", c.image_size);
    r.get("seed", c.seed);
    r.range("background", c.background);
    r.range("oocyte", c.oocyte);
    r.range("rim_boost", c.rim_boost);
    r.range("pipette", c.pipette);
    r.range("needle", c.needle);
    r.range("axes", c.axes);
    r.range("pipette_half_width", c.pipette_half_width);
    r.range("needle_thickness", c.needle_thickness);
    r.range("noise_std", c.noise_std);
    r.get("apply_clahe", c.apply_clahe);
    read_clahe(r, c.clahe);
  }
  c.validate();
  return c;
}

}  // namespace icsinet
