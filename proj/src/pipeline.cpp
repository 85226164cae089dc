#include "icsinet/pipeline.hpp"

#include <cblas.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "icsinet/errors.hpp"
#include "icsinet/random.hpp"

namespace icsinet {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string fixed(double v, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

// RFC 4180: quote when the field holds a comma, quote or line break.
std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::vector<Tensor<float>> param_tensors(const Model<float>& model) {
  std::vector<Tensor<float>> out;
  for (auto& p : model.parameters()) out.push_back(p.tensor);
  return out;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Point coords_to_pixel(std::span<const float> xy, std::size_t size) {
  return {normalized_to_pixel(xy[0], size), normalized_to_pixel(xy[1], size)};
}

}  // namespace

std::size_t worker_threads() {
  if (const char* env = std::getenv("ICSINET_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && n >= 1) return std::size_t(n);
    throw ConfigError("ICSINET_THREADS must be a positive integer, got '" + std::string(env) + "'");
  }
  return 1;
}

void apply_thread_limit() { openblas_set_num_threads(int(worker_threads())); }

std::string run_length_encode(const std::vector<std::uint8_t>& mask) {
  // Alternating run lengths, starting with a (possibly empty) run of zeros.
  std::string out;
  std::uint8_t current = 0;
  std::size_t run = 0;
  for (auto v : mask) {
    const std::uint8_t b = v ? 1 : 0;
    if (b != current) {
      out += std::to_string(run) + ' ';
      current = b;
      run = 0;
    }
    ++run;
  }
  out += std::to_string(run);
  return out;
}

// ---------------------------------------------------------------------------
// Data

Sample fit_sample(const Sample& s, std::size_t size) {
  s.validate();
  const std::size_t W = s.image.width, H = s.image.height;
  Sample out;
  out.id = s.id;
  out.classes = s.classes;
  out.image = preprocess(s.image, size);
  out.masks.resize(s.classes * size * size);
  for (std::size_t c = 0; c < s.classes; ++c) {
    for (std::size_t y = 0; y < size; ++y) {
      const std::size_t sy = std::min(H - 1, std::size_t((double(y) + 0.5) * double(H) / double(size)));
      for (std::size_t x = 0; x < size; ++x) {
        const std::size_t sx = std::min(W - 1, std::size_t((double(x) + 0.5) * double(W) / double(size)));
        out.masks[(c * size + y) * size + x] = s.masks[(c * H + sy) * W + sx];
      }
    }
  }
  out.tip = {(s.tip.x + 0.5) * double(size) / double(W) - 0.5, (s.tip.y + 0.5) * double(size) / double(H) - 0.5};
  return out;
}

Dataset load_dataset(const fs::path& dir, std::size_t size) {
  Dataset d;
  for (const auto& path : list_annotations(dir)) {
    try {
      d.samples.push_back(fit_sample(load_sample(path), size));
    } catch (const std::exception& e) {
      d.skipped.push_back(path.string() + ": " + e.what());
    }
  }
  return d;
}

Tensor<float> image_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw InputError("image_tensor: no images");
  const std::size_t W = images[0]->width, H = images[0]->height;
  std::vector<float> data;
  data.reserve(images.size() * W * H);
  for (const Image* img : images) {
    if (img->width != W || img->height != H || img->channels != 1) {
      throw ShapeError("image_tensor: images must be single-channel " + std::to_string(W) + "x" + std::to_string(H));
    }
    for (auto v : img->data) data.push_back(float(v) / 255.0f);
  }
  return Tensor<float>({images.size(), 1, H, W}, std::move(data));
}

Batch make_batch(const std::vector<Sample>& samples) {
  if (samples.empty()) throw InputError("make_batch: empty batch");
  Batch b;
  std::vector<const Image*> imgs;
  const std::size_t S = samples[0].image.width;
  std::vector<float> masks, tips;
  for (const auto& s : samples) {
    imgs.push_back(&s.image);
    if (s.classes != 2 || s.masks.size() != 2 * S * S) throw ShapeError("make_batch: sample " + s.id + " masks");
    for (auto v : s.masks) masks.push_back(float(v));
    tips.push_back(float(pixel_to_normalized(s.tip.x, S)));
    tips.push_back(float(pixel_to_normalized(s.tip.y, S)));
    b.ids.push_back(s.id);
  }
  b.images = image_tensor(imgs);
  b.masks = Tensor<float>({samples.size(), 2, S, S}, std::move(masks));
  b.tips.xy = Tensor<float>({samples.size(), 2}, std::move(tips));
  return b;
}

// ---------------------------------------------------------------------------
// Evaluation

double EvalSummary::score(std::size_t input_size) const {
  return 0.5 * (iou_oolemma.mean + iou_pipette.mean) - tip_px.mean / double(input_size);
}

Prediction predict(Model<float>& model, const Image& img) {
  NoGradGuard guard;
  const std::size_t S = model.config().input_size;
  const auto out = model.forward(image_tensor({&img}), Mode::Eval);
  Prediction p;
  const auto seg = out.seg.values.data();
  p.masks.resize(2 * S * S);
  for (std::size_t i = 0; i < p.masks.size(); ++i) p.masks[i] = seg[i] > 0.5f ? 1 : 0;
  p.tip = coords_to_pixel(out.coords.xy.data(), S);
  const auto hm = out.heatmap.values.data();
  p.heatmap_max = *std::max_element(hm.begin(), hm.end());
  return p;
}

EvalSummary evaluate(Model<float>& model, const std::vector<Sample>& samples) {
  const std::size_t S = model.config().input_size;
  EvalSummary s;
  std::vector<double> oo, pip, tp, t512, lat;
  for (const auto& sample : samples) {
    if (sample.image.width != S || sample.image.height != S) {
      throw ShapeError("evaluate: sample " + sample.id + " is not " + std::to_string(S) + "x" + std::to_string(S));
    }
    const auto t0 = std::chrono::steady_clock::now();
    const Prediction p = predict(model, sample.image);
    const auto t1 = std::chrono::steady_clock::now();
    FrameResult r;
    r.id = sample.id;
    const std::span<const std::uint8_t> pm(p.masks), gm(sample.masks);
    r.iou_oolemma = iou(pm.subspan(0, S * S), gm.subspan(0, S * S));
    r.iou_pipette = iou(pm.subspan(S * S), gm.subspan(S * S));
    r.predicted_tip = p.tip;
    r.tip_error_px = tip_distance(p.tip, sample.tip);
    r.tip_error_512 = r.tip_error_px * 512.0 / double(S);
    r.latency_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    oo.push_back(r.iou_oolemma);
    pip.push_back(r.iou_pipette);
    tp.push_back(r.tip_error_px);
    t512.push_back(r.tip_error_512);
    lat.push_back(r.latency_ms);
    s.frames.push_back(r);
  }
  s.iou_oolemma = summarize(oo);
  s.iou_pipette = summarize(pip);
  s.tip_px = summarize(tp);
  s.tip_512 = summarize(t512);
  s.latency_ms = summarize(lat);
  return s;
}

// ---------------------------------------------------------------------------
// Commands

std::vector<ManifestEntry> cmd_gen_data(const SceneConfig& cfg, std::size_t count, const fs::path& out,
                                        std::uint64_t first, std::optional<Split> split) {
  return generate_dataset(cfg, count, out, first, split);
}

namespace {

const char* kTrainHeader = "step,epoch,lr,loss_total,loss_seg,loss_euc,loss_js\r\n";
const char* kValHeader = "step,epoch,iou_oolemma,iou_pipette,tip_px,tip_px_512,score,improved\r\n";

// Sample order for the whole run: a fresh permutation per epoch.
class Schedule {
 public:
  Schedule(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {}
  std::size_t at(std::uint64_t position) {
    const std::uint64_t epoch = position / n_;
    if (epoch != epoch_ || perm_.empty()) {
      epoch_ = epoch;
      perm_.resize(n_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      Rng rng(derive_seed(seed_ ^ 0xE90C4ull, epoch));
      for (std::size_t i = n_ - 1; i > 0; --i) {
        const auto j = std::min(i, std::size_t(uniform01(rng) * double(i + 1)));
        std::swap(perm_[i], perm_[j]);
      }
    }
    return perm_[position % n_];
  }

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> perm_;
};

Dataset require_dataset(const std::string& dir, const char* field, std::size_t size, std::ostream* progress) {
  if (dir.empty()) throw ConfigError(std::string("data.") + field + ": required");
  if (!fs::is_directory(dir)) throw ConfigError(std::string("data.") + field + ": not a directory: " + dir);
  Dataset d = load_dataset(dir, size);
  if (progress) {
    for (const auto& s : d.skipped) *progress << "warning: skipped " << s << '\n';
  }
  if (d.samples.empty()) throw InputError(std::string("data.") + field + ": no usable samples in " + dir);
  return d;
}

}  // namespace

TrainResult cmd_train(const RunConfig& cfg, const fs::path& out_dir, std::ostream* progress) {
  cfg.validate();
  const std::size_t S = cfg.model.input_size;
  const Dataset train = require_dataset(cfg.data.train_dir, "train_dir", S, progress);
  const bool validate = cfg.train.eval_every > 0 || !cfg.data.val_dir.empty();
  Dataset val;
  if (validate) val = require_dataset(cfg.data.val_dir, "val_dir", S, progress);
  ensure_dir(out_dir);

  Model<float> model(cfg.model);
  auto params = param_tensors(model);
  auto state = OptimState<float>::init(params);
  std::string train_log = kTrainHeader, val_log = kValHeader;
  TrainResult result;
  result.best_score = -std::numeric_limits<double>::infinity();

  const std::size_t B = cfg.train.batch_size, N = train.samples.size();
  Schedule schedule(N, cfg.train.seed);

  auto run_eval = [&](std::uint64_t step) {
    EvalSummary e = evaluate(model, val.samples);
    const double score = e.score(S);
    const bool improved = score > result.best_score;
    val_log += std::to_string(step) + ',' + fmt(double(step * B) / double(N)) + ',' + fmt(e.iou_oolemma.mean) + ',' +
               fmt(e.iou_pipette.mean) + ',' + fmt(e.tip_px.mean) + ',' + fmt(e.tip_512.mean) + ',' + fmt(score) +
               ',' + (improved ? "1" : "0") + "\r\n";
    if (improved) {
      result.best_score = score;
      result.best_step = step;
      save_checkpoint(out_dir / "best.ckpt", model, state, cfg, step);
    }
    if (progress) {
      *progress << "eval step " << step << ": iou oolemma " << fixed(e.iou_oolemma.mean, 4) << ", pipette "
                << fixed(e.iou_pipette.mean, 4) << ", tip " << fixed(e.tip_px.mean, 3) << " px"
                << (improved ? " (best)" : "") << std::endl;
    }
    write_file_atomic(out_dir / "val_log.csv", val_log);
    result.final_eval = std::move(e);
  };

  for (std::uint64_t step = 1; step <= cfg.train.max_steps; ++step) {
    std::vector<Sample> batch_samples;
    for (std::size_t k = 0; k < B; ++k) {
      const std::uint64_t position = (step - 1) * B + k;
      Rng rng(derive_seed(cfg.augment.seed ^ cfg.train.seed, position));
      batch_samples.push_back(augment(train.samples[schedule.at(position)], cfg.augment, rng));
    }
    const Batch batch = make_batch(batch_samples);
    const auto out = model.forward(batch.images, Mode::Train);
    const auto loss = total_loss(out, batch.masks, batch.tips, cfg.loss);
    const double total = loss.total.item();
    if (!std::isfinite(total)) {
      std::string dump = "step " + std::to_string(step) + "\nloss_total " + fmt(total) + "\nloss_seg " +
                         fmt(loss.seg) + "\nloss_euc " + fmt(loss.euc) + "\nloss_js " + fmt(loss.js) + "\nbatch";
      for (const auto& id : batch.ids) dump += ' ' + id;
      write_file_atomic(out_dir / "nan_dump.txt", dump + "\n");
      write_file_atomic(out_dir / "train_log.csv", train_log);
      std::string ids;
      for (const auto& id : batch.ids) ids += (ids.empty() ? "" : ",") + id;
      throw std::runtime_error("loss became non-finite at step " + std::to_string(step) + " (batch " + ids +
                               "); diagnostics in " + (out_dir / "nan_dump.txt").string());
    }
    backward(loss.total);
    diffgrad_step<float>(params, state, cfg.optim);
    zero_grads<float>(params);
    train_log += std::to_string(step) + ',' + fmt(double(step * B) / double(N)) + ',' +
                 fmt(cfg.optim.lr_at(step)) + ',' + fmt(total) + ',' + fmt(loss.seg) + ',' + fmt(loss.euc) + ',' +
                 fmt(loss.js) + "\r\n";
    result.steps = step;
    if (progress && (step % 10 == 0 || step == 1)) {
      *progress << "step " << step << "/" << cfg.train.max_steps << " loss " << fixed(total, 5) << std::endl;
    }
    const bool last = step == cfg.train.max_steps;
    if (validate && ((cfg.train.eval_every > 0 && step % cfg.train.eval_every == 0) || last)) {
      write_file_atomic(out_dir / "train_log.csv", train_log);
      run_eval(step);
    }
  }
  write_file_atomic(out_dir / "train_log.csv", train_log);
  if (validate && cfg.train.max_steps == 0) write_file_atomic(out_dir / "val_log.csv", val_log);
  save_checkpoint(out_dir / "last.ckpt", model, state, cfg, result.steps);
  if (!validate || cfg.train.max_steps == 0) {
    save_checkpoint(out_dir / "best.ckpt", model, state, cfg, result.steps);
    result.best_step = result.steps;
    result.best_score = 0.0;
  }
  return result;
}

std::string eval_report(const EvalSummary& s, std::size_t input_size, std::size_t skipped) {
  std::ostringstream os;
  os << "Evaluation report\n";
  os << "frames evaluated: " << s.frames.size() << "\n";
  os << "frames skipped: " << skipped << "\n";
  os << "model input size: " << input_size << "x" << input_size << "\n";
  os << "mask threshold: 0.5\n\n";
  os << "IoU oolemma: " << mean_std(s.iou_oolemma) << "\n";
  os << "IoU pipette: " << mean_std(s.iou_pipette) << "\n";
  os << "Needle tip distance (" << input_size << "-pixel frame): " << mean_std(s.tip_px) << "\n";
  os << "Needle tip distance (512-pixel frame): " << mean_std(s.tip_512) << "\n";
  os << "(mean [population stddev])\n\n";
  os << "Inference time per frame: " << fixed(s.latency_ms.mean, 1) << " ms (median "
     << fixed(median(s.latency_ms.values), 1) << " ms)\n";
  return os.str();
}

EvalSummary cmd_eval(const fs::path& ckpt, const fs::path& data_dir, const fs::path& out_dir, std::ostream* progress) {
  const Checkpoint ck = load_checkpoint(ckpt);
  Model<float> model = restore_model(ck);
  const std::size_t S = ck.config.model.input_size;
  const Dataset data = load_dataset(data_dir, S);
  for (const auto& s : data.skipped) {
    if (progress) *progress << "warning: skipped " << s << '\n';
  }
  if (data.samples.empty()) throw InputError("no usable samples in " + data_dir.string());
  EvalSummary summary = evaluate(model, data.samples);
  ensure_dir(out_dir);

  std::string per_frame = "id,iou_oolemma,iou_pipette,tip_x,tip_y,tip_error_px,tip_error_512\r\n";
  std::string latency = "id,latency_ms\r\n";
  for (const auto& f : summary.frames) {
    per_frame += csv_field(f.id) + ',' + fmt(f.iou_oolemma) + ',' + fmt(f.iou_pipette) + ',' + fmt(f.predicted_tip.x) +
                 ',' + fmt(f.predicted_tip.y) + ',' + fmt(f.tip_error_px) + ',' + fmt(f.tip_error_512) + "\r\n";
    latency += csv_field(f.id) + ',' + fixed(f.latency_ms, 3) + "\r\n";
  }
  std::string report = eval_report(summary, S, data.skipped.size());
  if (!data.skipped.empty()) {
    report += "\nSkipped annotations (" + std::to_string(data.skipped.size()) + "):\n";
    for (const auto& s : data.skipped) report += "  " + s + "\n";
  }
  write_file_atomic(out_dir / "per_frame.csv", per_frame);
  write_file_atomic(out_dir / "latency.csv", latency);
  write_file_atomic(out_dir / "tip_histogram.csv", histogram_csv(error_histogram(summary.tip_512.values, 1.0)));
  write_file_atomic(out_dir / "report.txt", report);
  if (progress) *progress << report;
  return summary;
}

namespace {

Image overlay(const Image& gray, const Prediction& p) {
  const std::size_t S = gray.width;
  Image out(S, S, 3);
  static constexpr int tint[2][3] = {{0, 255, 0}, {0, 128, 255}};
  for (std::size_t y = 0; y < S; ++y) {
    for (std::size_t x = 0; x < S; ++x) {
      double rgb[3];
      for (auto& c : rgb) c = gray.at(x, y);
      for (std::size_t k = 0; k < 2; ++k) {
        if (!p.masks[(k * S + y) * S + x]) continue;
        for (int c = 0; c < 3; ++c) rgb[c] = 0.6 * rgb[c] + 0.4 * tint[k][c];
      }
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = std::uint8_t(std::lround(rgb[c]));
    }
  }
  const double r = std::max(2.0, double(S) / 128.0);
  for (std::size_t y = 0; y < S; ++y) {
    for (std::size_t x = 0; x < S; ++x) {
      if (std::hypot(double(x) - p.tip.x, double(y) - p.tip.y) > r) continue;
      out.at(x, y, 0) = 255;
      out.at(x, y, 1) = 0;
      out.at(x, y, 2) = 0;
    }
  }
  return out;
}

}  // namespace

std::size_t cmd_infer(const fs::path& ckpt, const fs::path& input, const fs::path& out_dir, std::ostream* errors) {
  const Checkpoint ck = load_checkpoint(ckpt);
  Model<float> model = restore_model(ck);
  const std::size_t S = ck.config.model.input_size;
  std::vector<fs::path> images;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input)) {
      if (e.is_regular_file() && e.path().extension() == ".png") images.push_back(e.path());
    }
    std::sort(images.begin(), images.end());
  } else {
    images.push_back(input);
  }
  ensure_dir(out_dir);
  std::size_t failures = 0;
  for (const auto& path : images) {
    try {
      const Image original = read_png(path);
      const Image img = preprocess(original, S);
      const Prediction p = predict(model, img);
      json masks;
      for (std::size_t k = 0; k < 2; ++k) {
        const std::vector<std::uint8_t> m(p.masks.begin() + std::ptrdiff_t(k * S * S),
                                          p.masks.begin() + std::ptrdiff_t((k + 1) * S * S));
        masks[class_names()[k]] = {{"size", {S, S}}, {"counts", run_length_encode(m)}};
      }
      const double sx = double(original.width) / double(S), sy = double(original.height) / double(S);
      const json j = {
          {"image", path.filename().string()},
          {"input_size", S},
          {"masks", masks},
          {"needle_tip", {{"x", p.tip.x}, {"y", p.tip.y}}},
          {"needle_tip_original", {{"x", (p.tip.x + 0.5) * sx - 0.5}, {"y", (p.tip.y + 0.5) * sy - 0.5}}},
          {"heatmap_max", p.heatmap_max},
      };
      const std::string stem = path.stem().string();
      write_file_atomic(out_dir / (stem + ".json"), j.dump(2) + "\n");
      write_png_atomic(out_dir / (stem + "_overlay.png"), overlay(img, p));
    } catch (const std::exception& e) {
      ++failures;
      if (errors) *errors << "error: " << path.string() << ": " << e.what() << '\n';
    }
  }
  return failures;
}

std::vector<AnnotationRecord> load_annotation_records(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json" && e.path().filename() != "manifest.json") {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<AnnotationRecord> out;
  for (const auto& f : files) {
    const Annotation a = read_annotation(f);
    if (!a.operator_id || !a.round) throw InputError(f.string() + ": annotation lacks operator/round metadata");
    AnnotationRecord r;
    r.frame_id = a.frame_id.value_or(a.id);
    r.operator_id = *a.operator_id;
    r.round = *a.round;
    r.polygons = {{"oolemma", a.oolemma}, {"pipette", a.pipette}};
    // Polygons are in corner coordinates, tips in index coordinates; distances are unaffected.
    r.tip = a.needle_tip;
    r.image_size = a.image_size;
    out.push_back(std::move(r));
  }
  if (out.empty()) throw InputError("no annotation files in " + dir.string());
  return out;
}

std::string cmd_agreement(const fs::path& annotations, AgreementSelection mode, const fs::path& out_dir) {
  const auto records = load_annotation_records(annotations);
  std::set<std::string> operators;
  std::set<int> rounds;
  for (const auto& r : records) {
    operators.insert(r.operator_id);
    rounds.insert(r.round);
  }
  if (operators.size() < 2 && rounds.size() < 2) throw InputError("need >=2 operators or >=2 rounds");
  std::optional<AgreementReport> inter, intra;
  if (mode != AgreementSelection::Intra) inter = pairwise_agreement(records, AgreementMode::Inter);
  if (mode != AgreementSelection::Inter) intra = pairwise_agreement(records, AgreementMode::Intra);
  const std::string table = agreement_table(inter, intra);
  ensure_dir(out_dir);
  write_file_atomic(out_dir / "agreement.txt", table);
  write_file_atomic(out_dir / "agreement.csv", agreement_csv(inter, intra));
  return table;
}

}  // namespace icsinet
