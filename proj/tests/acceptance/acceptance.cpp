// One line per acceptance criterion; exit status is nonzero when any criterion fails.
// ICSINET_ACCEPT_ONLY=7,10 restricts the run to the listed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>

#include "../fixtures.hpp"
#include "icsinet/errors.hpp"
#include "icsinet/pipeline.hpp"

using namespace icsinet;
namespace fs = std::filesystem;

namespace {

// Desk-scale training surrogate. Pilot runs with this setup (seed 7 scenes, eval every 200):
//   channels [8,16,32,64], default augmentation: best IoU 0.969 / 0.976, tip 5.29 px (median 3.0)
//   same without elastic and erase:               best IoU 0.975 / 0.975, tip 4.80 px
//   channels [8,16,32,128], no elastic or erase:  best IoU 0.960 / 0.973, tip 5.02 px
// IoU clears 0.85 easily. The tip mean sits at 4.2-6 px across checkpoints, driven by a few
// sub-pixel needles over the dark halo; the 4 px bar is kept as is.
struct DeskScale {
  static constexpr std::size_t kTrain = 200;
  static constexpr std::size_t kVal = 50;
  static constexpr std::size_t kSize = 128;
  static constexpr std::size_t kMaxSteps = 2000;
  static constexpr std::size_t kEvalEvery = 250;
  static constexpr double kMinIou = 0.85;
  static constexpr double kMaxTipPx = 4.0;
  static constexpr double kMaxMinutes = 30.0;
};

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("icsinet_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Outcome gradient_ops() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto checks = op_gradchecks();
  std::set<std::string> required{"add",        "relu",       "conv2d",  "batchnorm2d", "maxpool2x2",   "upsample",
                                 "concat",     "spatial_softmax",      "dsnt",        "dice_loss",
                                 "euclidean_loss", "js_loss"};
  bool ok = true;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : checks) {
    ok = ok && c.passed();
    if (c.max_rel_error >= worst) {
      worst = c.max_rel_error;
      worst_name = c.name;
    }
    for (auto it = required.begin(); it != required.end();) {
      it = c.name.rfind(*it, 0) == 0 ? required.erase(it) : std::next(it);
    }
  }
  const double secs = seconds_since(t0);
  ok = ok && required.empty() && secs < 120.0;
  return {ok, std::to_string(checks.size()) + " checks, worst " + num(worst, 3) + " (" + worst_name + "), tol 1e-4" +
                  (required.empty() ? "" : ", missing ops") + ", " + num(secs, 3) + " s"};
}

Outcome gradient_model() {
  const auto c = model_gradcheck(1, 64);
  const bool ok = c.passed() && c.checked >= 50 && c.seconds < 300.0;
  return {ok, std::to_string(c.checked) + " parameters, max rel err " + num(c.max_rel_error, 3) + ", tol 1e-3, " +
                  num(c.seconds, 3) + " s"};
}

Outcome dsnt_exact() {
  const std::size_t S = 64;
  double worst = 0.0;
  for (std::size_t i = 0; i < S; ++i) {
    for (std::size_t j = 0; j < S; ++j) {
      std::vector<double> v(S * S, 0.0);
      v[i * S + j] = 1.0;
      const auto c = dsnt(Heatmap<double>{Tensor<double>({1, S, S}, std::move(v))});
      worst = std::max(worst, std::abs(c.xy.data()[0] - (2.0 * double(j) + 1 - double(S)) / double(S)));
      worst = std::max(worst, std::abs(c.xy.data()[1] - (2.0 * double(i) + 1 - double(S)) / double(S)));
    }
  }
  const auto u = dsnt(Heatmap<double>{Tensor<double>({1, S, S}, 1.0 / double(S * S))});
  const double uniform_err = std::max(std::abs(u.xy.data()[0]), std::abs(u.xy.data()[1]));
  return {worst <= 1e-12 && uniform_err <= 1e-12,
          "one-hot max err " + num(worst, 3) + ", uniform |xy| " + num(uniform_err, 3)};
}

Outcome metric_oracles() {
  Rng rng(2024);
  const std::size_t n = 16 * 16;
  double iou_err = 0.0, dice_err = 0.0;
  for (int k = 0; k < 1000; ++k) {
    std::vector<std::uint8_t> a(n), b(n);
    const double pa = uniform01(rng), pb = uniform01(rng);
    for (auto& v : a) v = bernoulli(rng, pa);
    for (auto& v : b) v = bernoulli(rng, pb);
    std::size_t inter = 0, uni = 0, ca = 0, cb = 0;
    for (std::size_t i = 0; i < n; ++i) {
      inter += a[i] && b[i];
      uni += a[i] || b[i];
      ca += a[i];
      cb += b[i];
    }
    const double iou_ref = uni == 0 ? 1.0 : double(inter) / double(uni);
    iou_err = std::max(iou_err, std::abs(iou(a, b) - iou_ref));
    const double dice_ref = 1.0 - (2.0 * double(inter) + 1.0) / (double(ca) + double(cb) + 1.0);
    const Tensor<double> ta({1, 1, 16, 16}, std::vector<double>(a.begin(), a.end()));
    const Tensor<double> tb({1, 1, 16, 16}, std::vector<double>(b.begin(), b.end()));
    dice_err = std::max(dice_err, std::abs(dice_loss(ta, tb, 1.0).item() - dice_ref));
  }
  std::size_t mismatches = 0;
  for (int k = 0; k < 100; ++k) {
    const Polygon p = fixtures::random_convex(rng, 32);
    const Mask m = polygon_to_mask(p, 32);
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x)
        mismatches += m.data[y * 32 + x] != (fixtures::inside_convex(p, double(x) + 0.5, double(y) + 0.5) ? 1 : 0);
  }
  return {iou_err <= 1e-9 && dice_err <= 1e-9 && mismatches == 0,
          "iou err " + num(iou_err, 3) + ", dice err " + num(dice_err, 3) + ", polygon mismatches " +
              std::to_string(mismatches)};
}

Outcome diffgrad() {
  OptimConfig cfg;
  Tensor<double> theta({1}, {1.0}, true);
  std::vector<Tensor<double>> params{theta};
  auto state = OptimState<double>::init(params);
  backward(sum(mul(theta, theta)));
  diffgrad_step<double>(params, state, cfg);
  const double one = theta.data()[0];
  const bool one_ok = std::abs(one - 0.9991192029220222) <= 1e-10;

  // Constant gradient: from step 2 on the update is exactly half of Adam's.
  Tensor<double> c({1}, {1.0}, true);
  std::vector<Tensor<double>> cp{c};
  auto cs = OptimState<double>::init(cp);
  bool half_ok = true;
  for (int step = 1; step <= 20; ++step) {
    c.zero_grad();
    backward(sum(scale(c, 3.0)));
    const double m = cfg.beta1 * cs.m[0][0] + (1 - cfg.beta1) * 3.0;
    const double v = cfg.beta2 * cs.v[0][0] + (1 - cfg.beta2) * 9.0;
    const double t = double(cs.t + 1);
    const double adam = cfg.lr * (m / (1 - std::pow(cfg.beta1, t))) / (std::sqrt(v / (1 - std::pow(cfg.beta2, t))) + cfg.eps);
    const double before = c.data()[0];
    diffgrad_step<double>(cp, cs, cfg);
    if (step >= 2) half_ok = half_ok && c.data()[0] == before - 0.5 * adam;
  }

  Tensor<double> q({1}, {1.0}, true);
  std::vector<Tensor<double>> qp{q};
  auto qs = OptimState<double>::init(qp);
  OptimConfig fast;
  fast.lr = 0.1;
  for (int i = 0; i < 50; ++i) {
    q.zero_grad();
    backward(sum(mul(q, q)));
    diffgrad_step<double>(qp, qs, fast);
  }
  const bool conv_ok = std::abs(q.data()[0]) < 0.5;
  return {one_ok && half_ok && conv_ok, "theta1 " + num(one, 12) + ", half-Adam " + (half_ok ? "exact" : "differs") +
                                            ", |theta50| " + num(std::abs(q.data()[0]))};
}

Outcome js() {
  Rng rng(6);
  const std::size_t n = 16;
  auto random_heatmap = [&] {
    std::vector<double> v(n);
    for (auto& x : v) x = uniform(rng, -3, 3);
    Heatmap<double> h;
    {
      NoGradGuard g;
      h = spatial_softmax(Tensor<double>({1, 1, 4, 4}, std::move(v)));
    }
    return h;
  };
  const auto p = random_heatmap();
  const double same = std::abs(js_loss(p, p).item());
  std::vector<double> a(n, 0.0), b(n, 0.0);
  a[3] = 1.0;
  b[12] = 1.0;
  const double disjoint = js_loss(Heatmap<double>{Tensor<double>({1, 4, 4}, a)},
                                  Heatmap<double>{Tensor<double>({1, 4, 4}, b)}).item();
  double asym = 0.0;
  for (int k = 0; k < 100; ++k) {
    const auto x = random_heatmap(), y = random_heatmap();
    asym = std::max(asym, std::abs(js_loss(x, y).item() - js_loss(y, x).item()));
  }
  const bool ok = same <= 1e-12 && std::abs(disjoint - std::numbers::ln2) <= 1e-9 && asym <= 1e-12;
  return {ok, "identical " + num(same, 3) + ", disjoint " + num(disjoint, 12) + " (ln 2), max asymmetry " +
                  num(asym, 3)};
}

// Shared by criteria 7 and 11.
struct DeskRun {
  fs::path dir;
  std::optional<TrainResult> result;
  double train_seconds = 0.0;
  std::string error;
};

DeskRun& desk_run() {
  static DeskRun run = [] {
    DeskRun r;
    r.dir = scratch("desk");
    try {
      SceneConfig sc;
      sc.image_size = DeskScale::kSize;
      sc.seed = 7;
      generate_dataset(sc, DeskScale::kTrain, r.dir / "data", 0, Split::Train);
      generate_dataset(sc, DeskScale::kVal, r.dir / "data", DeskScale::kTrain, Split::Val);
      RunConfig cfg;
      cfg.model.input_size = DeskScale::kSize;
      cfg.model.depth = 3;
      cfg.model.channels = {8, 16, 32, 64};
      cfg.model.seed = 1;
      cfg.train.batch_size = 4;
      cfg.train.max_steps = DeskScale::kMaxSteps;
      cfg.train.eval_every = DeskScale::kEvalEvery;
      cfg.train.seed = 1;
      cfg.data.train_dir = (r.dir / "data" / "train").string();
      cfg.data.val_dir = (r.dir / "data" / "val").string();
      const auto t0 = std::chrono::steady_clock::now();
      r.result = cmd_train(cfg, r.dir / "run");
      r.train_seconds = seconds_since(t0);
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    return r;
  }();
  return run;
}

Outcome desk_scale() {
  DeskRun& r = desk_run();
  if (!r.result) return {false, "training failed: " + r.error};
  // Validation metrics of the selected (best) checkpoint.
  const Checkpoint ck = load_checkpoint(r.dir / "run" / "best.ckpt");
  Model<float> model = restore_model(ck);
  const Dataset val = load_dataset(r.dir / "data" / "val", DeskScale::kSize);
  const EvalSummary e = evaluate(model, val.samples);
  const double minutes = r.train_seconds / 60.0;
  const bool ok = e.iou_oolemma.mean >= DeskScale::kMinIou && e.iou_pipette.mean >= DeskScale::kMinIou &&
                  e.tip_px.mean <= DeskScale::kMaxTipPx && minutes <= DeskScale::kMaxMinutes;
  return {ok, "best step " + std::to_string(ck.step) + "/" + std::to_string(r.result->steps) + ": IoU oolemma " +
                  num(e.iou_oolemma.mean) + ", pipette " + num(e.iou_pipette.mean) + " (>= 0.85), tip " +
                  num(e.tip_px.mean) + " px (<= 4, median " + num(median(e.tip_px.values)) + "), " + num(minutes, 3) + " min (<= 30)"};
}

Outcome parameter_count() {
  const std::size_t n = Model<float>(ModelConfig{}).param_count();
  const double rel = (double(n) - 2.6e6) / 2.6e6;
  return {std::abs(rel) <= 0.25, "default config has " + std::to_string(n) + " parameters (" +
                                      num(100.0 * rel, 3) + "% from 2.6M)"};
}

Outcome agreement() {
  const auto recs = fixtures::two_operator_records();
  const auto inter = pairwise_agreement(recs, AgreementMode::Inter);
  const auto intra = pairwise_agreement(recs, AgreementMode::Intra);
  auto exact = [](const Stat& s, const fixtures::Expected& e) {
    return std::abs(s.mean - e.mean) <= 1e-15 && std::abs(s.stddev - e.stddev) <= 1e-15;
  };
  const bool stats_ok = exact(inter.iou.at("oolemma"), fixtures::kInterOolemma) &&
                        exact(inter.tip, fixtures::kInterTip) &&
                        exact(intra.iou.at("oolemma"), fixtures::kIntraOolemma) &&
                        inter.iou.at("pipette").mean == 1.0 && inter.iou.at("pipette").stddev == 0.0;
  const std::string table = agreement_table(inter, intra);
  const bool layout_ok = table.find("Interoperator") != std::string::npos &&
                         table.find("Intraoperator") != std::string::npos &&
                         table.find("0.583 [0.312]") != std::string::npos &&
                         table.find("2.667 [2.055]") != std::string::npos;
  const std::vector<double> same{0.1, 0.4, 0.7};
  const auto w0 = welch_t_test(same, same);
  const std::vector<double> a{0, 1}, b{10, 11};
  const auto w = welch_t_test(a, b);
  const bool welch_ok = w0.t == 0.0 && w0.p == 1.0 && std::abs(w.p - 0.004962809790010865) <= 1e-3;
  return {stats_ok && layout_ok && welch_ok, std::string("fixture stats ") + (stats_ok ? "exact" : "differ") +
                                                 ", layout " + (layout_ok ? "ok" : "wrong") + ", identical t=" +
                                                 num(w0.t) + " p=" + num(w0.p) + ", {0,1} vs {10,11} p=" +
                                                 num(w.p, 6)};
}

Outcome determinism() {
  const fs::path dir = scratch("determinism");
  SceneConfig sc;
  sc.image_size = 64;
  sc.seed = 11;
  generate_dataset(sc, 12, dir / "data", 0, Split::Train);
  generate_dataset(sc, 4, dir / "data", 12, Split::Val);
  RunConfig cfg;
  cfg.model.input_size = 64;
  cfg.model.depth = 3;
  cfg.model.channels = {4, 8, 16, 32};
  cfg.train.max_steps = 12;
  cfg.train.eval_every = 6;
  cfg.data.train_dir = (dir / "data" / "train").string();
  cfg.data.val_dir = (dir / "data" / "val").string();
  cmd_train(cfg, dir / "a");
  cmd_train(cfg, dir / "b");
  const bool csv_ok = slurp(dir / "a" / "train_log.csv") == slurp(dir / "b" / "train_log.csv") &&
                      slurp(dir / "a" / "val_log.csv") == slurp(dir / "b" / "val_log.csv") &&
                      slurp(dir / "a" / "last.ckpt") == slurp(dir / "b" / "last.ckpt");

  // In-memory model evaluated before saving, then the reloaded copy.
  const Checkpoint trained = load_checkpoint(dir / "a" / "last.ckpt");
  Model<float> model = restore_model(trained);
  const auto state = restore_optim(trained, model);
  const Dataset val = load_dataset(dir / "data" / "val", 64);
  const EvalSummary before = evaluate(model, val.samples);
  save_checkpoint(dir / "resaved.ckpt", model, state, cfg, trained.step);
  Model<float> reloaded = restore_model(load_checkpoint(dir / "resaved.ckpt"));
  const EvalSummary after = evaluate(reloaded, val.samples);
  bool eval_ok = before.frames.size() == after.frames.size();
  for (std::size_t i = 0; eval_ok && i < before.frames.size(); ++i) {
    const auto &x = before.frames[i], &y = after.frames[i];
    eval_ok = x.iou_oolemma == y.iou_oolemma && x.iou_pipette == y.iou_pipette &&
              x.predicted_tip.x == y.predicted_tip.x && x.predicted_tip.y == y.predicted_tip.y;
  }
  eval_ok = eval_ok && eval_report(before, 64, 0).substr(0, 300) == eval_report(after, 64, 0).substr(0, 300);

  std::string bytes = slurp(dir / "resaved.ckpt");
  bytes[bytes.size() / 2] ^= 0x01;
  std::string corrupt_msg;
  try {
    decode_checkpoint(bytes);
  } catch (const CorruptionError& e) {
    corrupt_msg = e.what();
  }
  const bool corrupt_ok = corrupt_msg.find("checksum") != std::string::npos;
  fs::remove_all(dir);
  return {csv_ok && eval_ok && corrupt_ok, std::string("repeat runs ") + (csv_ok ? "identical" : "differ") +
                                               ", reload eval " + (eval_ok ? "bitwise identical" : "differs") +
                                               ", corruption: " + (corrupt_ok ? corrupt_msg : "not detected")};
}

Outcome throughput() {
  DeskRun& r = desk_run();
  if (!r.result) return {false, "no trained model: " + r.error};
  const auto s = cmd_eval(r.dir / "run" / "best.ckpt", r.dir / "data" / "val", r.dir / "eval");
  const std::string report = slurp(r.dir / "eval" / "report.txt");
  const auto pos = report.find("Inference time per frame:");
  const bool ok = pos != std::string::npos && s.latency_ms.count == s.frames.size() && s.latency_ms.mean > 0.0;
  return {ok, "mean latency " + num(s.latency_ms.mean, 4) + " ms per " + std::to_string(DeskScale::kSize) +
                  "px frame over " + std::to_string(s.frames.size()) + " frames (report only)"};
}

}  // namespace

int main() {
  apply_thread_limit();
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient correctness per op", gradient_ops},
      {"end-to-end gradient on micro-model", gradient_model},
      {"DSNT exactness", dsnt_exact},
      {"metric oracles", metric_oracles},
      {"diffGrad", diffgrad},
      {"JS loss", js},
      {"desk-scale training surrogate", desk_scale},
      {"parameter count", parameter_count},
      {"agreement tool", agreement},
      {"determinism and persistence", determinism},
      {"throughput report", throughput},
  };
  std::set<int> only;
  if (const char* env = std::getenv("ICSINET_ACCEPT_ONLY")) {
    std::stringstream ss(env);
    std::string tok;
    while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
  }
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = int(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %2d %s: %s -- %s\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
