#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "icsinet/imgproc.hpp"
#include "icsinet/losses.hpp"
#include "icsinet/metrics.hpp"
#include "icsinet/model.hpp"
#include "icsinet/optim.hpp"
#include "icsinet/synthgen.hpp"

namespace icsinet {

struct TrainConfig {
  std::size_t batch_size = 4;
  std::size_t max_steps = 1000;
  std::size_t eval_every = 100;
  std::uint64_t seed = 0;
};

struct DataConfig {
  std::string train_dir;
  std::string val_dir;
  std::string test_dir;
};

struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  OptimConfig optim;
  AugmentConfig augment;
  TrainConfig train;
  DataConfig data;

  void validate() const;
};

/// Parses a JSON run configuration; missing keys keep defaults, unknown keys are rejected.
RunConfig parse_run_config(const std::string& text, const std::string& origin = "config");
RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_to_json(const RunConfig& cfg);

/// Scene generator settings from the same JSON style (all keys optional).
SceneConfig parse_scene_config(const std::string& text, const std::string& origin = "config");

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  RunConfig config;
  std::uint64_t step = 0;
  std::uint64_t optim_t = 0;
  std::vector<NamedTensor> tensors;  // parameters, running stats, optimizer moments
};

/// Binary layout, little-endian: "ICSN" | u32 version | u64 header length | header JSON
/// {"config", "step", "optim_t"} | u32 tensor count | per tensor: u16 name length, name,
/// u8 dtype (0 = float32), u8 rank, u32 dims..., data, u32 CRC32 of the preceding record.
std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, const OptimState<float>& state,
                     const RunConfig& cfg, std::uint64_t step);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Model (and optionally optimizer state) restored from a checkpoint.
Model<float> restore_model(const Checkpoint& ck);
OptimState<float> restore_optim(const Checkpoint& ck, const Model<float>& model);

// ---------------------------------------------------------------------------
// Data

/// Image preprocessed to `size` (grayscale, bilinear resize, CLAHE), masks nearest, tip rescaled.
Sample fit_sample(const Sample& s, std::size_t size);

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> skipped;  // annotation files that failed to load, with reasons
};

Dataset load_dataset(const std::filesystem::path& dir, std::size_t size);

struct Batch {
  Tensor<float> images;  // [N,1,S,S] in [0,1]
  Tensor<float> masks;   // [N,2,S,S]
  TipCoords<float> tips;  // normalized
  std::vector<std::string> ids;
};

Batch make_batch(const std::vector<Sample>& samples);
Tensor<float> image_tensor(const std::vector<const Image*>& images);

// ---------------------------------------------------------------------------
// Evaluation

struct FrameResult {
  std::string id;
  double iou_oolemma = 0.0;
  double iou_pipette = 0.0;
  Point predicted_tip;  // index coordinates at model input size
  double tip_error_px = 0.0;      // at model input size
  double tip_error_512 = 0.0;     // rescaled to a 512-pixel frame
  double latency_ms = 0.0;
};

struct EvalSummary {
  std::vector<FrameResult> frames;
  Stat iou_oolemma, iou_pipette, tip_px, tip_512, latency_ms;
  /// Checkpoint selection score: mean IoU minus tip error as a fraction of the frame.
  double score(std::size_t input_size) const;
};

EvalSummary evaluate(Model<float>& model, const std::vector<Sample>& samples);

struct Prediction {
  std::vector<std::uint8_t> masks;  // [2][S][S] thresholded at 0.5
  Point tip;                        // index coordinates
  double heatmap_max = 0.0;
};

Prediction predict(Model<float>& model, const Image& preprocessed);

// ---------------------------------------------------------------------------
// Commands. Each returns normally on success and throws on error.

std::vector<ManifestEntry> cmd_gen_data(const SceneConfig& cfg, std::size_t count, const std::filesystem::path& out,
                                        std::uint64_t first = 0, std::optional<Split> split = std::nullopt);

struct TrainResult {
  std::uint64_t steps = 0;
  double best_score = 0.0;
  std::uint64_t best_step = 0;
  std::optional<EvalSummary> final_eval;
};

/// Writes train_log.csv, val_log.csv, best.ckpt and last.ckpt under out_dir.
TrainResult cmd_train(const RunConfig& cfg, const std::filesystem::path& out_dir, std::ostream* progress = nullptr);

/// Writes report.txt, per_frame.csv and tip_histogram.csv under out_dir.
EvalSummary cmd_eval(const std::filesystem::path& ckpt, const std::filesystem::path& data_dir,
                     const std::filesystem::path& out_dir, std::ostream* progress = nullptr);
std::string eval_report(const EvalSummary& s, std::size_t input_size, std::size_t skipped);

/// One JSON and one overlay PNG per input image; returns the number of failures.
std::size_t cmd_infer(const std::filesystem::path& ckpt, const std::filesystem::path& input,
                      const std::filesystem::path& out_dir, std::ostream* errors = nullptr);

enum class AgreementSelection { Inter, Intra, Both };
/// Writes agreement.txt and agreement.csv; returns the table text.
std::string cmd_agreement(const std::filesystem::path& annotations, AgreementSelection mode,
                          const std::filesystem::path& out_dir);
std::vector<AnnotationRecord> load_annotation_records(const std::filesystem::path& dir);

struct OpCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  double tolerance = 0.0;
  double seconds = 0.0;
  bool passed() const { return checked > 0 && max_rel_error < tolerance; }
};

/// Finite-difference check of every differentiable op on random float64 inputs.
std::vector<OpCheck> op_gradchecks(std::uint64_t seed = 1);
/// total_loss on a depth-1, 16x16 model against central differences over `coords` sampled parameters.
OpCheck model_gradcheck(std::uint64_t seed = 1, std::size_t coords = 64);

/// Runs op_gradchecks (plus model_gradcheck when `full`); returns true when every check passes.
bool cmd_gradcheck(bool full, std::ostream& out);

/// Worker cap from ICSINET_THREADS (default 1).
std::size_t worker_threads();
/// Applies worker_threads() to the BLAS backend.
void apply_thread_limit();

std::string run_length_encode(const std::vector<std::uint8_t>& mask);

}  // namespace icsinet
