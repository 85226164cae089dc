#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "icsinet/errors.hpp"
#include "icsinet/pipeline.hpp"

namespace fs = std::filesystem;
using namespace icsinet;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-head nested U-Net for ICSI frame segmentation and needle tip detection"};
  app.require_subcommand(1);

  std::string config, out, ckpt, data, input, annotations, mode = "both", split;
  std::size_t count = 0;
  std::uint64_t first = 0;
  bool full = false;

  auto* gen = app.add_subcommand("gen-data", "render a synthetic labeled dataset");
  gen->add_option("--config", config, "scene config JSON (optional)");
  gen->add_option("--count", count, "number of samples")->required();
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--first", first, "index of the first sample");
  gen->add_option("--split", split, "put every sample in this split")->check(CLI::IsMember({"train", "val", "test"}));

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config, "run config JSON")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a labeled directory");
  eval->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data, "directory of annotations")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--out", out, "report directory")->required();

  auto* infer = app.add_subcommand("infer", "predict masks and tip for images");
  infer->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  infer->add_option("--input", input, "PNG file or directory")->required()->check(CLI::ExistingPath);
  infer->add_option("--out", out, "output directory")->required();

  auto* agree = app.add_subcommand("agreement", "inter/intra-operator agreement report");
  agree->add_option("--annotations", annotations, "directory of operator annotations")
      ->required()
      ->check(CLI::ExistingDirectory);
  agree->add_option("--mode", mode, "inter, intra or both")->check(CLI::IsMember({"inter", "intra", "both"}));
  agree->add_option("--out", out, "report directory")->required();

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  grad->add_flag("--full", full, "include the end-to-end micro-model check");

  CLI11_PARSE(app, argc, argv);

  try {
    apply_thread_limit();
    if (*gen) {
      const SceneConfig sc = config.empty() ? SceneConfig{} : parse_scene_config(read_text(config), config);
      std::optional<Split> forced;
      if (!split.empty()) forced = split_from_name(split);
      const auto made = cmd_gen_data(sc, count, out, first, forced);
      std::cout << "wrote " << made.size() << " samples to " << out << '\n';
    } else if (*train) {
      const RunConfig cfg = load_run_config(config);
      std::cout << "parameters: " << Model<float>(cfg.model).param_count() << '\n';
      const auto r = cmd_train(cfg, out, &std::cout);
      std::cout << "trained " << r.steps << " steps; best checkpoint at step " << r.best_step << '\n';
    } else if (*eval) {
      cmd_eval(ckpt, data, out, &std::cout);
    } else if (*infer) {
      const std::size_t failures = cmd_infer(ckpt, input, out, &std::cerr);
      if (failures) {
        std::cerr << failures << " image(s) failed\n";
        return 1;
      }
    } else if (*agree) {
      const auto sel = mode == "inter" ? AgreementSelection::Inter
                       : mode == "intra" ? AgreementSelection::Intra
                                         : AgreementSelection::Both;
      std::cout << cmd_agreement(annotations, sel, out);
    } else if (*grad) {
      return cmd_gradcheck(full, std::cout) ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
