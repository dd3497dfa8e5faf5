// Command-line front end: describe, train, eval, predict, gradcheck, synth.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "plunet/analysis.hpp"
#include "plunet/arch.hpp"
#include "plunet/data.hpp"
#include "plunet/gradcheck.hpp"
#include "plunet/metrics.hpp"
#include "plunet/parallel.hpp"
#include "plunet/train.hpp"

namespace {

using namespace plunet;

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

ArchConfig resolve_arch(const std::string& arch, const std::string& config) {
  if (!config.empty()) {
    const auto j = read_json_file(config);
    // A train config carries its architecture under "arch".
    if (j.is_object() && j.contains("arch") && !j.contains("variant")) {
      const auto& a = j.at("arch");
      return a.is_string() ? ArchConfig::preset(a.get<std::string>()) : ArchConfig::from_json(a);
    }
    return ArchConfig::from_json(j);
  }
  return ArchConfig::preset(arch);
}

std::pair<std::int64_t, std::int64_t> parse_size(const std::string& text) {
  std::int64_t h = 0, w = 0;
  char comma = 0;
  std::istringstream is(text);
  if (!(is >> h >> comma >> w) || comma != ',' || !is.eof() || h < 1 || w < 1) {
    throw std::invalid_argument("size must look like H,W with positive extents, got '" + text + "'");
  }
  return {h, w};
}

struct Options {
  std::string arch = "plunet";
  std::string config;
  std::string input;
  bool json = false;
  std::uint64_t seed = 42;
  std::string out;
  std::string ckpt;
  std::string data;
  double threshold = metrics::kDefaultThreshold;
  std::int64_t epochs = 0;
  std::int64_t batch_size = 0;
  bool all = false;
  std::vector<std::string> targets;
  std::int64_t count = 10;
  std::string size = "64,64";
  bool seed_given = false;
  bool threshold_given = false;
};

int cmd_describe(const Options& o) {
  const ModelGraph model(resolve_arch(o.arch, o.config));
  Shape in{1, model.config().in_channels, 96, 96};
  if (!o.input.empty()) in = parse_shape(o.input);
  const auto report = analysis::cost_report(model, in);
  if (o.json) {
    std::cout << report.to_json().dump(2) << '\n';
  } else {
    std::cout << "architecture " << variant_name(model.config().variant) << ": "
              << model.config().to_json().dump() << '\n';
    report.print_table(std::cout);
  }
  return 0;
}

int cmd_train(const Options& o) {
  train::TrainConfig cfg;
  if (!o.config.empty()) {
    cfg = train::TrainConfig::from_json(read_json_file(o.config));
  } else {
    cfg.arch = ArchConfig::preset(o.arch);
  }
  if (o.epochs > 0) cfg.epochs = o.epochs;
  if (o.batch_size > 0) cfg.batch_size = o.batch_size;
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (!o.data.empty()) cfg.data.dir = o.data;
  if (o.seed_given) cfg.seed = o.seed;
  if (o.threshold_given) cfg.threshold = o.threshold;
  cfg.validate();

  const auto split = train::load_data(cfg);
  std::cerr << "train " << split.train.size() << " / val " << split.val.size() << " / test " << split.test.size()
            << " samples, " << cfg.epochs << " epochs, batch " << cfg.batch_size << '\n';
  const auto t0 = std::chrono::steady_clock::now();
  train::TrainOptions opts;
  if (!o.ckpt.empty()) opts.resume = o.ckpt;
  opts.on_epoch = [&](const train::EpochLog& e) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "epoch " << e.epoch << " loss " << e.train_loss;
    if (e.val) std::cerr << " val F1 " << e.val->f1 << " JS " << e.val->js;
    std::cerr << " (" << secs << " s)\n";
  };
  auto result = train::run(cfg, split.train, split.val, opts);
  if (!split.test.empty()) {
    const ModelGraph model(cfg.arch);
    const auto ev = train::evaluate(model, result.last.params, split.test, cfg.threshold);
    nlohmann::json out = ev.summary.to_json();
    out["split"] = "test";
    out["checkpoint"] = (std::filesystem::path(cfg.out_dir) / "last.ckpt").string();
    std::cout << out.dump() << '\n';
  }
  return 0;
}

int cmd_eval(const Options& o) {
  if (o.ckpt.empty() || o.data.empty()) throw std::invalid_argument("eval needs --ckpt and --data");
  auto ck = train::Checkpoint::load(o.ckpt);
  const ModelGraph model(ck.arch);
  const auto samples = data::load_dir(o.data);
  const auto ev = train::evaluate(model, ck.params, samples, o.threshold);
  std::cout << (o.json ? ev.summary.to_json().dump(2) : ev.summary.to_json().dump()) << '\n';
  return 0;
}

int cmd_predict(const Options& o) {
  if (o.ckpt.empty() || o.input.empty() || o.out.empty()) {
    throw std::invalid_argument("predict needs --ckpt, --input <image.ppm> and --out <mask.pgm>");
  }
  auto ck = train::Checkpoint::load(o.ckpt);
  const ModelGraph model(ck.arch);
  const Tensor<float> image = data::read_ppm(o.input);
  const Tensor<float> probs = model.predict(ck.params, image);
  const auto mask = metrics::binarize(probs, o.threshold);
  Tensor<float> out(probs.shape());
  for (std::size_t i = 0; i < mask.data.size(); ++i) out.data()[i] = mask.data[i];
  data::write_pgm_mask(o.out, out);
  std::cerr << "wrote " << o.out << " (" << mask.positives() << " foreground pixels)\n";
  return 0;
}

int cmd_gradcheck(const Options& o) {
  std::vector<std::string> targets = o.targets;
  if (o.all) targets = gradcheck::all_targets();
  if (targets.empty()) throw std::invalid_argument("gradcheck needs --all or one or more target names");
  bool ok = true;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& t : targets) {
    const auto r = gradcheck::run(t, o.seed);
    ok = ok && r.passed;
    if (o.json) {
      rows.push_back({{"target", r.target}, {"max_rel_error", r.max_rel_error}, {"checked", r.checked},
                      {"passed", r.passed}});
    } else {
      std::printf("%-28s max rel err %.3e over %6lld scalars  %s\n", r.target.c_str(), r.max_rel_error,
                  static_cast<long long>(r.checked), r.passed ? "PASS" : "FAIL");
    }
  }
  if (o.json) {
    std::cout << nlohmann::json{{"tolerance", gradcheck::kTolerance}, {"step", gradcheck::kStep}, {"results", rows}}
                     .dump(2)
              << '\n';
  } else {
    std::printf("%s (tolerance %.0e, step %.0e)\n", ok ? "all passed" : "FAILED", gradcheck::kTolerance,
                gradcheck::kStep);
  }
  return ok ? 0 : 1;
}

int cmd_synth(const Options& o) {
  if (o.out.empty()) throw std::invalid_argument("synth needs --out <dir>");
  const auto [h, w] = parse_size(o.size);
  const auto samples = data::synth_generate(o.count, h, w, o.seed);
  for (const auto& s : samples) data::save_sample(s, o.out);
  std::cerr << "wrote " << 2 * samples.size() << " files to " << o.out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Segmentation network engine: analysis, training and evaluation"};
  app.require_subcommand(1);
  Options o;

  auto* describe = app.add_subcommand("describe", "Per-layer parameter and FLOP report");
  describe->add_option("--arch", o.arch, "Preset: unet, lunet, punet, plunet")->capture_default_str();
  describe->add_option("--config", o.config, "Architecture JSON (overrides --arch)");
  describe->add_option("--input", o.input, "Input dims N,C,H,W (default 1,<in_channels>,96,96)");
  describe->add_flag("--json", o.json, "Emit JSON");

  auto* train_cmd = app.add_subcommand("train", "Train on a dataset directory or synthetic data");
  train_cmd->add_option("--arch", o.arch, "Preset when no --config is given")->capture_default_str();
  train_cmd->add_option("--config", o.config, "Train config JSON");
  train_cmd->add_option("--data", o.data, "Dataset directory (default: synthetic)");
  train_cmd->add_option("--out", o.out, "Output directory for checkpoints and log");
  train_cmd->add_option("--ckpt", o.ckpt, "Resume from this checkpoint");
  train_cmd->add_option("--epochs", o.epochs, "Override epochs");
  train_cmd->add_option("--batch-size", o.batch_size, "Override batch size");
  auto* train_seed = train_cmd->add_option("--seed", o.seed, "Seed (overrides the config)");
  auto* train_threshold = train_cmd->add_option("--threshold", o.threshold, "Binarization threshold (overrides the config)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset directory");
  eval->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  eval->add_option("--data", o.data, "Dataset directory")->required();
  eval->add_option("--threshold", o.threshold, "Binarization threshold")->capture_default_str();
  eval->add_flag("--json", o.json, "Pretty-print JSON");

  auto* predict = app.add_subcommand("predict", "Write a binary mask for one image");
  predict->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  predict->add_option("--input", o.input, "Input PPM image")->required();
  predict->add_option("--out", o.out, "Output PGM mask")->required();
  predict->add_option("--threshold", o.threshold, "Binarization threshold")->capture_default_str();

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_flag("--all", o.all, "Every op and block");
  gc->add_option("targets", o.targets, "Op or block names");
  gc->add_option("--seed", o.seed, "Seed")->capture_default_str();
  gc->add_flag("--json", o.json, "Emit JSON");

  auto* synth = app.add_subcommand("synth", "Write a synthetic PPM/PGM dataset");
  synth->add_option("--out", o.out, "Output directory")->required();
  synth->add_option("--count", o.count, "Number of samples")->capture_default_str();
  synth->add_option("--size", o.size, "H,W")->capture_default_str();
  synth->add_option("--seed", o.seed, "Seed")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  o.seed_given = train_seed->count() > 0;
  o.threshold_given = train_threshold->count() > 0;

  try {
    if (*describe) return cmd_describe(o);
    if (*train_cmd) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*predict) return cmd_predict(o);
    if (*gc) return cmd_gradcheck(o);
    if (*synth) return cmd_synth(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
