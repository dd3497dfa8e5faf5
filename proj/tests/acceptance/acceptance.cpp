// Acceptance report: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails.
//
// usage: acceptance [work_dir]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "plunet/analysis.hpp"
#include "plunet/arch.hpp"
#include "plunet/gradcheck.hpp"
#include "plunet/metrics.hpp"
#include "plunet/parallel.hpp"
#include "plunet/rng.hpp"
#include "plunet/train.hpp"

using namespace plunet;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, const char* title, bool ok, const std::string& detail) {
  std::printf("[%s] %d %s: %s\n", ok ? "PASS" : "FAIL", id, title, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_target, failed;
  for (const auto& t : gradcheck::all_targets()) {
    const auto r = gradcheck::run(t, 42);
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_target = t;
    }
    if (!r.passed) failed += " " + t;
  }
  const double secs = seconds_since(t0);
  const bool ok = failed.empty() && worst <= gradcheck::kTolerance && secs < 120.0;
  report(1, "gradient correctness", ok,
         fmt("%zu targets, max rel err %.2e (%s), %.1f s%s", gradcheck::all_targets().size(), worst,
             worst_target.c_str(), secs, failed.empty() ? "" : (" failed:" + failed).c_str()));
}

void metric_oracle() {
  Rng rng(2024);
  bool exact = true;
  double identity = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    metrics::Mask sr(Shape{1, 1, 16, 16}), gt(Shape{1, 1, 16, 16});
    const double p = rng.uniform(), q = rng.uniform();
    for (std::size_t i = 0; i < sr.data.size(); ++i) {
      sr.data[i] = rng.uniform() < p;
      gt.data[i] = rng.uniform() < q;
    }
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        const int s = sr.data[y * 16 + x], g = gt.data[y * 16 + x];
        if (s && g) ++tp;
        if (s && !g) ++fp;
        if (!s && g) ++fn;
      }
    const auto r = metrics::compute(metrics::confusion(sr, gt));
    const auto ratio = [](std::int64_t a, std::int64_t b) {
      return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
    };
    double pc = ratio(tp, tp + fp), se = ratio(tp, tp + fn);
    double f1 = ratio(2 * tp, 2 * tp + fp + fn), js = ratio(tp, tp + fp + fn);
    if (tp + fp + fn == 0) pc = se = f1 = js = 1.0;
    exact = exact && r.pc == pc && r.se == se && r.f1 == f1 && r.js == js;
    identity = std::max(identity, std::abs(r.f1 - 2.0 * r.js / (1.0 + r.js)));
  }
  const double ref_js = 0.8249, ref_f1 = 0.8920;
  const double implied = 2.0 * ref_js / (1.0 + ref_js);
  report(2, "metric oracle equivalence", exact && identity <= 1e-12,
         fmt("1000 pairs, oracle match %s, max |F1 - 2J/(1+J)| = %.1e; reference row DoubleUNet/CVC lists "
             "F1 %.4f with JS %.4f but the identity gives F1 %.4f (inconsistent source row, documented)",
             exact ? "exact" : "MISMATCH", identity, ref_f1, ref_js, implied));
}

void parameter_totals() {
  const auto unet = analysis::count_params(ModelGraph(ArchConfig::preset("unet")));
  const auto plunet = analysis::count_params(ModelGraph(ArchConfig::preset("plunet")));
  const bool within = std::abs(unet / 34.53e6 - 1.0) <= 0.2 && std::abs(plunet / 6.22e6 - 1.0) <= 0.2;
  const bool golden = unet == 31043521 && plunet == 6492829;
  report(3, "parameter totals", within && golden,
         fmt("unet %lld (%.2fM vs 34.53M, %+.1f%%), plunet %lld (%.2fM vs 6.22M, %+.1f%%), golden %s",
             static_cast<long long>(unet), unet / 1e6, 100.0 * (unet / 34.53e6 - 1.0), static_cast<long long>(plunet),
             plunet / 1e6, 100.0 * (plunet / 6.22e6 - 1.0), golden ? "match" : "MISMATCH"));
}

void flop_ratios() {
  bool ok = true;
  std::string detail;
  for (const char* name : {"unet", "lunet", "punet", "plunet"}) {
    const ModelGraph m(ArchConfig::preset(name));
    const double base = static_cast<double>(analysis::count_flops(m, Shape{1, 3, 96, 96}));
    const double r224 = analysis::count_flops(m, Shape{1, 3, 224, 224}) / base;
    const double r384 = analysis::count_flops(m, Shape{1, 3, 384, 288}) / base;
    ok = ok && std::abs(r224 / 5.444 - 1.0) <= 0.01 && std::abs(r384 / 12.0 - 1.0) <= 0.01;
    detail += fmt("%s%s %.4f/%.4f", detail.empty() ? "" : ", ", name, r224, r384);
  }
  report(4, "FLOP scaling ratios", ok, "224/96 and 384x288/96: " + detail);
}

void flop_absolutes() {
  const double plunet = static_cast<double>(analysis::count_flops(ModelGraph(ArchConfig::preset("plunet")), Shape{1, 3, 96, 96}));
  const double unet = static_cast<double>(analysis::count_flops(ModelGraph(ArchConfig::preset("unet")), Shape{1, 3, 96, 96}));
  const auto within = [](double v, double ref) { return v >= ref / 1.5 && v <= ref * 1.5; };
  report(5, "FLOP absolutes", within(plunet, 4.99e9) && within(unet, 9.21e9),
         fmt("2*MACs at 1x3x96x96: plunet %.3fG (ref 4.99G, x%.2f), unet %.3fG (ref 9.21G, x%.2f)", plunet / 1e9,
             plunet / 4.99e9, unet / 1e9, unet / 9.21e9));
}

void ps_reduction() {
  const auto c = analysis::compare_ps_vs_aspp(256, 512);
  report(6, "PS parameter reduction", c.ratio >= 3.0 && c.ratio <= 9.0,
         fmt("256->512: ASPP-style %lld vs PS %lld params, reduction factor %.3f (branch convs alone %.3f)",
             static_cast<long long>(c.aspp_params), static_cast<long long>(c.ps_params), c.ratio, c.branch_ratio));
}

train::TrainConfig desk_config(const fs::path& out) {
  train::TrainConfig cfg;
  cfg.arch = ArchConfig::preset("plunet");
  cfg.arch.widths = {16, 32, 64};
  cfg.arch.bottleneck_width = 128;
  cfg.epochs = 10;
  cfg.batch_size = 4;
  cfg.seed = 42;
  cfg.data.synth_count = 200;
  cfg.data.synth_height = 64;
  cfg.data.synth_width = 64;
  cfg.data.synth_seed = 42;
  cfg.split.seed = 42;
  cfg.out_dir = out.string();
  return cfg;
}

metrics::MetricsReport desk_run(const fs::path& out, double& secs) {
  const auto cfg = desk_config(out);
  fs::remove_all(out);
  const auto t0 = std::chrono::steady_clock::now();
  const auto split = train::load_data(cfg);
  auto result = train::run(cfg, split.train, split.val);
  const ModelGraph model(cfg.arch);
  const auto ev = train::evaluate(model, result.last.params, split.test, cfg.threshold);
  secs = seconds_since(t0);
  return ev.summary.metrics;
}

void desk_training(const fs::path& work) {
  double t1 = 0, t2 = 0;
  const auto m1 = desk_run(work / "run1", t1);
  const auto cfg = desk_config(work / "run1");
  report(7, "desk-scale training", m1.f1 >= 0.90 && m1.js >= 0.82 && cfg.epochs <= 30 && t1 <= 1800.0,
         fmt("reduced plunet [16,32,64]/128 (%lld params), %lld epochs, test F1 %.4f JS %.4f, %.0f s single-threaded",
             static_cast<long long>(analysis::count_params(ModelGraph(cfg.arch))), static_cast<long long>(cfg.epochs),
             m1.f1, m1.js, t1));

  const auto m2 = desk_run(work / "run2", t2);
  bool same = m1.f1 == m2.f1 && m1.js == m2.js;
  std::string detail;
  for (const char* f : {"log.jsonl", "last.ckpt", "best.ckpt"}) {
    const std::string a = slurp(work / "run1" / f), b = slurp(work / "run2" / f);
    const bool eq = !a.empty() && a == b;
    same = same && eq;
    detail += fmt("%s%s %s (%zu bytes)", detail.empty() ? "" : ", ", f, eq ? "identical" : "DIFFER", a.size());
  }
  report(8, "determinism", same, detail);
}

void shapes() {
  bool ok = true;
  std::string detail;
  Rng rng(9);
  for (const char* name : {"unet", "lunet", "punet", "plunet"}) {
    const ModelGraph m(ArchConfig::preset(name));
    auto params = m.init_params<float>(1);
    for (const Shape in : {Shape{1, 3, 96, 96}, Shape{1, 3, 224, 224}, Shape{1, 3, 384, 288}}) {
      Tensor<float> x(in);
      for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
      const auto y = m.predict(params, x);
      bool inside = true;
      for (float v : y.data()) inside = inside && v > 0.0f && v < 1.0f;
      const bool good = y.shape() == Shape{1, 1, in.h, in.w} && inside;
      if (!good) detail += fmt(" %s@%lldx%lld bad", name, static_cast<long long>(in.h), static_cast<long long>(in.w));
      ok = ok && good;
    }
  }
  const ModelGraph p(ArchConfig::preset("plunet"));
  const bool topo = p.count_nodes(NodeKind::pool) == 3 && p.count_nodes(NodeKind::up) == 3 &&
                    p.bottleneck_kind() == nn::BlockKind::ps;
  report(9, "shape and architecture invariants", ok && topo,
         fmt("4 presets x 3 input sizes give 1-channel masks of input size in (0,1); plunet has %lld pools, %lld ups, "
             "%s bottleneck%s",
             static_cast<long long>(p.count_nodes(NodeKind::pool)), static_cast<long long>(p.count_nodes(NodeKind::up)),
             nn::block_kind_name(p.bottleneck_kind()), detail.c_str()));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "plunet_acceptance";
  fs::create_directories(work);
  set_num_threads(0);
  const auto t0 = std::chrono::steady_clock::now();
  try {
    gradients();
    metric_oracle();
    parameter_totals();
    flop_ratios();
    flop_absolutes();
    ps_reduction();
    desk_training(work);
    shapes();
  } catch (const std::exception& e) {
    std::printf("[FAIL] aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%s: %d failing criteria, %.0f s total\n", failures == 0 ? "ALL PASS" : "FAILURES", failures,
              seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
