#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "plunet/arch.hpp"
#include "plunet/data.hpp"
#include "plunet/metrics.hpp"

namespace plunet::train {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

template <class T>
struct AdamState {
  std::int64_t step = 0;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

// One element-wise Adam update at step t >= 1 (arithmetic in double).
template <class T>
void adam_update(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v, std::int64_t t,
                 const AdamConfig& cfg);

// Advances state.step and updates every parameter that has a gradient.
// Moment tensors are created on first use.
template <class T>
void adam_step(nn::ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads, AdamState<T>& state,
               const AdamConfig& cfg);

struct DataSource {
  std::string dir;  // empty: synthetic
  std::int64_t synth_count = 200;
  std::int64_t synth_height = 64;
  std::int64_t synth_width = 64;
  std::uint64_t synth_seed = 42;
};

struct TrainConfig {
  ArchConfig arch;
  std::int64_t epochs = 100;
  std::int64_t batch_size = 16;
  AdamConfig adam;
  std::uint64_t seed = 42;
  double threshold = metrics::kDefaultThreshold;
  DataSource data;
  data::SplitSpec split;
  std::string out_dir = "run";

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j);
};

// "PLUW", u32 version, u32 entry count, entries {u16 name length, name,
// PLUT tensor}, then u32 length + JSON metadata. Entries are the model
// parameters and buffers in declaration order followed by "adam.m.<name>"
// and "adam.v.<name>".
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ArchConfig arch;
  nlohmann::json train_config;  // snapshot, may be null
  nn::ParamStore<float> params;
  AdamState<float> adam;
  std::int64_t epoch = 0;       // completed epochs
  double best_val_f1 = -1.0;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

struct EpochLog {
  std::int64_t epoch = 0;
  std::int64_t step = 0;
  double train_loss = 0;
  std::optional<metrics::MetricsReport> val;

  nlohmann::json to_json() const;
};

struct TrainResult {
  Checkpoint last;
  std::vector<EpochLog> history;
};

struct TrainOptions {
  std::optional<std::filesystem::path> resume;
  // Stop after this many epochs in total (used to interrupt and resume).
  std::optional<std::int64_t> stop_after;
  std::function<void(const EpochLog&)> on_epoch;
};

// Writes <out_dir>/last.ckpt, best.ckpt and log.jsonl.
TrainResult run(const TrainConfig& cfg, const std::vector<data::Sample>& train_set,
                const std::vector<data::Sample>& val_set, const TrainOptions& opts = {});

// Loads or synthesizes the data named by cfg.data and splits it by cfg.split.
data::Split load_data(const TrainConfig& cfg);

struct Evaluation {
  metrics::EvalSummary summary;
  std::vector<metrics::ConfusionCounts> per_image;
};

Evaluation evaluate(const ModelGraph& model, nn::ParamStore<float>& params,
                    const std::vector<data::Sample>& samples, double threshold = metrics::kDefaultThreshold,
                    metrics::Aggregation mode = metrics::Aggregation::per_image);

}  // namespace plunet::train
