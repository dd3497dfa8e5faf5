#include "plunet/train.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "plunet/binary_io.hpp"
#include "plunet/rng.hpp"

namespace plunet::train {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& keys, const std::string& where) {
  if (!j.is_object()) fail(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!keys.count(k)) fail("unknown key '" + k + "' in " + where);
  }
}

template <class V>
void read_opt(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kShuffleStream = 1000;
constexpr std::size_t kEvalBatch = 8;

}  // namespace

// ---- Adam -------------------------------------------------------------------

void AdamConfig::validate() const {
  if (!(lr > 0)) fail("learning rate must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("Adam betas must lie in [0, 1)");
  if (!(eps > 0)) fail("Adam eps must be positive");
}

template <class T>
void adam_update(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v, std::int64_t t,
                 const AdamConfig& cfg) {
  if (t < 1) fail("Adam step must be >= 1");
  if (!(param.shape() == grad.shape()) || !(param.shape() == m.shape()) || !(param.shape() == v.shape())) {
    fail("Adam shape mismatch: param " + param.shape().str() + ", grad " + grad.shape().str());
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  auto p = param.data();
  const auto g = grad.data();
  auto md = m.data();
  auto vd = v.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = static_cast<double>(g[i]);
    const double mi = cfg.beta1 * static_cast<double>(md[i]) + (1.0 - cfg.beta1) * gi;
    const double vi = cfg.beta2 * static_cast<double>(vd[i]) + (1.0 - cfg.beta2) * gi * gi;
    md[i] = static_cast<T>(mi);
    vd[i] = static_cast<T>(vi);
    const double mhat = mi / c1;
    const double vhat = vi / c2;
    p[i] = static_cast<T>(static_cast<double>(p[i]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
  }
}

template <class T>
void adam_step(nn::ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads, AdamState<T>& state,
               const AdamConfig& cfg) {
  ++state.step;
  for (const auto& name : params.param_names()) {
    auto g = grads.find(name);
    if (g == grads.end()) continue;
    Tensor<T>& p = params.param(name);
    auto [mi, m_new] = state.m.try_emplace(name, p.shape());
    auto [vi, v_new] = state.v.try_emplace(name, p.shape());
    adam_update(p, g->second, mi->second, vi->second, state.step, cfg);
  }
}

template void adam_update(Tensor<float>&, const Tensor<float>&, Tensor<float>&, Tensor<float>&, std::int64_t,
                          const AdamConfig&);
template void adam_update(Tensor<double>&, const Tensor<double>&, Tensor<double>&, Tensor<double>&, std::int64_t,
                          const AdamConfig&);
template void adam_step(nn::ParamStore<float>&, const std::map<std::string, Tensor<float>>&, AdamState<float>&,
                        const AdamConfig&);
template void adam_step(nn::ParamStore<double>&, const std::map<std::string, Tensor<double>>&, AdamState<double>&,
                        const AdamConfig&);

// ---- config -------------------------------------------------------------------

void TrainConfig::validate() const {
  arch.validate();
  adam.validate();
  if (epochs < 1) fail("epochs must be at least 1");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (!(threshold > 0 && threshold < 1)) fail("threshold must lie in (0, 1)");
  if (data.dir.empty() && (data.synth_count < 5 || data.synth_height < 32 || data.synth_width < 32)) {
    fail("synthetic data needs at least 5 samples of at least 32x32");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {
      {"arch", arch.to_json()},
      {"epochs", epochs},
      {"batch_size", batch_size},
      {"adam", {{"lr", adam.lr}, {"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}},
      {"seed", seed},
      {"threshold", threshold},
      {"data",
       {{"dir", data.dir},
        {"synth_count", data.synth_count},
        {"synth_height", data.synth_height},
        {"synth_width", data.synth_width},
        {"synth_seed", data.synth_seed}}},
      {"split", {{"train", split.train}, {"val", split.val}, {"test", split.test}, {"seed", split.seed}}},
      {"out_dir", out_dir},
  };
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j, {"arch", "epochs", "batch_size", "adam", "seed", "threshold", "data", "split", "out_dir"},
                 "train config");
  TrainConfig c;
  try {
    if (j.contains("arch")) {
      const auto& a = j.at("arch");
      c.arch = a.is_string() ? ArchConfig::preset(a.get<std::string>()) : ArchConfig::from_json(a);
    }
    read_opt(j, "epochs", c.epochs);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "seed", c.seed);
    read_opt(j, "threshold", c.threshold);
    read_opt(j, "out_dir", c.out_dir);
    if (j.contains("adam")) {
      const auto& a = j.at("adam");
      reject_unknown(a, {"lr", "beta1", "beta2", "eps"}, "adam");
      read_opt(a, "lr", c.adam.lr);
      read_opt(a, "beta1", c.adam.beta1);
      read_opt(a, "beta2", c.adam.beta2);
      read_opt(a, "eps", c.adam.eps);
    }
    if (j.contains("data")) {
      const auto& d = j.at("data");
      reject_unknown(d, {"dir", "synth_count", "synth_height", "synth_width", "synth_seed"}, "data");
      read_opt(d, "dir", c.data.dir);
      read_opt(d, "synth_count", c.data.synth_count);
      read_opt(d, "synth_height", c.data.synth_height);
      read_opt(d, "synth_width", c.data.synth_width);
      read_opt(d, "synth_seed", c.data.synth_seed);
    }
    if (j.contains("split")) {
      const auto& s = j.at("split");
      reject_unknown(s, {"train", "val", "test", "seed"}, "split");
      read_opt(s, "train", c.split.train);
      read_opt(s, "val", c.split.val);
      read_opt(s, "test", c.split.test);
      read_opt(s, "seed", c.split.seed);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed train config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- checkpoint -----------------------------------------------------------------

void Checkpoint::save(const fs::path& path) const {
  std::vector<std::pair<std::string, const Tensor<float>*>> entries;
  for (const auto& n : params.param_names()) entries.emplace_back(n, &params.param(n));
  for (const auto& n : params.buffer_names()) entries.emplace_back(n, &params.buffer(n));
  for (const auto& n : params.param_names()) {
    if (auto it = adam.m.find(n); it != adam.m.end()) entries.emplace_back("adam.m." + n, &it->second);
  }
  for (const auto& n : params.param_names()) {
    if (auto it = adam.v.find(n); it != adam.v.end()) entries.emplace_back("adam.v." + n, &it->second);
  }

  std::ostringstream os(std::ios::binary);
  os.write("PLUW", 4);
  io::write_le<std::uint32_t>(os, kCheckpointVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, *t);
  }
  const nlohmann::json meta{{"arch", arch.to_json()},     {"train", train_config}, {"epoch", epoch},
                            {"step", adam.step},          {"best_val_f1", best_val_f1}};
  const std::string text = meta.dump();
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    const std::string bytes = os.str();
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("failed writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint Checkpoint::load(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  io::expect_magic(is, "PLUW", "checkpoint");
  const auto version = io::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = io::read_le<std::uint32_t>(is);
  std::map<std::string, Tensor<float>> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = io::read_le<std::uint16_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw std::runtime_error("truncated checkpoint entry name");
    if (peek_tensor_dtype(is) != DType::f32) throw std::runtime_error("checkpoint tensor '" + name + "' is not f32");
    if (!entries.emplace(name, read_tensor<float>(is)).second) {
      throw std::runtime_error("duplicate checkpoint entry '" + name + "'");
    }
  }
  const auto meta_len = io::read_le<std::uint32_t>(is);
  std::string text(meta_len, '\0');
  is.read(text.data(), meta_len);
  if (!is) throw std::runtime_error("truncated checkpoint metadata");
  if (is.peek() != EOF) throw std::runtime_error("trailing bytes after checkpoint metadata");

  Checkpoint ck;
  try {
    const auto meta = nlohmann::json::parse(text);
    ck.arch = ArchConfig::from_json(meta.at("arch"));
    ck.train_config = meta.at("train");
    ck.epoch = meta.at("epoch").get<std::int64_t>();
    ck.adam.step = meta.at("step").get<std::int64_t>();
    ck.best_val_f1 = meta.at("best_val_f1").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("malformed checkpoint metadata: ") + e.what());
  }

  std::size_t used = 0;
  auto take = [&](const std::string& name, const Shape& shape) {
    auto it = entries.find(name);
    if (it == entries.end()) throw std::runtime_error("checkpoint is missing '" + name + "'");
    if (!(it->second.shape() == shape)) {
      throw std::runtime_error("checkpoint tensor '" + name + "' has dims " + it->second.shape().str() +
                               ", expected " + shape.str());
    }
    ++used;
    return it->second;
  };
  const ModelGraph model(ck.arch);
  for (const auto& d : model.declarations()) {
    if (d.buffer) {
      ck.params.add_buffer(d.name, take(d.name, d.shape));
    } else {
      ck.params.add_param(d.name, take(d.name, d.shape));
    }
  }
  for (const auto& d : model.declarations()) {
    if (d.buffer) continue;
    if (entries.count("adam.m." + d.name)) ck.adam.m.emplace(d.name, take("adam.m." + d.name, d.shape));
    if (entries.count("adam.v." + d.name)) ck.adam.v.emplace(d.name, take("adam.v." + d.name, d.shape));
  }
  if (used != entries.size()) throw std::runtime_error("checkpoint holds entries not belonging to its model");
  return ck;
}

// ---- loop -----------------------------------------------------------------------

nlohmann::json EpochLog::to_json() const {
  nlohmann::json j{{"epoch", epoch}, {"step", step}, {"train_loss", train_loss}};
  if (val) {
    j["val"] = {{"pc", val->pc}, {"se", val->se}, {"f1", val->f1}, {"js", val->js}};
  } else {
    j["val"] = nullptr;
  }
  return j;
}

data::Split load_data(const TrainConfig& cfg) {
  std::vector<data::Sample> samples =
      cfg.data.dir.empty()
          ? data::synth_generate(cfg.data.synth_count, cfg.data.synth_height, cfg.data.synth_width, cfg.data.synth_seed)
          : data::load_dir(cfg.data.dir);
  if (samples.empty()) throw std::runtime_error("no samples found");
  return data::split(samples, cfg.split);
}

namespace {

void check_channels(const ModelGraph& model, const std::vector<data::Sample>& samples) {
  for (const auto& s : samples) {
    if (s.image.shape().c != model.config().in_channels) {
      throw std::invalid_argument("model expects " + std::to_string(model.config().in_channels) +
                                  " input channels but sample '" + s.id + "' has " +
                                  std::to_string(s.image.shape().c));
    }
  }
}

// Keeps the first `lines` lines of an existing log.
void truncate_log(const fs::path& path, std::int64_t lines) {
  std::string kept;
  if (std::ifstream in(path); in) {
    std::string line;
    for (std::int64_t i = 0; i < lines && std::getline(in, line); ++i) kept += line + '\n';
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << kept;
}

}  // namespace

TrainResult run(const TrainConfig& cfg, const std::vector<data::Sample>& train_set,
                const std::vector<data::Sample>& val_set, const TrainOptions& opts) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("training set is empty");
  const ModelGraph model(cfg.arch);
  check_channels(model, train_set);
  check_channels(model, val_set);

  const fs::path out_dir = cfg.out_dir;
  fs::create_directories(out_dir);
  const fs::path log_path = out_dir / "log.jsonl";

  TrainResult result;
  Checkpoint& ck = result.last;
  if (opts.resume) {
    ck = Checkpoint::load(*opts.resume);
    if (!(ck.arch == cfg.arch)) throw std::invalid_argument("checkpoint architecture differs from the config");
    truncate_log(log_path, ck.epoch);
  } else {
    ck.arch = cfg.arch;
    ck.params = model.init_params<float>(derive_seed(cfg.seed, kInitStream));
    truncate_log(log_path, 0);
  }
  // The output location is left out so runs differing only in it produce
  // identical files.
  ck.train_config = cfg.to_json();
  ck.train_config.erase("out_dir");

  std::ofstream log(log_path, std::ios::binary | std::ios::app);
  if (!log) throw std::runtime_error("cannot write " + log_path.string());

  const std::int64_t end = std::min(cfg.epochs, opts.stop_after.value_or(cfg.epochs));
  const std::size_t n = train_set.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (std::int64_t e = ck.epoch; e < end; ++e) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, kShuffleStream + static_cast<std::uint64_t>(e)));
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + bs)));
      GradTape<float> tape(true);
      nn::Context<float> ctx{tape, ck.params, nn::Mode::train};
      const Var<float> x = tape.constant(data::batch_images(train_set, idx));
      const Var<float> logits = model.forward_logits(ctx, x);
      const Var<float> loss = metrics::ad::bce_with_logits(tape, logits, data::batch_masks(train_set, idx));
      const double lv = loss.value().data()[0];
      if (!std::isfinite(lv)) {
        throw std::runtime_error("training diverged: loss is " + std::to_string(lv) + " at epoch " +
                                 std::to_string(e + 1) + ", step " + std::to_string(ck.adam.step + 1));
      }
      tape.backward(loss);
      adam_step(ck.params, tape.parameter_grads(), ck.adam, cfg.adam);
      loss_sum += lv * static_cast<double>(idx.size());
    }

    EpochLog entry;
    entry.epoch = e + 1;
    entry.step = ck.adam.step;
    entry.train_loss = loss_sum / static_cast<double>(n);
    if (!val_set.empty()) entry.val = evaluate(model, ck.params, val_set, cfg.threshold).summary.metrics;
    ck.epoch = e + 1;
    if (entry.val && entry.val->f1 > ck.best_val_f1) {
      ck.best_val_f1 = entry.val->f1;
      ck.save(out_dir / "best.ckpt");
    }
    ck.save(out_dir / "last.ckpt");
    log << entry.to_json().dump() << '\n';
    log.flush();
    result.history.push_back(entry);
    if (opts.on_epoch) opts.on_epoch(entry);
  }
  return result;
}

Evaluation evaluate(const ModelGraph& model, nn::ParamStore<float>& params, const std::vector<data::Sample>& samples,
                    double threshold, metrics::Aggregation mode) {
  if (samples.empty()) throw std::invalid_argument("cannot evaluate on an empty sample list");
  check_channels(model, samples);
  Evaluation ev;
  ev.per_image.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += kEvalBatch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(samples.size(), start + kEvalBatch); ++i) idx.push_back(i);
    const Tensor<float> probs = model.predict(params, data::batch_images(samples, idx));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto sr = metrics::binarize(probs.slice_batch(static_cast<std::int64_t>(k), 1), threshold);
      const auto gt = metrics::mask_from_tensor(samples[idx[k]].mask);
      ev.per_image.push_back(metrics::confusion(sr, gt));
    }
  }
  ev.summary = metrics::aggregate(ev.per_image, mode);
  return ev;
}

}  // namespace plunet::train
