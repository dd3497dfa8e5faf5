#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "plunet/tensor.hpp"

namespace plunet::data {

// image: (1, C, H, W) in [0, 1]; mask: (1, 1, H, W) with values 0 or 1.
struct Sample {
  std::string id;
  Tensor<float> image;
  Tensor<float> mask;

  void validate() const;
  friend bool operator==(const Sample&, const Sample&) = default;
};

struct SynthOptions {
  std::int64_t channels = 3;
  double noise_sigma = 0.08;
  double min_foreground = 0.02;
  double max_foreground = 0.60;
};

// 1-3 rotated filled ellipses with axes in [min(H,W)/8, min(H,W)/3] over a
// flat background; shapes are redrawn until the foreground fraction lands in
// [min_foreground, max_foreground]. Sample i depends only on (seed, i).
std::vector<Sample> synth_generate(std::int64_t count, std::int64_t height, std::int64_t width,
                                   std::uint64_t seed, const SynthOptions& opt = {});

// PPM P6 / PGM P5, maxval 255, header "P6\n<W> <H>\n255\n".
void write_ppm(const std::filesystem::path& path, const Tensor<float>& image);
Tensor<float> read_ppm(const std::filesystem::path& path);
// Mask pixels are written as 0 / 255.
void write_pgm_mask(const std::filesystem::path& path, const Tensor<float>& mask);
// Accepts only 0 and 255 (mapped to 0 and 1).
Tensor<float> read_pgm_mask(const std::filesystem::path& path);

// Writes <dir>/<id>.ppm and <dir>/<id>_mask.pgm.
void save_sample(const Sample& sample, const std::filesystem::path& dir);
// Loads every <id>.ppm with its <id>_mask.pgm, sorted by id.
std::vector<Sample> load_dir(const std::filesystem::path& dir);

struct SplitSpec {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
  std::uint64_t seed = 42;
};

struct Split {
  std::vector<Sample> train, val, test;
};

// Seeded Fisher-Yates shuffle, then cuts at floor(train*n) and
// floor((train+val)*n); the remainder goes to test.
Split split(const std::vector<Sample>& samples, const SplitSpec& spec);

// Stacks images and masks of samples[indices] into batches.
Tensor<float> batch_images(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices);
Tensor<float> batch_masks(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices);

}  // namespace plunet::data
