#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "plunet/autograd.hpp"
#include "plunet/tensor.hpp"

namespace plunet::metrics {

inline constexpr double kDefaultThreshold = 0.5;

// Binary mask with values in {0, 1}, stored as bytes.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> data;

  Mask() = default;
  explicit Mask(Shape s, std::uint8_t fill = 0) : shape(s), data(static_cast<std::size_t>(s.numel()), fill) {}
  std::int64_t positives() const;
  friend bool operator==(const Mask&, const Mask&) = default;
};

// pred >= threshold -> 1. Threshold must lie in (0, 1).
template <class T>
Mask binarize(const Tensor<T>& pred, double threshold = kDefaultThreshold);

// Throws if any value is not exactly 0 or 1.
template <class T>
Mask mask_from_tensor(const Tensor<T>& t);

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::int64_t total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o);
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

ConfusionCounts confusion(const Mask& sr, const Mask& gt);

struct MetricsReport {
  double pc = 0, se = 0, f1 = 0, js = 0;
};

// Both masks empty: everything is 1. Otherwise a zero denominator gives 0.
MetricsReport compute(const ConfusionCounts& c);

enum class Aggregation { per_image, global };

const char* aggregation_name(Aggregation a);

struct EvalSummary {
  std::int64_t n_images = 0;
  Aggregation mode = Aggregation::per_image;
  MetricsReport metrics;

  nlohmann::json to_json() const;
};

// Per-image mode averages image metrics left to right; global mode pools the
// counts first.
EvalSummary aggregate(std::span<const ConfusionCounts> per_image, Aggregation mode = Aggregation::per_image);

// Mean binary cross entropy from logits; targets must be 0 or 1.
template <class T>
T bce_with_logits(const Tensor<T>& logits, const Tensor<T>& target, Tensor<T>* grad = nullptr);

namespace ad {
template <class T>
Var<T> bce_with_logits(GradTape<T>& tape, const Var<T>& logits, const Tensor<T>& target);
}  // namespace ad

}  // namespace plunet::metrics
