#include "plunet/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace plunet::metrics {

namespace {

void check_target(double y) {
  if (y != 0.0 && y != 1.0) throw std::invalid_argument("BCE targets must be 0 or 1");
}

double ratio(std::int64_t num, std::int64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

std::int64_t Mask::positives() const {
  std::int64_t n = 0;
  for (auto v : data) n += v;
  return n;
}

template <class T>
Mask binarize(const Tensor<T>& pred, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("threshold must lie in (0, 1), got " + std::to_string(threshold));
  }
  Mask m(pred.shape());
  const auto p = pred.data();
  for (std::size_t i = 0; i < p.size(); ++i) m.data[i] = static_cast<double>(p[i]) >= threshold ? 1 : 0;
  return m;
}

template <class T>
Mask mask_from_tensor(const Tensor<T>& t) {
  Mask m(t.shape());
  const auto p = t.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == T(1)) {
      m.data[i] = 1;
    } else if (p[i] != T(0)) {
      throw std::invalid_argument("mask value at index " + std::to_string(i) + " is not 0 or 1");
    }
  }
  return m;
}

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  fp += o.fp;
  tn += o.tn;
  fn += o.fn;
  return *this;
}

ConfusionCounts confusion(const Mask& sr, const Mask& gt) {
  if (!(sr.shape == gt.shape)) {
    throw std::invalid_argument("mask dims differ: " + sr.shape.str() + " vs " + gt.shape.str());
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < sr.data.size(); ++i) {
    const auto s = sr.data[i];
    const auto g = gt.data[i];
    if (s > 1 || g > 1) throw std::invalid_argument("masks must be binary");
    if (s && g) {
      ++c.tp;
    } else if (s) {
      ++c.fp;
    } else if (g) {
      ++c.fn;
    } else {
      ++c.tn;
    }
  }
  return c;
}

MetricsReport compute(const ConfusionCounts& c) {
  if (c.tp + c.fp + c.fn == 0) return {1.0, 1.0, 1.0, 1.0};
  MetricsReport r;
  r.pc = ratio(c.tp, c.tp + c.fp);
  r.se = ratio(c.tp, c.tp + c.fn);
  r.f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
  r.js = ratio(c.tp, c.tp + c.fp + c.fn);
  return r;
}

const char* aggregation_name(Aggregation a) { return a == Aggregation::global ? "global" : "per_image"; }

nlohmann::json EvalSummary::to_json() const {
  return {{"n_images", n_images}, {"mode", aggregation_name(mode)}, {"pc", metrics.pc},
          {"se", metrics.se},     {"f1", metrics.f1},                {"js", metrics.js}};
}

EvalSummary aggregate(std::span<const ConfusionCounts> per_image, Aggregation mode) {
  if (per_image.empty()) throw std::invalid_argument("cannot aggregate metrics over zero images");
  EvalSummary s;
  s.n_images = static_cast<std::int64_t>(per_image.size());
  s.mode = mode;
  if (mode == Aggregation::global) {
    ConfusionCounts pooled;
    for (const auto& c : per_image) pooled += c;
    s.metrics = compute(pooled);
    return s;
  }
  MetricsReport sum;
  for (const auto& c : per_image) {
    const auto r = compute(c);
    sum.pc += r.pc;
    sum.se += r.se;
    sum.f1 += r.f1;
    sum.js += r.js;
  }
  const double n = static_cast<double>(per_image.size());
  s.metrics = {sum.pc / n, sum.se / n, sum.f1 / n, sum.js / n};
  return s;
}

template <class T>
T bce_with_logits(const Tensor<T>& logits, const Tensor<T>& target, Tensor<T>* grad) {
  if (!(logits.shape() == target.shape())) {
    throw std::invalid_argument("BCE shapes differ: " + logits.shape().str() + " vs " + target.shape().str());
  }
  const auto z = logits.data();
  const auto y = target.data();
  const double count = static_cast<double>(z.size());
  if (grad) *grad = Tensor<T>(logits.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double zi = static_cast<double>(z[i]);
    const double yi = static_cast<double>(y[i]);
    check_target(yi);
    // max(z,0) - z*y + log(1 + exp(-|z|))
    total += std::max(zi, 0.0) - zi * yi + std::log1p(std::exp(-std::abs(zi)));
    if (grad) {
      const double p = zi >= 0 ? 1.0 / (1.0 + std::exp(-zi)) : std::exp(zi) / (1.0 + std::exp(zi));
      grad->data()[i] = static_cast<T>((p - yi) / count);
    }
  }
  return static_cast<T>(total / count);
}

namespace ad {

template <class T>
Var<T> bce_with_logits(GradTape<T>& tape, const Var<T>& logits, const Tensor<T>& target) {
  Tensor<T> g;
  const T loss = metrics::bce_with_logits(logits.value(), target, &g);
  const Var<T>& z = logits;
  return tape.record("bce_with_logits", Tensor<T>::scalar(loss), {&z},
                     [z, g = std::move(g)](TapeNode<T>& node) {
                       if (!z.requires_grad()) return;
                       Tensor<T> dz = g;
                       const T up = node.grad.data()[0];
                       for (auto& v : dz.data()) v *= up;
                       z.node()->accumulate(dz);
                     });
}

}  // namespace ad

#define PLUNET_INSTANTIATE_METRICS(T)                                                 \
  template Mask binarize(const Tensor<T>&, double);                                   \
  template Mask mask_from_tensor(const Tensor<T>&);                                   \
  template T bce_with_logits(const Tensor<T>&, const Tensor<T>&, Tensor<T>*);         \
  template Var<T> ad::bce_with_logits(GradTape<T>&, const Var<T>&, const Tensor<T>&);

PLUNET_INSTANTIATE_METRICS(float)
PLUNET_INSTANTIATE_METRICS(double)

#undef PLUNET_INSTANTIATE_METRICS

}  // namespace plunet::metrics
