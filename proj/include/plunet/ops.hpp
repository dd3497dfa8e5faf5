#pragma once

// Value-level forward and backward kernels. These are pure functions of their
// arguments (batch norm additionally updates the running statistics passed to
// it in train mode). The differentiable wrappers live in autograd.hpp.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "plunet/tensor.hpp"

namespace plunet {

struct ConvSpec {
  std::int64_t in_channels = 1;
  std::int64_t out_channels = 1;
  std::array<std::int64_t, 2> kernel{3, 3};
  std::array<std::int64_t, 2> stride{1, 1};
  std::array<std::int64_t, 2> padding{0, 0};
  std::array<std::int64_t, 2> dilation{1, 1};
  std::int64_t groups = 1;
  bool bias = true;

  // k x k, stride 1, padding = dilation * (k - 1) / 2: spatial size preserved.
  static ConvSpec same(std::int64_t in, std::int64_t out, std::int64_t k = 3,
                       std::int64_t dilation = 1, bool bias = true);
  static ConvSpec pointwise(std::int64_t in, std::int64_t out, bool bias = true);
  // 2x2 stride-2 up-sampling used by conv_transpose2d.
  static ConvSpec up2x2(std::int64_t in, std::int64_t out, bool bias = true);

  void validate() const;
  std::int64_t effective_extent(int axis) const { return dilation[axis] * (kernel[axis] - 1) + 1; }
  // Weight layout (out, in / groups, kh, kw).
  Shape weight_shape() const;
  Shape bias_shape() const { return Shape{1, out_channels, 1, 1}; }
  std::int64_t weight_count() const { return weight_shape().numel(); }
  // Output extents for input `in`; throws when the output would be empty.
  Shape output_shape(const Shape& in) const;

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

namespace ops {

template <class T>
struct ConvGrads {
  Tensor<T> dx;
  Tensor<T> dw;
  Tensor<T> db;
};

// out[n,o,i,j] = sum_{c,u,v} x[n,c,i*sh-ph+u*dh, j*sw-pw+v*dw] * w[o,c,u,v] (+ b[o]).
// Taps outside the input read zero. Each output sums over c, then u, then v,
// and the bias is added last.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b, const ConvSpec& spec);

template <class T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec,
                             const Tensor<T>& dy, bool need_dx, bool need_dw, bool need_db);

// Stage specs of a depthwise separable convolution described by `spec`
// (in -> out, spatial kernel/dilation/padding taken from `spec`).
ConvSpec depthwise_stage(const ConvSpec& spec);
ConvSpec pointwise_stage(const ConvSpec& spec);

// conv2d(conv2d(x, w_depth, groups = in), w_point, 1x1).
template <class T>
Tensor<T> conv2d_depthwise_separable(const Tensor<T>& x, const Tensor<T>& w_depth,
                                     const Tensor<T>* b_depth, const Tensor<T>& w_point,
                                     const Tensor<T>* b_point, const ConvSpec& spec);

// Only kernel 2x2, stride 2, no padding. Weight layout (in, out, 2, 2).
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b,
                           const ConvSpec& spec);

template <class T>
ConvGrads<T> conv_transpose2d_backward(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec,
                                       const Tensor<T>& dy, bool need_dx, bool need_dw,
                                       bool need_db);

enum class BatchNormMode { train, eval };

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
};

// Per-channel statistics used by the forward pass; needed for backward.
template <class T>
struct BatchNormSaved {
  std::vector<double> mean;
  std::vector<double> invstd;
};

// Parameter and statistic tensors have shape (1, C, 1, 1). In train mode the
// running statistics are updated in place as
// running <- (1 - momentum) * running + momentum * batch.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, BatchNormMode mode,
                      const BatchNormOptions& opt, BatchNormSaved<T>* saved = nullptr);

template <class T>
struct BatchNormGrads {
  Tensor<T> dx;
  Tensor<T> dgamma;
  Tensor<T> dbeta;
};

template <class T>
BatchNormGrads<T> batchnorm2d_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                       const BatchNormSaved<T>& saved, BatchNormMode mode,
                                       const Tensor<T>& dy);

template <class T>
Tensor<T> relu(const Tensor<T>& x);
// Subgradient 0 at x == 0.
template <class T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy);

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <class T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& dy);

// 2x2 window, stride 2. `argmax` receives the flat input index of each
// window maximum (first in row-major order on ties).
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::vector<std::int64_t>* argmax = nullptr);
template <class T>
Tensor<T> maxpool2d_backward(const Shape& input_shape, const std::vector<std::int64_t>& argmax,
                             const Tensor<T>& dy);

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x);
template <class T>
Tensor<T> global_avg_pool_backward(const Shape& input_shape, const Tensor<T>& dy);

template <class T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> xs);
// Splits a gradient along channels into pieces of the given extents.
template <class T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& dy, std::span<const std::int64_t> extents);

// x: (N, in, 1, 1); w: (out, in, 1, 1); b: (1, out, 1, 1). y = w x + b.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b);

template <class T>
struct LinearGrads {
  Tensor<T> dx;
  Tensor<T> dw;
  Tensor<T> db;
};

template <class T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                               bool need_dx);

// y[n,c,:,:] = x[n,c,:,:] * s[n,c]; s has shape (N, C, 1, 1).
template <class T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s);

}  // namespace ops
}  // namespace plunet
