#pragma once

// Reverse-mode differentiation over a recorded tape of primitive ops.
//
// Every differentiable op takes the tape explicitly and returns a Var. When the
// tape is recording and at least one input requires a gradient, the op appends
// a node holding a backward closure; GradTape::backward then replays nodes in
// exact reverse execution order, accumulating (+=) into input gradients. A
// non-recording tape keeps no history, so intermediates are released as soon
// as their Vars go out of scope.

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "plunet/ops.hpp"
#include "plunet/tensor.hpp"

namespace plunet {

template <class T>
struct TapeNode {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::string op;
  std::string name;  // parameter name for named leaves
  std::function<void(TapeNode&)> backward;

  void accumulate(const Tensor<T>& g) {
    if (!grad.defined()) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<TapeNode<T>> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  const std::shared_ptr<TapeNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TapeNode<T>> node_;
};

template <class T>
class GradTape {
 public:
  using Node = TapeNode<T>;
  using BackwardFn = std::function<void(Node&)>;

  explicit GradTape(bool recording = true) : recording_(recording) {}
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return order_.size(); }

  // Leaf that never receives a gradient.
  Var<T> constant(Tensor<T> value);
  // Leaf that receives a gradient when `requires_grad` (used for gradcheck).
  Var<T> input(Tensor<T> value, bool requires_grad = true);
  // Named learnable leaf. The same name always maps to the same leaf so that
  // gradients of a parameter used twice accumulate.
  Var<T> parameter(const std::string& name, const Tensor<T>& value);

  // Appends the result of an op. `fn` runs during backward with the node
  // whose `grad` holds the upstream gradient.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<const Var<T>*> inputs,
                BackwardFn fn);
  Var<T> record(const char* op, Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn);

  // Seeds `loss` with `loss_grad` and propagates to every recorded node.
  void backward(const Var<T>& loss, const Tensor<T>& loss_grad);
  // Scalar loss: seed 1.
  void backward(const Var<T>& loss);

  // Gradient of every named parameter touched in forward (zero if it did not
  // influence the loss).
  std::map<std::string, Tensor<T>> parameter_grads() const;

  // Ops of the nodes visited by the last backward, in visit order.
  const std::vector<std::string>& backward_trace() const { return trace_; }
  // Ops of recorded nodes in execution order.
  std::vector<std::string> recorded_ops() const;

 private:
  bool recording_;
  std::vector<std::shared_ptr<Node>> order_;
  std::map<std::string, std::shared_ptr<Node>> params_;
  std::vector<std::string> trace_;
};

// Differentiable ops. Gradients flow only into inputs that require them.
namespace ad {

template <class T>
Var<T> conv2d(GradTape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>* b, const ConvSpec& spec);

template <class T>
Var<T> conv2d_depthwise_separable(GradTape<T>& tape, const Var<T>& x, const Var<T>& w_depth,
                                  const Var<T>* b_depth, const Var<T>& w_point,
                                  const Var<T>* b_point, const ConvSpec& spec);

template <class T>
Var<T> conv_transpose2d(GradTape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>* b,
                        const ConvSpec& spec);

// Running statistics are updated in place in train mode.
template <class T>
Var<T> batchnorm2d(GradTape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                   Tensor<T>& running_mean, Tensor<T>& running_var, ops::BatchNormMode mode,
                   const ops::BatchNormOptions& opt);

template <class T>
Var<T> relu(GradTape<T>& tape, const Var<T>& x);

template <class T>
Var<T> sigmoid(GradTape<T>& tape, const Var<T>& x);

template <class T>
Var<T> maxpool2d(GradTape<T>& tape, const Var<T>& x);

template <class T>
Var<T> global_avg_pool(GradTape<T>& tape, const Var<T>& x);

template <class T>
Var<T> concat_channels(GradTape<T>& tape, std::span<const Var<T>> xs);

template <class T>
Var<T> linear(GradTape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>* b);

template <class T>
Var<T> scale_channels(GradTape<T>& tape, const Var<T>& x, const Var<T>& s);

template <class T>
Var<T> mul_scalar(GradTape<T>& tape, const Var<T>& x, T alpha);

// Sum of all elements, as a (1,1,1,1) tensor.
template <class T>
Var<T> sum(GradTape<T>& tape, const Var<T>& x);

// sum(x * weights) with constant weights of the same shape.
template <class T>
Var<T> weighted_sum(GradTape<T>& tape, const Var<T>& x, const Tensor<T>& weights);

}  // namespace ad
}  // namespace plunet
