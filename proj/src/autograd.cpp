#include "plunet/autograd.hpp"

#include <stdexcept>

namespace plunet {

template <class T>
Var<T> GradTape<T>::constant(Tensor<T> value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = "constant";
  return Var<T>(std::move(node));
}

template <class T>
Var<T> GradTape<T>::input(Tensor<T> value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = "input";
  node->requires_grad = requires_grad && recording_;
  if (node->requires_grad) order_.push_back(node);
  return Var<T>(std::move(node));
}

template <class T>
Var<T> GradTape<T>::parameter(const std::string& name, const Tensor<T>& value) {
  if (auto it = params_.find(name); it != params_.end()) return Var<T>(it->second);
  auto node = std::make_shared<Node>();
  node->value = value;
  node->op = "parameter";
  node->name = name;
  node->requires_grad = recording_;
  if (recording_) {
    order_.push_back(node);
    params_.emplace(name, node);
  }
  return Var<T>(std::move(node));
}

template <class T>
Var<T> GradTape<T>::record(const char* op, Tensor<T> value,
                           std::initializer_list<const Var<T>*> inputs, BackwardFn fn) {
  bool needs = false;
  for (const Var<T>* in : inputs) {
    if (in != nullptr && in->defined() && in->requires_grad()) needs = true;
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  if (recording_ && needs) {
    node->requires_grad = true;
    node->backward = std::move(fn);
    order_.push_back(node);
  }
  return Var<T>(std::move(node));
}

template <class T>
Var<T> GradTape<T>::record(const char* op, Tensor<T> value, std::span<const Var<T>> inputs,
                           BackwardFn fn) {
  bool needs = false;
  for (const Var<T>& in : inputs) {
    if (in.defined() && in.requires_grad()) needs = true;
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  if (recording_ && needs) {
    node->requires_grad = true;
    node->backward = std::move(fn);
    order_.push_back(node);
  }
  return Var<T>(std::move(node));
}

template <class T>
void GradTape<T>::backward(const Var<T>& loss, const Tensor<T>& loss_grad) {
  if (order_.empty()) throw std::logic_error("backward on an empty tape");
  if (!loss.defined() || !loss.requires_grad()) {
    throw std::logic_error("loss does not depend on any tensor that requires a gradient");
  }
  if (loss_grad.shape() != loss.shape()) {
    throw std::invalid_argument("loss gradient shape " + loss_grad.shape().str() + " != loss shape " +
                                loss.shape().str());
  }
  loss.node()->accumulate(loss_grad);
  trace_.clear();
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node& node = **it;
    if (!node.backward || !node.grad.defined()) continue;
    trace_.push_back(node.op);
    node.backward(node);
  }
}

template <class T>
void GradTape<T>::backward(const Var<T>& loss) {
  if (loss.defined() && loss.shape().numel() != 1) {
    throw std::invalid_argument("backward without a seed gradient needs a scalar loss, got " +
                                loss.shape().str());
  }
  backward(loss, Tensor<T>::scalar(T(1)));
}

template <class T>
std::map<std::string, Tensor<T>> GradTape<T>::parameter_grads() const {
  std::map<std::string, Tensor<T>> out;
  for (const auto& [name, node] : params_) {
    out.emplace(name, node->grad.defined() ? node->grad : Tensor<T>(node->value.shape()));
  }
  return out;
}

template <class T>
std::vector<std::string> GradTape<T>::recorded_ops() const {
  std::vector<std::string> ops;
  for (const auto& n : order_) ops.push_back(n->op);
  return ops;
}

template class GradTape<float>;
template class GradTape<double>;

namespace ad {

namespace {

template <class T>
bool wants(const Var<T>* v) {
  return v != nullptr && v->defined() && v->requires_grad();
}

template <class T>
void push(const std::shared_ptr<TapeNode<T>>& node, const Tensor<T>& g) {
  if (node->requires_grad) node->accumulate(g);
}

}  // namespace

template <class T>
Var<T> conv2d(GradTape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>* b, const ConvSpec& spec) {
  Tensor<T> y = ops::conv2d(x.value(), w.value(), b ? &b->value() : nullptr, spec);
  auto xn = x.node(), wn = w.node();
  auto bn = b ? b->node() : nullptr;
  return tape.record("conv2d", std::move(y), {&x, &w, b}, [xn, wn, bn, spec](TapeNode<T>& self) {
    auto g = ops::conv2d_backward(xn->value, wn->value, spec, self.grad, xn->requires_grad,
                                  wn->requires_grad, bn && bn->requires_grad);
    push(xn, g.dx);
    push(wn, g.dw);
    if (bn) push(bn, g.db);
  });
}

template <class T>
Var<T> conv2d_depthwise_separable(GradTape<T>& tape, const Var<T>& x, const Var<T>& w_depth,
                                  const Var<T>* b_depth, const Var<T>& w_point,
                                  const Var<T>* b_point, const ConvSpec& spec) {
  if (spec.groups != 1) throw std::invalid_argument("depthwise separable spec must have groups == 1");
  const Var<T> mid = conv2d(tape, x, w_depth, b_depth, ops::depthwise_stage(spec));
  return conv2d(tape, mid, w_point, b_point, ops::pointwise_stage(spec));
}

template <class T>
Var<T> conv_transpose2d(GradTape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>* b,
                        const ConvSpec& spec) {
  Tensor<T> y = ops::conv_transpose2d(x.value(), w.value(), b ? &b->value() : nullptr, spec);
  auto xn = x.node(), wn = w.node();
  auto bn = b ? b->node() : nullptr;
  return tape.record("conv_transpose2d", std::move(y), {&x, &w, b}, [xn, wn, bn, spec](TapeNode<T>& self) {
    auto g = ops::conv_transpose2d_backward(xn->value, wn->value, spec, self.grad, xn->requires_grad,
                                            wn->requires_grad, bn && bn->requires_grad);
    push(xn, g.dx);
    push(wn, g.dw);
    if (bn) push(bn, g.db);
  });
}

template <class T>
Var<T> batchnorm2d(GradTape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                   Tensor<T>& running_mean, Tensor<T>& running_var, ops::BatchNormMode mode,
                   const ops::BatchNormOptions& opt) {
  auto saved = std::make_shared<ops::BatchNormSaved<T>>();
  Tensor<T> y = ops::batchnorm2d(x.value(), gamma.value(), beta.value(), running_mean, running_var,
                                 mode, opt, saved.get());
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return tape.record("batchnorm2d", std::move(y), {&x, &gamma, &beta},
                     [xn, gn, bn, saved, mode](TapeNode<T>& self) {
                       auto g = ops::batchnorm2d_backward(xn->value, gn->value, *saved, mode, self.grad);
                       push(xn, g.dx);
                       push(gn, g.dgamma);
                       push(bn, g.dbeta);
                     });
}

template <class T>
Var<T> relu(GradTape<T>& tape, const Var<T>& x) {
  auto xn = x.node();
  return tape.record("relu", ops::relu(x.value()), {&x}, [xn](TapeNode<T>& self) {
    push(xn, ops::relu_backward(xn->value, self.grad));
  });
}

template <class T>
Var<T> sigmoid(GradTape<T>& tape, const Var<T>& x) {
  auto xn = x.node();
  return tape.record("sigmoid", ops::sigmoid(x.value()), {&x}, [xn](TapeNode<T>& self) {
    push(xn, ops::sigmoid_backward(self.value, self.grad));
  });
}

template <class T>
Var<T> maxpool2d(GradTape<T>& tape, const Var<T>& x) {
  auto argmax = std::make_shared<std::vector<std::int64_t>>();
  Tensor<T> y = ops::maxpool2d(x.value(), argmax.get());
  auto xn = x.node();
  return tape.record("maxpool2d", std::move(y), {&x}, [xn, argmax](TapeNode<T>& self) {
    push(xn, ops::maxpool2d_backward(xn->value.shape(), *argmax, self.grad));
  });
}

template <class T>
Var<T> global_avg_pool(GradTape<T>& tape, const Var<T>& x) {
  auto xn = x.node();
  return tape.record("global_avg_pool", ops::global_avg_pool(x.value()), {&x}, [xn](TapeNode<T>& self) {
    push(xn, ops::global_avg_pool_backward(xn->value.shape(), self.grad));
  });
}

template <class T>
Var<T> concat_channels(GradTape<T>& tape, std::span<const Var<T>> xs) {
  std::vector<const Tensor<T>*> values;
  std::vector<std::shared_ptr<TapeNode<T>>> nodes;
  std::vector<std::int64_t> extents;
  for (const auto& v : xs) {
    values.push_back(&v.value());
    nodes.push_back(v.node());
    extents.push_back(v.shape().c);
  }
  Tensor<T> y = ops::concat_channels<T>(values);
  return tape.record("concat_channels", std::move(y), xs, [nodes, extents](TapeNode<T>& self) {
    auto parts = ops::split_channels<T>(self.grad, extents);
    for (std::size_t i = 0; i < nodes.size(); ++i) push(nodes[i], parts[i]);
  });
}

template <class T>
Var<T> linear(GradTape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>* b) {
  Tensor<T> y = ops::linear(x.value(), w.value(), b ? &b->value() : nullptr);
  auto xn = x.node(), wn = w.node();
  auto bn = b ? b->node() : nullptr;
  return tape.record("linear", std::move(y), {&x, &w, b}, [xn, wn, bn](TapeNode<T>& self) {
    auto g = ops::linear_backward(xn->value, wn->value, self.grad, xn->requires_grad);
    push(xn, g.dx);
    push(wn, g.dw);
    if (bn) push(bn, g.db);
  });
}

template <class T>
Var<T> scale_channels(GradTape<T>& tape, const Var<T>& x, const Var<T>& s) {
  auto xn = x.node(), sn = s.node();
  return tape.record("scale_channels", ops::scale_channels(x.value(), s.value()), {&x, &s},
                     [xn, sn](TapeNode<T>& self) {
                       const Shape xs = xn->value.shape();
                       if (xn->requires_grad) push(xn, ops::scale_channels(self.grad, sn->value));
                       if (sn->requires_grad) {
                         Tensor<T> ds(sn->value.shape());
                         for (std::int64_t nc = 0; nc < xs.n * xs.c; ++nc) {
                           const T* d = self.grad.ptr() + nc * xs.plane();
                           const T* p = xn->value.ptr() + nc * xs.plane();
                           T acc = T(0);
                           for (std::int64_t k = 0; k < xs.plane(); ++k) acc += d[k] * p[k];
                           ds[nc] = acc;
                         }
                         push(sn, ds);
                       }
                     });
}

template <class T>
Var<T> mul_scalar(GradTape<T>& tape, const Var<T>& x, T alpha) {
  Tensor<T> y = x.value();
  for (auto& v : y.data()) v *= alpha;
  auto xn = x.node();
  return tape.record("mul_scalar", std::move(y), {&x}, [xn, alpha](TapeNode<T>& self) {
    Tensor<T> g = self.grad;
    for (auto& v : g.data()) v *= alpha;
    push(xn, g);
  });
}

template <class T>
Var<T> sum(GradTape<T>& tape, const Var<T>& x) {
  T s = T(0);
  for (T v : x.value().data()) s += v;
  auto xn = x.node();
  return tape.record("sum", Tensor<T>::scalar(s), {&x}, [xn](TapeNode<T>& self) {
    push(xn, Tensor<T>::full(xn->value.shape(), self.grad[0]));
  });
}

template <class T>
Var<T> weighted_sum(GradTape<T>& tape, const Var<T>& x, const Tensor<T>& weights) {
  if (weights.shape() != x.shape()) throw std::invalid_argument("weighted_sum: weight shape mismatch");
  T s = T(0);
  for (std::int64_t i = 0; i < weights.numel(); ++i) s += x.value()[i] * weights[i];
  auto xn = x.node();
  return tape.record("weighted_sum", Tensor<T>::scalar(s), {&x}, [xn, weights](TapeNode<T>& self) {
    Tensor<T> g = weights;
    for (auto& v : g.data()) v *= self.grad[0];
    push(xn, g);
  });
}

#define PLUNET_INSTANTIATE_AD(T)                                                                     \
  template Var<T> conv2d(GradTape<T>&, const Var<T>&, const Var<T>&, const Var<T>*, const ConvSpec&); \
  template Var<T> conv2d_depthwise_separable(GradTape<T>&, const Var<T>&, const Var<T>&,             \
                                             const Var<T>*, const Var<T>&, const Var<T>*,            \
                                             const ConvSpec&);                                        \
  template Var<T> conv_transpose2d(GradTape<T>&, const Var<T>&, const Var<T>&, const Var<T>*,        \
                                   const ConvSpec&);                                                  \
  template Var<T> batchnorm2d(GradTape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, \
                              Tensor<T>&, ops::BatchNormMode, const ops::BatchNormOptions&);          \
  template Var<T> relu(GradTape<T>&, const Var<T>&);                                                 \
  template Var<T> sigmoid(GradTape<T>&, const Var<T>&);                                              \
  template Var<T> maxpool2d(GradTape<T>&, const Var<T>&);                                            \
  template Var<T> global_avg_pool(GradTape<T>&, const Var<T>&);                                      \
  template Var<T> concat_channels(GradTape<T>&, std::span<const Var<T>>);                            \
  template Var<T> linear(GradTape<T>&, const Var<T>&, const Var<T>&, const Var<T>*);                 \
  template Var<T> scale_channels(GradTape<T>&, const Var<T>&, const Var<T>&);                        \
  template Var<T> mul_scalar(GradTape<T>&, const Var<T>&, T);                                        \
  template Var<T> sum(GradTape<T>&, const Var<T>&);                                                  \
  template Var<T> weighted_sum(GradTape<T>&, const Var<T>&, const Tensor<T>&);

PLUNET_INSTANTIATE_AD(float)
PLUNET_INSTANTIATE_AD(double)

#undef PLUNET_INSTANTIATE_AD

}  // namespace ad
}  // namespace plunet
