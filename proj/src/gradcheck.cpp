#include "plunet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "plunet/autograd.hpp"
#include "plunet/blocks.hpp"
#include "plunet/metrics.hpp"
#include "plunet/rng.hpp"

namespace plunet::gradcheck {

Result check(const std::string& target, const Problem& problem, double step, double tolerance) {
  Result r;
  r.target = target;
  const auto analytic = problem.grads();
  for (const auto& [name, tensor] : problem.leaves) {
    auto it = analytic.find(name);
    if (it == analytic.end()) throw std::logic_error("no analytic gradient for '" + name + "'");
    const Tensor<double>& g = it->second;
    auto values = tensor->data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = problem.loss();
      values[i] = saved - step;
      const double down = problem.loss();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = g.data()[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kFloor});
      r.max_rel_error = std::max(r.max_rel_error, err);
      ++r.checked;
    }
  }
  r.passed = r.max_rel_error <= tolerance;
  return r;
}

namespace {

using T = double;
using Builder = std::function<Var<T>(GradTape<T>&, const std::vector<Var<T>>&)>;

Tensor<T> uniform(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(s);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Uniform in [-1, 1] but at least `margin` away from zero.
Tensor<T> away_from_zero(Rng& rng, Shape s, double margin = 1e-2) {
  Tensor<T> t(s);
  for (auto& v : t.data()) {
    do {
      v = rng.uniform(-1.0, 1.0);
    } while (std::abs(v) < margin);
  }
  return t;
}

// Distinct values spread evenly over [-1, 1] in shuffled order, so every
// pooling window has a unique maximum separated from the runner-up.
Tensor<T> shuffled_grid(Rng& rng, Shape s) {
  const auto n = static_cast<std::size_t>(s.numel());
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
  Tensor<T> t(s);
  for (std::size_t i = 0; i < n; ++i) t.data()[i] = -1.0 + 2.0 * (static_cast<double>(order[i]) + 0.5) / n;
  return t;
}

// Owns the leaf tensors of an op-level problem; the loss is a fixed random
// weighting of the op output.
struct OpProblem {
  std::vector<std::string> names;
  std::vector<std::unique_ptr<Tensor<T>>> values;
  Builder build;
  Tensor<T> weights;

  Var<T> forward(GradTape<T>& tape, std::vector<Var<T>>& vars, bool record) const {
    vars.clear();
    for (const auto& v : values) vars.push_back(tape.input(*v, record));
    return build(tape, vars);
  }

  Problem problem() {
    Problem p;
    for (std::size_t i = 0; i < names.size(); ++i) p.leaves.emplace_back(names[i], values[i].get());
    p.loss = [this] {
      GradTape<T> tape(false);
      std::vector<Var<T>> vars;
      return ad::weighted_sum(tape, forward(tape, vars, false), weights).value().data()[0];
    };
    p.grads = [this] {
      GradTape<T> tape(true);
      std::vector<Var<T>> vars;
      tape.backward(ad::weighted_sum(tape, forward(tape, vars, true), weights));
      std::map<std::string, Tensor<T>> out;
      for (std::size_t i = 0; i < names.size(); ++i) {
        out[names[i]] = vars[i].grad().defined() ? vars[i].grad() : Tensor<T>(values[i]->shape());
      }
      return out;
    };
    return p;
  }
};

Result run_op(const std::string& target, Rng& rng, std::vector<std::pair<std::string, Tensor<T>>> inputs,
              Builder build) {
  OpProblem op;
  for (auto& [name, t] : inputs) {
    op.names.push_back(name);
    op.values.push_back(std::make_unique<Tensor<T>>(std::move(t)));
  }
  op.build = std::move(build);
  {
    GradTape<T> tape(false);
    std::vector<Var<T>> vars;
    op.weights = uniform(rng, op.forward(tape, vars, false).shape());
  }
  return check(target, op.problem());
}

Result run_block(const std::string& target, Rng& rng, const nn::BlockSpec& spec, Shape in) {
  const nn::Block block(spec, "blk");
  std::vector<nn::ParamDecl> decls;
  block.declare(decls);
  auto store = std::make_shared<nn::ParamStore<T>>(nn::init_from_decls<T>(decls, rng.next()));
  for (const auto& name : store->param_names()) {
    Tensor<T>& p = store->param(name);
    p = uniform(rng, p.shape());
  }
  auto x = std::make_shared<Tensor<T>>(uniform(rng, in));
  Shape out_shape;
  {
    nn::LayerTrace rows;
    out_shape = block.trace(in, rows);
  }
  auto weights = std::make_shared<Tensor<T>>(uniform(rng, out_shape));

  Problem p;
  p.leaves.emplace_back("x", x.get());
  for (const auto& name : store->param_names()) p.leaves.emplace_back(name, &store->param(name));
  p.loss = [=, &block] {
    GradTape<T> tape(false);
    nn::Context<T> ctx{tape, *store, nn::Mode::train};
    return ad::weighted_sum(tape, block.forward(ctx, tape.input(*x, false)), *weights).value().data()[0];
  };
  p.grads = [=, &block] {
    GradTape<T> tape(true);
    nn::Context<T> ctx{tape, *store, nn::Mode::train};
    const Var<T> xv = tape.input(*x, true);
    tape.backward(ad::weighted_sum(tape, block.forward(ctx, xv), *weights));
    auto out = tape.parameter_grads();
    out["x"] = xv.grad();
    return out;
  };
  return check(target, p);
}

Var<T> conv_with_bias(GradTape<T>& tape, const std::vector<Var<T>>& v, const ConvSpec& spec) {
  return ad::conv2d(tape, v[0], v[1], &v[2], spec);
}

ConvSpec make_spec(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride, std::int64_t pad,
                   std::int64_t dil, std::int64_t groups) {
  ConvSpec s;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel = {k, k};
  s.stride = {stride, stride};
  s.padding = {pad, pad};
  s.dilation = {dil, dil};
  s.groups = groups;
  s.bias = true;
  return s;
}

Result run_conv(const std::string& target, Rng& rng, const ConvSpec& spec, std::int64_t hw) {
  return run_op(target, rng,
                {{"x", uniform(rng, Shape{2, spec.in_channels, hw, hw})},
                 {"w", uniform(rng, spec.weight_shape())},
                 {"b", uniform(rng, spec.bias_shape())}},
                [spec](GradTape<T>& tape, const std::vector<Var<T>>& v) { return conv_with_bias(tape, v, spec); });
}

}  // namespace

const std::vector<std::string>& op_targets() {
  static const std::vector<std::string> names{
      "conv2d",        "conv2d_dilated",  "conv2d_strided",  "conv2d_grouped",   "conv2d_depthwise_separable",
      "conv_transpose2d", "batchnorm2d_train", "batchnorm2d_eval", "relu",          "sigmoid",
      "maxpool2d",     "global_avg_pool", "concat_channels", "linear",           "scale_channels",
      "bce_with_logits"};
  return names;
}

const std::vector<std::string>& block_targets() {
  static const std::vector<std::string> names{"conv_block", "se", "lg", "ls", "ps"};
  return names;
}

std::vector<std::string> all_targets() {
  auto out = op_targets();
  const auto& b = block_targets();
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

Result run(const std::string& target, std::uint64_t seed) {
  Rng rng(seed);

  if (target == "conv2d") return run_conv(target, rng, make_spec(3, 4, 3, 1, 1, 1, 1), 6);
  if (target == "conv2d_dilated") return run_conv(target, rng, make_spec(3, 4, 3, 1, 2, 2, 1), 7);
  if (target == "conv2d_strided") return run_conv(target, rng, make_spec(3, 4, 3, 2, 1, 1, 1), 7);
  if (target == "conv2d_grouped") return run_conv(target, rng, make_spec(4, 6, 3, 1, 1, 1, 2), 5);
  if (target == "conv2d_depthwise_separable") {
    const ConvSpec spec = ConvSpec::same(3, 5, 3, 2);
    const ConvSpec dw = ops::depthwise_stage(spec);
    const ConvSpec pw = ops::pointwise_stage(spec);
    return run_op(target, rng,
                  {{"x", uniform(rng, Shape{2, 3, 6, 6})},
                   {"w_depth", uniform(rng, dw.weight_shape())},
                   {"b_depth", uniform(rng, dw.bias_shape())},
                   {"w_point", uniform(rng, pw.weight_shape())},
                   {"b_point", uniform(rng, pw.bias_shape())}},
                  [spec](GradTape<T>& tape, const std::vector<Var<T>>& v) {
                    return ad::conv2d_depthwise_separable(tape, v[0], v[1], &v[2], v[3], &v[4], spec);
                  });
  }
  if (target == "conv_transpose2d") {
    const ConvSpec spec = ConvSpec::up2x2(3, 4);
    return run_op(target, rng,
                  {{"x", uniform(rng, Shape{2, 3, 3, 3})},
                   {"w", uniform(rng, Shape{3, 4, 2, 2})},
                   {"b", uniform(rng, spec.bias_shape())}},
                  [spec](GradTape<T>& tape, const std::vector<Var<T>>& v) {
                    return ad::conv_transpose2d(tape, v[0], v[1], &v[2], spec);
                  });
  }
  if (target == "batchnorm2d_train" || target == "batchnorm2d_eval") {
    const bool train = target == "batchnorm2d_train";
    auto mean = std::make_shared<Tensor<T>>(uniform(rng, Shape{1, 3, 1, 1}));
    auto var = std::make_shared<Tensor<T>>(uniform(rng, Shape{1, 3, 1, 1}, 0.5, 1.5));
    return run_op(target, rng,
                  {{"x", uniform(rng, Shape{2, 3, 4, 4})},
                   {"gamma", uniform(rng, Shape{1, 3, 1, 1})},
                   {"beta", uniform(rng, Shape{1, 3, 1, 1})}},
                  [train, mean, var](GradTape<T>& tape, const std::vector<Var<T>>& v) {
                    // Work on copies so repeated evaluations see the same running statistics.
                    Tensor<T> m = *mean;
                    Tensor<T> s = *var;
                    return ad::batchnorm2d(tape, v[0], v[1], v[2], m, s,
                                           train ? ops::BatchNormMode::train : ops::BatchNormMode::eval,
                                           ops::BatchNormOptions{});
                  });
  }
  if (target == "relu") {
    return run_op(target, rng, {{"x", away_from_zero(rng, Shape{2, 3, 4, 4})}},
                  [](GradTape<T>& tape, const std::vector<Var<T>>& v) { return ad::relu(tape, v[0]); });
  }
  if (target == "sigmoid") {
    return run_op(target, rng, {{"x", uniform(rng, Shape{2, 3, 4, 4}, -4.0, 4.0)}},
                  [](GradTape<T>& tape, const std::vector<Var<T>>& v) { return ad::sigmoid(tape, v[0]); });
  }
  if (target == "maxpool2d") {
    return run_op(target, rng, {{"x", shuffled_grid(rng, Shape{1, 2, 6, 6})}},
                  [](GradTape<T>& tape, const std::vector<Var<T>>& v) { return ad::maxpool2d(tape, v[0]); });
  }
  if (target == "global_avg_pool") {
    return run_op(target, rng, {{"x", uniform(rng, Shape{2, 3, 4, 5})}},
                  [](GradTape<T>& tape, const std::vector<Var<T>>& v) { return ad::global_avg_pool(tape, v[0]); });
  }
  if (target == "concat_channels") {
    return run_op(target, rng,
                  {{"a", uniform(rng, Shape{2, 1, 3, 3})},
                   {"b", uniform(rng, Shape{2, 2, 3, 3})},
                   {"c", uniform(rng, Shape{2, 3, 3, 3})}},
                  [](GradTape<T>& tape, const std::vector<Var<T>>& v) {
                    return ad::concat_channels<T>(tape, std::span<const Var<T>>(v));
                  });
  }
  if (target == "linear") {
    return run_op(target, rng,
                  {{"x", uniform(rng, Shape{3, 5, 1, 1})},
                   {"w", uniform(rng, Shape{4, 5, 1, 1})},
                   {"b", uniform(rng, Shape{1, 4, 1, 1})}},
                  [](GradTape<T>& tape, const std::vector<Var<T>>& v) { return ad::linear(tape, v[0], v[1], &v[2]); });
  }
  if (target == "scale_channels") {
    return run_op(target, rng,
                  {{"x", uniform(rng, Shape{2, 3, 4, 4})}, {"s", uniform(rng, Shape{2, 3, 1, 1})}},
                  [](GradTape<T>& tape, const std::vector<Var<T>>& v) {
                    return ad::scale_channels(tape, v[0], v[1]);
                  });
  }
  if (target == "bce_with_logits") {
    Tensor<T> y(Shape{2, 1, 4, 4});
    for (auto& v : y.data()) v = static_cast<double>(rng.index(2));
    return run_op(target, rng, {{"z", uniform(rng, Shape{2, 1, 4, 4}, -3.0, 3.0)}},
                  [y](GradTape<T>& tape, const std::vector<Var<T>>& v) {
                    return metrics::ad::bce_with_logits(tape, v[0], y);
                  });
  }

  const Shape in{2, 4, 6, 6};
  if (target == "conv_block") return run_block(target, rng, {nn::BlockKind::conv_block, 4, 8, 16, {}}, in);
  if (target == "se") return run_block(target, rng, {nn::BlockKind::se, 4, 4, 2, {}}, in);
  if (target == "lg") return run_block(target, rng, {nn::BlockKind::lg, 4, 8, 16, {}}, in);
  if (target == "ls") return run_block(target, rng, {nn::BlockKind::ls, 4, 8, 4, {}}, in);
  if (target == "ps") return run_block(target, rng, {nn::BlockKind::ps, 4, 8, 4, {}}, in);

  throw std::invalid_argument("unknown gradcheck target '" + target + "'");
}

}  // namespace plunet::gradcheck
