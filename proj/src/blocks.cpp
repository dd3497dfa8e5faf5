#include "plunet/blocks.hpp"

#include <cmath>
#include <stdexcept>

#include "plunet/rng.hpp"

namespace plunet::nn {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void add_elementwise(LayerTrace& out, const std::string& name, LayerKind kind, const Shape& s) {
  LayerInfo info;
  info.name = name;
  info.kind = kind;
  info.input = s;
  info.output = s;
  out.push_back(std::move(info));
}

void require_channels(const Shape& in, std::int64_t expected, const std::string& who) {
  if (in.c != expected) {
    fail(who + " expects " + std::to_string(expected) + " input channels, got " + std::to_string(in.c));
  }
}

}  // namespace

// ---- ParamStore -------------------------------------------------------------

template <class T>
void ParamStore<T>::add_param(const std::string& name, Tensor<T> value) {
  if (params_.count(name) || buffers_.count(name)) fail("duplicate parameter name '" + name + "'");
  param_order_.push_back(name);
  params_.emplace(name, std::move(value));
}

template <class T>
void ParamStore<T>::add_buffer(const std::string& name, Tensor<T> value) {
  if (params_.count(name) || buffers_.count(name)) fail("duplicate buffer name '" + name + "'");
  buffer_order_.push_back(name);
  buffers_.emplace(name, std::move(value));
}

template <class T>
Tensor<T>& ParamStore<T>::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return it->second;
}

template <class T>
const Tensor<T>& ParamStore<T>::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return it->second;
}

template <class T>
Tensor<T>& ParamStore<T>::buffer(const std::string& name) {
  auto it = buffers_.find(name);
  if (it == buffers_.end()) throw std::out_of_range("no buffer named '" + name + "'");
  return it->second;
}

template <class T>
const Tensor<T>& ParamStore<T>::buffer(const std::string& name) const {
  auto it = buffers_.find(name);
  if (it == buffers_.end()) throw std::out_of_range("no buffer named '" + name + "'");
  return it->second;
}

template <class T>
std::int64_t ParamStore<T>::param_count() const {
  std::int64_t total = 0;
  for (const auto& [name, t] : params_) total += t.numel();
  return total;
}

template class ParamStore<float>;
template class ParamStore<double>;

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::conv_transpose: return "conv_transpose";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::linear: return "linear";
    case LayerKind::relu: return "relu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::concat: return "concat";
    case LayerKind::scale_channels: return "scale_channels";
  }
  return "?";
}

// ---- primitive layers -------------------------------------------------------

void Conv2dLayer::declare(std::vector<ParamDecl>& out) const {
  const Shape ws = spec.weight_shape();
  out.push_back({name + ".w", ws, Init::he_uniform, ws.c * ws.h * ws.w, false});
  if (spec.bias) out.push_back({name + ".b", spec.bias_shape(), Init::zeros, 1, false});
}

Shape Conv2dLayer::trace(const Shape& in, LayerTrace& out) const {
  LayerInfo info;
  info.name = name;
  info.kind = LayerKind::conv;
  info.input = in;
  info.output = spec.output_shape(in);
  info.conv = spec;
  out.push_back(info);
  return info.output;
}

template <class T>
Var<T> Conv2dLayer::forward(Context<T>& ctx, const Var<T>& x) const {
  const Var<T> w = ctx.param(name + ".w");
  if (spec.bias) {
    const Var<T> b = ctx.param(name + ".b");
    return ad::conv2d(ctx.tape, x, w, &b, spec);
  }
  return ad::conv2d<T>(ctx.tape, x, w, nullptr, spec);
}

void SeparableConvLayer::declare(std::vector<ParamDecl>& out) const {
  Conv2dLayer{name + ".dw", ops::depthwise_stage(spec)}.declare(out);
  Conv2dLayer{name + ".pw", ops::pointwise_stage(spec)}.declare(out);
}

Shape SeparableConvLayer::trace(const Shape& in, LayerTrace& out) const {
  const Shape mid = Conv2dLayer{name + ".dw", ops::depthwise_stage(spec)}.trace(in, out);
  return Conv2dLayer{name + ".pw", ops::pointwise_stage(spec)}.trace(mid, out);
}

template <class T>
Var<T> SeparableConvLayer::forward(Context<T>& ctx, const Var<T>& x) const {
  const Var<T> wd = ctx.param(name + ".dw.w");
  const Var<T> wp = ctx.param(name + ".pw.w");
  if (spec.bias) {
    const Var<T> bd = ctx.param(name + ".dw.b");
    const Var<T> bp = ctx.param(name + ".pw.b");
    return ad::conv2d_depthwise_separable(ctx.tape, x, wd, &bd, wp, &bp, spec);
  }
  return ad::conv2d_depthwise_separable<T>(ctx.tape, x, wd, nullptr, wp, nullptr, spec);
}

void UpConvLayer::declare(std::vector<ParamDecl>& out) const {
  // Each output element receives in_channels contributions.
  out.push_back({name + ".w", Shape{spec.in_channels, spec.out_channels, 2, 2}, Init::he_uniform,
                 spec.in_channels, false});
  if (spec.bias) out.push_back({name + ".b", spec.bias_shape(), Init::zeros, 1, false});
}

Shape UpConvLayer::trace(const Shape& in, LayerTrace& out) const {
  require_channels(in, spec.in_channels, name);
  LayerInfo info;
  info.name = name;
  info.kind = LayerKind::conv_transpose;
  info.input = in;
  info.output = Shape{in.n, spec.out_channels, 2 * in.h, 2 * in.w};
  info.conv = spec;
  out.push_back(info);
  return info.output;
}

template <class T>
Var<T> UpConvLayer::forward(Context<T>& ctx, const Var<T>& x) const {
  const Var<T> w = ctx.param(name + ".w");
  if (spec.bias) {
    const Var<T> b = ctx.param(name + ".b");
    return ad::conv_transpose2d(ctx.tape, x, w, &b, spec);
  }
  return ad::conv_transpose2d<T>(ctx.tape, x, w, nullptr, spec);
}

void BatchNormLayer::declare(std::vector<ParamDecl>& out) const {
  const Shape s{1, channels, 1, 1};
  out.push_back({name + ".gamma", s, Init::ones, 1, false});
  out.push_back({name + ".beta", s, Init::zeros, 1, false});
  out.push_back({name + ".running_mean", s, Init::zeros, 1, true});
  out.push_back({name + ".running_var", s, Init::ones, 1, true});
}

Shape BatchNormLayer::trace(const Shape& in, LayerTrace& out) const {
  require_channels(in, channels, name);
  LayerInfo info;
  info.name = name;
  info.kind = LayerKind::batchnorm;
  info.input = in;
  info.output = in;
  info.features = channels;
  out.push_back(info);
  return in;
}

template <class T>
Var<T> BatchNormLayer::forward(Context<T>& ctx, const Var<T>& x) const {
  const Var<T> gamma = ctx.param(name + ".gamma");
  const Var<T> beta = ctx.param(name + ".beta");
  return ad::batchnorm2d(ctx.tape, x, gamma, beta, ctx.store.buffer(name + ".running_mean"),
                         ctx.store.buffer(name + ".running_var"), ctx.mode, ctx.bn);
}

void LinearLayer::declare(std::vector<ParamDecl>& decls) const {
  decls.push_back({name + ".w", Shape{out, in, 1, 1}, Init::he_uniform, in, false});
  decls.push_back({name + ".b", Shape{1, out, 1, 1}, Init::zeros, 1, false});
}

Shape LinearLayer::trace(const Shape& s, LayerTrace& trace) const {
  if (s.c != in || s.h != 1 || s.w != 1) {
    fail(name + " expects input (N," + std::to_string(in) + ",1,1), got " + s.str());
  }
  LayerInfo info;
  info.name = name;
  info.kind = LayerKind::linear;
  info.input = s;
  info.output = Shape{s.n, out, 1, 1};
  info.features = in;
  info.out_features = out;
  trace.push_back(info);
  return info.output;
}

template <class T>
Var<T> LinearLayer::forward(Context<T>& ctx, const Var<T>& x) const {
  const Var<T> w = ctx.param(name + ".w");
  const Var<T> b = ctx.param(name + ".b");
  return ad::linear(ctx.tape, x, w, &b);
}

// ---- block specs --------------------------------------------------------------

const char* block_kind_name(BlockKind kind) {
  switch (kind) {
    case BlockKind::conv_block: return "conv_block";
    case BlockKind::se: return "se";
    case BlockKind::lg: return "lg";
    case BlockKind::ls: return "ls";
    case BlockKind::ps: return "ps";
  }
  return "?";
}

BlockKind parse_block_kind(const std::string& name) {
  for (BlockKind k : {BlockKind::conv_block, BlockKind::se, BlockKind::lg, BlockKind::ls, BlockKind::ps}) {
    if (name == block_kind_name(k)) return k;
  }
  fail("unknown block kind '" + name + "' (expected conv_block, se, lg, ls or ps)");
}

std::vector<std::int64_t> BlockSpec::effective_dilations() const {
  if (!dilations.empty()) return dilations;
  switch (kind) {
    case BlockKind::lg:
    case BlockKind::ls: return {1, 3};
    case BlockKind::ps: return {1, 6, 12, 18};
    default: return {};
  }
}

void BlockSpec::validate() const {
  if (in_channels < 1 || out_channels < 1) fail("block channel counts must be positive");
  const bool uses_se = kind == BlockKind::se || kind == BlockKind::ls || kind == BlockKind::ps;
  if (kind == BlockKind::se && in_channels != out_channels) {
    fail("SE block preserves channels: in " + std::to_string(in_channels) + " != out " +
         std::to_string(out_channels));
  }
  if (uses_se) {
    if (se_reduction < 1 || out_channels % se_reduction != 0) {
      fail("SE reduction " + std::to_string(se_reduction) + " must divide channel count " +
           std::to_string(out_channels));
    }
  }
  if (!dilations.empty() && kind != BlockKind::lg && kind != BlockKind::ls && kind != BlockKind::ps) {
    fail(std::string("dilations do not apply to ") + block_kind_name(kind));
  }
  for (std::size_t i = 0; i < dilations.size(); ++i) {
    if (dilations[i] < 1) fail("dilations must be positive");
    for (std::size_t j = 0; j < i; ++j) {
      if (dilations[j] == dilations[i]) fail("dilations must be distinct");
    }
  }
}

// ---- ConvBlock ----------------------------------------------------------------

ConvBlock::ConvBlock(const std::string& path, std::int64_t in, std::int64_t out)
    : path_(path),
      conv1_{path + ".conv1", ConvSpec::same(in, out)},
      conv2_{path + ".conv2", ConvSpec::same(out, out)},
      bn1_{path + ".bn1", out},
      bn2_{path + ".bn2", out} {}

void ConvBlock::declare(std::vector<ParamDecl>& out) const {
  conv1_.declare(out);
  bn1_.declare(out);
  conv2_.declare(out);
  bn2_.declare(out);
}

Shape ConvBlock::trace(const Shape& in, LayerTrace& out) const {
  Shape s = bn1_.trace(conv1_.trace(in, out), out);
  add_elementwise(out, path_ + ".relu1", LayerKind::relu, s);
  s = bn2_.trace(conv2_.trace(s, out), out);
  add_elementwise(out, path_ + ".relu2", LayerKind::relu, s);
  return s;
}

template <class T>
Var<T> ConvBlock::forward(Context<T>& ctx, const Var<T>& x) const {
  Var<T> y = ad::relu(ctx.tape, bn1_.forward(ctx, conv1_.forward(ctx, x)));
  return ad::relu(ctx.tape, bn2_.forward(ctx, conv2_.forward(ctx, y)));
}

// ---- SEBlock --------------------------------------------------------------------

SEBlock::SEBlock(const std::string& path, std::int64_t channels, std::int64_t reduction)
    : path_(path),
      channels_(channels),
      fc1_{path + ".fc1", channels, channels / reduction},
      fc2_{path + ".fc2", channels / reduction, channels} {
  if (reduction < 1 || channels % reduction != 0) {
    fail("SE reduction " + std::to_string(reduction) + " must divide " + std::to_string(channels));
  }
}

void SEBlock::declare(std::vector<ParamDecl>& out) const {
  fc1_.declare(out);
  fc2_.declare(out);
}

Shape SEBlock::trace(const Shape& in, LayerTrace& out) const {
  require_channels(in, channels_, path_);
  LayerInfo gap;
  gap.name = path_ + ".gap";
  gap.kind = LayerKind::global_avg_pool;
  gap.input = in;
  gap.output = Shape{in.n, in.c, 1, 1};
  out.push_back(gap);
  Shape s = fc1_.trace(gap.output, out);
  add_elementwise(out, path_ + ".relu", LayerKind::relu, s);
  s = fc2_.trace(s, out);
  add_elementwise(out, path_ + ".sigmoid", LayerKind::sigmoid, s);
  add_elementwise(out, path_ + ".scale", LayerKind::scale_channels, in);
  return in;
}

template <class T>
Var<T> SEBlock::gate(Context<T>& ctx, const Var<T>& x) const {
  Var<T> s = ad::global_avg_pool(ctx.tape, x);
  s = ad::relu(ctx.tape, fc1_.forward(ctx, s));
  return ad::sigmoid(ctx.tape, fc2_.forward(ctx, s));
}

template <class T>
Var<T> SEBlock::forward(Context<T>& ctx, const Var<T>& x) const {
  if (x.shape().c != channels_) require_channels(x.shape(), channels_, path_);
  return ad::scale_channels(ctx.tape, x, gate(ctx, x));
}

// ---- LGBlock --------------------------------------------------------------------

LGBlock::LGBlock(const std::string& path, std::int64_t in, std::int64_t out,
                 const std::vector<std::int64_t>& dilations)
    : path_(path),
      fuse_{path + ".fuse", ConvSpec::pointwise(static_cast<std::int64_t>(dilations.size()) * out, out)},
      fuse_bn_{path + ".fuse_bn", out} {
  for (auto d : dilations) {
    const std::string branch = path + ".branch_d" + std::to_string(d);
    branches_.push_back({branch, ConvSpec::same(in, out, 3, d)});
    branch_bns_.push_back({branch + "_bn", out});
  }
}

void LGBlock::declare(std::vector<ParamDecl>& out) const {
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    branches_[i].declare(out);
    branch_bns_[i].declare(out);
  }
  fuse_.declare(out);
  fuse_bn_.declare(out);
}

Shape LGBlock::trace(const Shape& in, LayerTrace& out) const {
  Shape cat = in;
  cat.c = 0;
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    const Shape s = branch_bns_[i].trace(branches_[i].trace(in, out), out);
    add_elementwise(out, branches_[i].name + "_relu", LayerKind::relu, s);
    cat.c += s.c;
    cat.h = s.h;
    cat.w = s.w;
  }
  LayerInfo info;
  info.name = path_ + ".concat";
  info.kind = LayerKind::concat;
  info.input = in;
  info.output = cat;
  out.push_back(info);
  const Shape s = fuse_bn_.trace(fuse_.trace(cat, out), out);
  add_elementwise(out, path_ + ".fuse_relu", LayerKind::relu, s);
  return s;
}

template <class T>
Var<T> LGBlock::forward(Context<T>& ctx, const Var<T>& x) const {
  std::vector<Var<T>> parts;
  parts.reserve(branches_.size());
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    parts.push_back(ad::relu(ctx.tape, branch_bns_[i].forward(ctx, branches_[i].forward(ctx, x))));
  }
  const Var<T> cat = ad::concat_channels<T>(ctx.tape, parts);
  return ad::relu(ctx.tape, fuse_bn_.forward(ctx, fuse_.forward(ctx, cat)));
}

// ---- LSBlock --------------------------------------------------------------------

LSBlock::LSBlock(const std::string& path, std::int64_t in, std::int64_t out, std::int64_t reduction,
                 const std::vector<std::int64_t>& dilations)
    : lg_(path + ".lg", in, out, dilations), se_(path + ".se", out, reduction) {}

void LSBlock::declare(std::vector<ParamDecl>& out) const {
  lg_.declare(out);
  se_.declare(out);
}

Shape LSBlock::trace(const Shape& in, LayerTrace& out) const { return se_.trace(lg_.trace(in, out), out); }

template <class T>
Var<T> LSBlock::forward(Context<T>& ctx, const Var<T>& x) const {
  return se_.forward(ctx, lg_.forward(ctx, x));
}

// ---- PSModule -------------------------------------------------------------------

PSModule::PSModule(const std::string& path, std::int64_t in, std::int64_t out, std::int64_t reduction,
                   const std::vector<std::int64_t>& dilations)
    : path_(path + ".ps"),
      fuse_{path + ".ps.fuse", ConvSpec::pointwise(static_cast<std::int64_t>(dilations.size()) * out, out)},
      fuse_bn_{path + ".ps.fuse_bn", out},
      se_(path + ".se", out, reduction) {
  for (auto d : dilations) {
    const std::string branch = path_ + ".branch_d" + std::to_string(d);
    branches_.push_back({branch, ConvSpec::same(in, out, 3, d)});
    branch_bns_.push_back({branch + "_bn", out});
  }
}

void PSModule::declare(std::vector<ParamDecl>& out) const {
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    branches_[i].declare(out);
    branch_bns_[i].declare(out);
  }
  fuse_.declare(out);
  fuse_bn_.declare(out);
  se_.declare(out);
}

Shape PSModule::trace(const Shape& in, LayerTrace& out) const {
  Shape cat = in;
  cat.c = 0;
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    const Shape s = branch_bns_[i].trace(branches_[i].trace(in, out), out);
    add_elementwise(out, branches_[i].name + "_relu", LayerKind::relu, s);
    cat.c += s.c;
    cat.h = s.h;
    cat.w = s.w;
  }
  LayerInfo info;
  info.name = path_ + ".concat";
  info.kind = LayerKind::concat;
  info.input = in;
  info.output = cat;
  out.push_back(info);
  const Shape s = fuse_bn_.trace(fuse_.trace(cat, out), out);
  add_elementwise(out, path_ + ".fuse_relu", LayerKind::relu, s);
  return se_.trace(s, out);
}

template <class T>
Var<T> PSModule::forward(Context<T>& ctx, const Var<T>& x) const {
  std::vector<Var<T>> parts;
  parts.reserve(branches_.size());
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    parts.push_back(ad::relu(ctx.tape, branch_bns_[i].forward(ctx, branches_[i].forward(ctx, x))));
  }
  const Var<T> cat = ad::concat_channels<T>(ctx.tape, parts);
  const Var<T> fused = ad::relu(ctx.tape, fuse_bn_.forward(ctx, fuse_.forward(ctx, cat)));
  return se_.forward(ctx, fused);
}

// ---- Block ----------------------------------------------------------------------

namespace {

std::variant<ConvBlock, SEBlock, LGBlock, LSBlock, PSModule> make_impl(const BlockSpec& spec,
                                                                      const std::string& path) {
  spec.validate();
  const auto dil = spec.effective_dilations();
  switch (spec.kind) {
    case BlockKind::conv_block: return ConvBlock(path, spec.in_channels, spec.out_channels);
    case BlockKind::se: return SEBlock(path + ".se", spec.out_channels, spec.se_reduction);
    case BlockKind::lg: return LGBlock(path + ".lg", spec.in_channels, spec.out_channels, dil);
    case BlockKind::ls: return LSBlock(path, spec.in_channels, spec.out_channels, spec.se_reduction, dil);
    case BlockKind::ps: return PSModule(path, spec.in_channels, spec.out_channels, spec.se_reduction, dil);
  }
  fail("unknown block kind");
}

}  // namespace

Block::Block(const BlockSpec& spec, const std::string& path)
    : spec_(spec), path_(path), impl_(make_impl(spec, path)) {}

void Block::declare(std::vector<ParamDecl>& out) const {
  std::visit([&](const auto& b) { b.declare(out); }, impl_);
}

Shape Block::trace(const Shape& in, LayerTrace& out) const {
  require_channels(in, spec_.in_channels, path_);
  return std::visit([&](const auto& b) { return b.trace(in, out); }, impl_);
}

template <class T>
Var<T> Block::forward(Context<T>& ctx, const Var<T>& x) const {
  require_channels(x.shape(), spec_.in_channels, path_);
  return std::visit([&](const auto& b) { return b.template forward<T>(ctx, x); }, impl_);
}

template <class T>
ParamStore<T> init_from_decls(const std::vector<ParamDecl>& decls, std::uint64_t seed) {
  Rng rng(seed);
  ParamStore<T> store;
  for (const auto& d : decls) {
    Tensor<T> t(d.shape);
    switch (d.init) {
      case Init::zeros: break;
      case Init::ones: t.fill(T(1)); break;
      case Init::he_uniform: {
        const double bound = std::sqrt(6.0 / static_cast<double>(d.fan_in));
        for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
    }
    if (d.buffer) {
      store.add_buffer(d.name, std::move(t));
    } else {
      store.add_param(d.name, std::move(t));
    }
  }
  return store;
}

#define PLUNET_INSTANTIATE_BLOCKS(T)                                              \
  template Var<T> Conv2dLayer::forward(Context<T>&, const Var<T>&) const;         \
  template Var<T> SeparableConvLayer::forward(Context<T>&, const Var<T>&) const;  \
  template Var<T> UpConvLayer::forward(Context<T>&, const Var<T>&) const;         \
  template Var<T> BatchNormLayer::forward(Context<T>&, const Var<T>&) const;      \
  template Var<T> LinearLayer::forward(Context<T>&, const Var<T>&) const;         \
  template Var<T> ConvBlock::forward(Context<T>&, const Var<T>&) const;           \
  template Var<T> SEBlock::forward(Context<T>&, const Var<T>&) const;             \
  template Var<T> SEBlock::gate(Context<T>&, const Var<T>&) const;                \
  template Var<T> LGBlock::forward(Context<T>&, const Var<T>&) const;             \
  template Var<T> LSBlock::forward(Context<T>&, const Var<T>&) const;             \
  template Var<T> PSModule::forward(Context<T>&, const Var<T>&) const;            \
  template Var<T> Block::forward(Context<T>&, const Var<T>&) const;               \
  template ParamStore<T> init_from_decls(const std::vector<ParamDecl>&, std::uint64_t);

PLUNET_INSTANTIATE_BLOCKS(float)
PLUNET_INSTANTIATE_BLOCKS(double)

#undef PLUNET_INSTANTIATE_BLOCKS

}  // namespace plunet::nn
