#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "plunet/autograd.hpp"
#include "plunet/ops.hpp"
#include "plunet/tensor.hpp"

namespace plunet::nn {

using Mode = ops::BatchNormMode;

// Named learnable parameters plus non-learnable buffers (batch-norm running
// statistics), both kept in declaration order.
template <class T>
class ParamStore {
 public:
  void add_param(const std::string& name, Tensor<T> value);
  void add_buffer(const std::string& name, Tensor<T> value);

  bool has_param(const std::string& name) const { return params_.count(name) != 0; }
  bool has_buffer(const std::string& name) const { return buffers_.count(name) != 0; }
  Tensor<T>& param(const std::string& name);
  const Tensor<T>& param(const std::string& name) const;
  Tensor<T>& buffer(const std::string& name);
  const Tensor<T>& buffer(const std::string& name) const;

  const std::vector<std::string>& param_names() const { return param_order_; }
  const std::vector<std::string>& buffer_names() const { return buffer_order_; }
  // Total number of learnable scalars.
  std::int64_t param_count() const;

  friend bool operator==(const ParamStore&, const ParamStore&) = default;

 private:
  std::vector<std::string> param_order_;
  std::vector<std::string> buffer_order_;
  std::map<std::string, Tensor<T>> params_;
  std::map<std::string, Tensor<T>> buffers_;
};

enum class Init { he_uniform, zeros, ones };

struct ParamDecl {
  std::string name;
  Shape shape;
  Init init = Init::zeros;
  std::int64_t fan_in = 1;
  bool buffer = false;
};

enum class LayerKind {
  conv,
  conv_transpose,
  batchnorm,
  linear,
  relu,
  sigmoid,
  maxpool,
  global_avg_pool,
  concat,
  scale_channels,
};

const char* layer_kind_name(LayerKind kind);

// One primitive stage met during a dry-run walk, with the shapes it sees.
struct LayerInfo {
  std::string name;
  LayerKind kind = LayerKind::conv;
  Shape input;
  Shape output;
  ConvSpec conv;                 // conv / conv_transpose
  std::int64_t features = 0;     // batchnorm channels, linear inputs
  std::int64_t out_features = 0; // linear outputs
};

using LayerTrace = std::vector<LayerInfo>;

template <class T>
struct Context {
  GradTape<T>& tape;
  ParamStore<T>& store;
  Mode mode = Mode::eval;
  ops::BatchNormOptions bn{};

  Var<T> param(const std::string& name) { return tape.parameter(name, store.param(name)); }
};

// ---- primitive layers -------------------------------------------------------

struct Conv2dLayer {
  std::string name;
  ConvSpec spec;

  void declare(std::vector<ParamDecl>& out) const;
  Shape trace(const Shape& in, LayerTrace& out) const;
  template <class T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;
};

// Depthwise 3x3 (groups = in) followed by pointwise 1x1; stages "<name>.dw"
// and "<name>.pw".
struct SeparableConvLayer {
  std::string name;
  ConvSpec spec;

  void declare(std::vector<ParamDecl>& out) const;
  Shape trace(const Shape& in, LayerTrace& out) const;
  template <class T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;
};

struct UpConvLayer {
  std::string name;
  ConvSpec spec;

  void declare(std::vector<ParamDecl>& out) const;
  Shape trace(const Shape& in, LayerTrace& out) const;
  template <class T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;
};

struct BatchNormLayer {
  std::string name;
  std::int64_t channels = 1;

  void declare(std::vector<ParamDecl>& out) const;
  Shape trace(const Shape& in, LayerTrace& out) const;
  template <class T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;
};

struct LinearLayer {
  std::string name;
  std::int64_t in = 1;
  std::int64_t out = 1;

  void declare(std::vector<ParamDecl>& out) const;
  Shape trace(const Shape& in, LayerTrace& out) const;
  template <class T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;
};

// ---- blocks -----------------------------------------------------------------

enum class BlockKind { conv_block, se, lg, ls, ps };

const char* block_kind_name(BlockKind kind);
BlockKind parse_block_kind(const std::string& name);

inline constexpr std::int64_t kDefaultSeReduction = 16;

struct BlockSpec {
  BlockKind kind = BlockKind::conv_block;
  std::int64_t in_channels = 1;
  std::int64_t out_channels = 1;
  std::int64_t se_reduction = kDefaultSeReduction;
  std::vector<std::int64_t> dilations;  // empty: [1,3] for lg/ls, [1,6,12,18] for ps

  std::vector<std::int64_t> effective_dilations() const;
  void validate() const;
};

// conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> ReLU.
class ConvBlock {
 public:
  ConvBlock(const std::string& path, std::int64_t in, std::int64_t out);
  void declare(std::vector<ParamDecl>& out) const;
  Shape trace(const Shape& in, LayerTrace& out) const;
  template <class T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;

 private:
  std::string path_;
  Conv2dLayer conv1_, conv2_;
  BatchNormLayer bn1_, bn2_;
};

// Squeeze (global average pool) and excitation (C -> C/r -> C, ReLU then
// sigmoid); the input is rescaled per channel by the resulting gate.
class SEBlock {
 public:
  SEBlock(const std::string& path, std::int64_t channels, std::int64_t reduction);
  void declare(std::vector<ParamDecl>& out) const;
  Shape trace(const Shape& in, LayerTrace& out) const;
  template <class T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;
  // Per-(n, c) gate in (0, 1) for input x.
  template <class T>
  Var<T> gate(Context<T>& ctx, const Var<T>& x) const;

 private:
  std::string path_;
  std::int64_t channels_;
  LinearLayer fc1_, fc2_;
};

// Parallel 3x3 branches at dilations [1, 3] (each conv -> BN -> ReLU, in ->
// out), concatenated and fused by 1x1 conv (2*out -> out) -> BN -> ReLU.
class LGBlock {
 public:
  LGBlock(const std::string& path, std::int64_t in, std::int64_t out,
          const std::vector<std::int64_t>& dilations);
  void declare(std::vector<ParamDecl>& out) const;
  Shape trace(const Shape& in, LayerTrace& out) const;
  template <class T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;

 private:
  std::string path_;
  std::vector<Conv2dLayer> branches_;
  std::vector<BatchNormLayer> branch_bns_;
  Conv2dLayer fuse_;
  BatchNormLayer fuse_bn_;
};

// LG block followed by an SE gate.
class LSBlock {
 public:
  LSBlock(const std::string& path, std::int64_t in, std::int64_t out, std::int64_t reduction,
          const std::vector<std::int64_t>& dilations);
  void declare(std::vector<ParamDecl>& out) const;
  Shape trace(const Shape& in, LayerTrace& out) const;
  template <class T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;

 private:
  LGBlock lg_;
  SEBlock se_;
};

// Four depthwise-separable 3x3 atrous branches (dilations 1, 6, 12, 18; each
// -> BN -> ReLU, in -> out), concatenated in dilation order, fused by 1x1 conv
// (4*out -> out) -> BN -> ReLU, then an SE gate. No image-pooling branch.
class PSModule {
 public:
  PSModule(const std::string& path, std::int64_t in, std::int64_t out, std::int64_t reduction,
           const std::vector<std::int64_t>& dilations);
  void declare(std::vector<ParamDecl>& out) const;
  Shape trace(const Shape& in, LayerTrace& out) const;
  template <class T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;

 private:
  std::string path_;
  std::vector<SeparableConvLayer> branches_;
  std::vector<BatchNormLayer> branch_bns_;
  Conv2dLayer fuse_;
  BatchNormLayer fuse_bn_;
  SEBlock se_;
};

class Block {
 public:
  // Parameters are named "<path>.<stage>.<tensor>", e.g. "enc1.lg.branch_d3.w".
  Block(const BlockSpec& spec, const std::string& path);

  const BlockSpec& spec() const { return spec_; }
  const std::string& path() const { return path_; }
  void declare(std::vector<ParamDecl>& out) const;
  Shape trace(const Shape& in, LayerTrace& out) const;
  template <class T>
  Var<T> forward(Context<T>& ctx, const Var<T>& x) const;

 private:
  BlockSpec spec_;
  std::string path_;
  std::variant<ConvBlock, SEBlock, LGBlock, LSBlock, PSModule> impl_;
};

// Fills a store from declarations: He-uniform (bound sqrt(6 / fan_in)) for
// weights, zeros for biases / beta / running mean, ones for gamma / running var.
template <class T>
ParamStore<T> init_from_decls(const std::vector<ParamDecl>& decls, std::uint64_t seed);

}  // namespace plunet::nn
