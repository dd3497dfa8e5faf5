#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "plunet/blocks.hpp"

namespace plunet {

enum class Variant { unet, lunet, punet, plunet };

const char* variant_name(Variant v);
Variant parse_variant(const std::string& name);

struct ArchConfig {
  Variant variant = Variant::unet;
  std::int64_t in_channels = 3;
  std::int64_t out_channels = 1;
  std::int64_t depth = 4;
  std::vector<std::int64_t> widths{64, 128, 256, 512};
  std::int64_t bottleneck_width = 1024;
  nn::BlockKind encoder_block = nn::BlockKind::conv_block;
  nn::BlockKind decoder_block = nn::BlockKind::conv_block;
  nn::BlockKind bottleneck_kind = nn::BlockKind::conv_block;

  static ArchConfig preset(Variant v);
  static ArchConfig preset(const std::string& name) { return preset(parse_variant(name)); }

  // Throws std::invalid_argument describing the first violated rule.
  void validate() const;
  std::int64_t required_multiple() const { return std::int64_t{1} << depth; }

  nlohmann::json to_json() const;
  // Rejects unknown or missing keys.
  static ArchConfig from_json(const nlohmann::json& j);

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

enum class NodeKind { input, block, pool, up, concat, head };

const char* node_kind_name(NodeKind k);

struct GraphNode {
  std::string name;
  NodeKind kind = NodeKind::block;
  std::int64_t level = 0;          // 1..depth for encoder/decoder nodes, 0 otherwise
  std::vector<std::string> inputs;  // names of producer nodes
};

// Encoder: depth x (block -> maxpool); bottleneck; decoder: depth x (up-conv
// -> concat [skip, up] -> block); head: 1x1 conv (+ sigmoid in forward).
class ModelGraph {
 public:
  explicit ModelGraph(ArchConfig config);

  const ArchConfig& config() const { return config_; }
  const std::vector<GraphNode>& nodes() const { return nodes_; }
  std::int64_t count_nodes(NodeKind kind) const;
  // (encoder level, decoder level) pairs joined by skip concatenation.
  std::vector<std::pair<std::int64_t, std::int64_t>> skip_connections() const;
  nn::BlockKind bottleneck_kind() const { return config_.bottleneck_kind; }

  std::vector<nn::ParamDecl> declarations() const;
  template <class T>
  nn::ParamStore<T> init_params(std::uint64_t seed) const;

  // Throws std::invalid_argument when H or W is not a multiple of 2^depth or
  // the channel count does not match.
  void check_input(const Shape& in) const;
  // Dry-run over every primitive stage, including the final sigmoid.
  nn::LayerTrace trace(const Shape& in) const;
  Shape output_shape(const Shape& in) const;

  template <class T>
  Var<T> forward_logits(nn::Context<T>& ctx, const Var<T>& x) const;
  template <class T>
  Var<T> forward(nn::Context<T>& ctx, const Var<T>& x) const;

  // Eval-mode probabilities without recording.
  template <class T>
  Tensor<T> predict(nn::ParamStore<T>& store, const Tensor<T>& x) const;

 private:
  ArchConfig config_;
  std::vector<nn::Block> encoders_;
  std::vector<nn::Block> bottleneck_;  // exactly one
  std::vector<nn::UpConvLayer> ups_;   // index l-1 for decoder level l
  std::vector<nn::Block> decoders_;    // index l-1 for decoder level l
  nn::Conv2dLayer head_;
  std::vector<GraphNode> nodes_;
};

}  // namespace plunet
