#include "plunet/arch.hpp"

#include <set>
#include <stdexcept>

namespace plunet {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

std::string level_name(const char* prefix, std::int64_t level) { return prefix + std::to_string(level); }

nn::BlockSpec block_spec(nn::BlockKind kind, std::int64_t in, std::int64_t out) {
  nn::BlockSpec s;
  s.kind = kind;
  s.in_channels = in;
  s.out_channels = out;
  return s;
}

}  // namespace

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::unet: return "unet";
    case Variant::lunet: return "lunet";
    case Variant::punet: return "punet";
    case Variant::plunet: return "plunet";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::unet, Variant::lunet, Variant::punet, Variant::plunet}) {
    if (name == variant_name(v)) return v;
  }
  fail("unknown architecture '" + name + "' (expected unet, lunet, punet or plunet)");
}

ArchConfig ArchConfig::preset(Variant v) {
  ArchConfig c;
  c.variant = v;
  switch (v) {
    case Variant::unet:
      break;
    case Variant::lunet:
      c.encoder_block = c.decoder_block = nn::BlockKind::ls;
      break;
    case Variant::punet:
      c.bottleneck_kind = nn::BlockKind::ps;
      break;
    case Variant::plunet:
      c.depth = 3;
      c.widths = {32, 64, 128};
      c.bottleneck_width = 1024;
      c.encoder_block = c.decoder_block = nn::BlockKind::ls;
      c.bottleneck_kind = nn::BlockKind::ps;
      break;
  }
  return c;
}

void ArchConfig::validate() const {
  if (in_channels < 1 || out_channels < 1) fail("in_channels and out_channels must be positive");
  if (depth < 1) fail("depth must be at least 1, got " + std::to_string(depth));
  if (depth > 16) fail("depth " + std::to_string(depth) + " is unreasonably large");
  if (static_cast<std::int64_t>(widths.size()) != depth) {
    fail("widths has " + std::to_string(widths.size()) + " entries but depth is " + std::to_string(depth));
  }
  if (widths[0] < 1) fail("widths must be positive");
  for (std::size_t i = 1; i < widths.size(); ++i) {
    if (widths[i] != 2 * widths[i - 1]) {
      fail("widths must double at every level: " + std::to_string(widths[i - 1]) + " -> " +
           std::to_string(widths[i]));
    }
  }
  if (bottleneck_width < 1) fail("bottleneck_width must be positive");
  for (auto k : {encoder_block, decoder_block}) {
    if (k != nn::BlockKind::conv_block && k != nn::BlockKind::lg && k != nn::BlockKind::ls) {
      fail(std::string("pathway block must be conv_block, lg or ls, got ") + nn::block_kind_name(k));
    }
  }
  if (bottleneck_kind != nn::BlockKind::conv_block && bottleneck_kind != nn::BlockKind::ps) {
    fail(std::string("bottleneck_kind must be conv_block or ps, got ") + nn::block_kind_name(bottleneck_kind));
  }
  for (std::int64_t l = 0; l < depth; ++l) {
    block_spec(encoder_block, l == 0 ? in_channels : widths[l - 1], widths[l]).validate();
    block_spec(decoder_block, 2 * widths[l], widths[l]).validate();
  }
  block_spec(bottleneck_kind, widths.back(), bottleneck_width).validate();
}

nlohmann::json ArchConfig::to_json() const {
  return nlohmann::json{
      {"variant", variant_name(variant)},
      {"in_channels", in_channels},
      {"out_channels", out_channels},
      {"depth", depth},
      {"widths", widths},
      {"bottleneck_width", bottleneck_width},
      {"block_kind",
       {{"encoder", nn::block_kind_name(encoder_block)}, {"decoder", nn::block_kind_name(decoder_block)}}},
      {"bottleneck_kind", nn::block_kind_name(bottleneck_kind)},
  };
}

ArchConfig ArchConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> keys{"variant",          "in_channels", "out_channels",
                                          "depth",            "widths",      "bottleneck_width",
                                          "block_kind",       "bottleneck_kind"};
  if (!j.is_object()) fail("architecture config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!keys.count(k)) fail("unknown architecture config key '" + k + "'");
  }
  for (const auto& k : keys) {
    if (!j.contains(k)) fail("architecture config is missing '" + k + "'");
  }
  const auto& bk = j.at("block_kind");
  if (!bk.is_object()) fail("block_kind must be an object with 'encoder' and 'decoder'");
  for (const auto& [k, v] : bk.items()) {
    if (k != "encoder" && k != "decoder") fail("unknown block_kind key '" + k + "'");
  }
  ArchConfig c;
  try {
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.in_channels = j.at("in_channels").get<std::int64_t>();
    c.out_channels = j.at("out_channels").get<std::int64_t>();
    c.depth = j.at("depth").get<std::int64_t>();
    c.widths = j.at("widths").get<std::vector<std::int64_t>>();
    c.bottleneck_width = j.at("bottleneck_width").get<std::int64_t>();
    c.encoder_block = nn::parse_block_kind(bk.at("encoder").get<std::string>());
    c.decoder_block = nn::parse_block_kind(bk.at("decoder").get<std::string>());
    c.bottleneck_kind = nn::parse_block_kind(j.at("bottleneck_kind").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed architecture config: ") + e.what());
  }
  c.validate();
  return c;
}

const char* node_kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::input: return "input";
    case NodeKind::block: return "block";
    case NodeKind::pool: return "pool";
    case NodeKind::up: return "up";
    case NodeKind::concat: return "concat";
    case NodeKind::head: return "head";
  }
  return "?";
}

ModelGraph::ModelGraph(ArchConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  const std::int64_t d = c.depth;

  nodes_.push_back({"input", NodeKind::input, 0, {}});
  std::string prev = "input";
  for (std::int64_t l = 1; l <= d; ++l) {
    const std::int64_t in = l == 1 ? c.in_channels : c.widths[l - 2];
    encoders_.emplace_back(block_spec(c.encoder_block, in, c.widths[l - 1]), level_name("enc", l));
    nodes_.push_back({level_name("enc", l), NodeKind::block, l, {prev}});
    nodes_.push_back({level_name("pool", l), NodeKind::pool, l, {level_name("enc", l)}});
    prev = level_name("pool", l);
  }
  bottleneck_.emplace_back(block_spec(c.bottleneck_kind, c.widths.back(), c.bottleneck_width), "bottleneck");
  nodes_.push_back({"bottleneck", NodeKind::block, 0, {prev}});
  prev = "bottleneck";

  ups_.resize(d);
  decoders_.reserve(d);
  for (std::int64_t l = 1; l <= d; ++l) {
    const std::int64_t in = l == d ? c.bottleneck_width : c.widths[l];
    ups_[l - 1] = nn::UpConvLayer{level_name("up", l), ConvSpec::up2x2(in, c.widths[l - 1])};
    decoders_.emplace_back(block_spec(c.decoder_block, 2 * c.widths[l - 1], c.widths[l - 1]),
                           level_name("dec", l));
  }
  for (std::int64_t l = d; l >= 1; --l) {
    nodes_.push_back({level_name("up", l), NodeKind::up, l, {prev}});
    nodes_.push_back({level_name("cat", l), NodeKind::concat, l, {level_name("enc", l), level_name("up", l)}});
    nodes_.push_back({level_name("dec", l), NodeKind::block, l, {level_name("cat", l)}});
    prev = level_name("dec", l);
  }
  head_ = nn::Conv2dLayer{"head", ConvSpec::pointwise(c.widths[0], c.out_channels)};
  nodes_.push_back({"head", NodeKind::head, 0, {prev}});

  // Every parameter name is unique.
  std::set<std::string> seen;
  for (const auto& decl : declarations()) {
    if (!seen.insert(decl.name).second) fail("duplicate parameter name '" + decl.name + "'");
  }
  // Skip concatenations join equal extents; channel bookkeeping holds.
  const std::int64_t m = c.required_multiple();
  const Shape probe{1, c.in_channels, m, m};
  const auto rows = trace(probe);
  for (std::int64_t l = 1; l <= d; ++l) {
    const std::string cat = level_name("cat", l);
    for (const auto& r : rows) {
      if (r.name == cat && r.output.c != 2 * c.widths[l - 1]) fail("channel bookkeeping failed at " + cat);
    }
  }
}

std::int64_t ModelGraph::count_nodes(NodeKind kind) const {
  std::int64_t n = 0;
  for (const auto& node : nodes_) n += node.kind == kind;
  return n;
}

std::vector<std::pair<std::int64_t, std::int64_t>> ModelGraph::skip_connections() const {
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  for (const auto& node : nodes_) {
    if (node.kind != NodeKind::concat) continue;
    const std::int64_t enc = std::stoll(node.inputs.at(0).substr(3));
    out.emplace_back(enc, node.level);
  }
  return out;
}

std::vector<nn::ParamDecl> ModelGraph::declarations() const {
  std::vector<nn::ParamDecl> decls;
  for (const auto& b : encoders_) b.declare(decls);
  bottleneck_[0].declare(decls);
  for (std::int64_t l = config_.depth; l >= 1; --l) {
    ups_[l - 1].declare(decls);
    decoders_[l - 1].declare(decls);
  }
  head_.declare(decls);
  return decls;
}

template <class T>
nn::ParamStore<T> ModelGraph::init_params(std::uint64_t seed) const {
  return nn::init_from_decls<T>(declarations(), seed);
}

void ModelGraph::check_input(const Shape& in) const {
  if (!in.valid()) fail("input dims " + in.str() + " must all be positive");
  if (in.c != config_.in_channels) {
    fail("model expects " + std::to_string(config_.in_channels) + " input channels, got " + std::to_string(in.c));
  }
  const std::int64_t m = config_.required_multiple();
  if (in.h % m != 0 || in.w % m != 0) {
    fail("input height and width must be multiples of " + std::to_string(m) + " (2^" +
         std::to_string(config_.depth) + " for depth " + std::to_string(config_.depth) + "), got " +
         std::to_string(in.h) + "x" + std::to_string(in.w));
  }
}

nn::LayerTrace ModelGraph::trace(const Shape& in) const {
  check_input(in);
  nn::LayerTrace rows;
  Shape s = in;
  std::vector<Shape> skips;
  for (std::size_t i = 0; i < encoders_.size(); ++i) {
    s = encoders_[i].trace(s, rows);
    skips.push_back(s);
    nn::LayerInfo pool;
    pool.name = level_name("pool", static_cast<std::int64_t>(i + 1));
    pool.kind = nn::LayerKind::maxpool;
    pool.input = s;
    pool.output = Shape{s.n, s.c, s.h / 2, s.w / 2};
    rows.push_back(pool);
    s = pool.output;
  }
  s = bottleneck_[0].trace(s, rows);
  for (std::int64_t l = config_.depth; l >= 1; --l) {
    s = ups_[l - 1].trace(s, rows);
    const Shape& skip = skips[l - 1];
    if (skip.h != s.h || skip.w != s.w) {
      fail("skip connection at level " + std::to_string(l) + " joins " + skip.str() + " with " + s.str());
    }
    nn::LayerInfo cat;
    cat.name = level_name("cat", l);
    cat.kind = nn::LayerKind::concat;
    cat.input = skip;
    cat.output = Shape{s.n, skip.c + s.c, s.h, s.w};
    rows.push_back(cat);
    s = decoders_[l - 1].trace(cat.output, rows);
  }
  s = head_.trace(s, rows);
  nn::LayerInfo sig;
  sig.name = "head.sigmoid";
  sig.kind = nn::LayerKind::sigmoid;
  sig.input = s;
  sig.output = s;
  rows.push_back(sig);
  return rows;
}

Shape ModelGraph::output_shape(const Shape& in) const { return trace(in).back().output; }

template <class T>
Var<T> ModelGraph::forward_logits(nn::Context<T>& ctx, const Var<T>& x) const {
  check_input(x.shape());
  Var<T> h = x;
  std::vector<Var<T>> skips;
  skips.reserve(encoders_.size());
  for (const auto& enc : encoders_) {
    h = enc.forward(ctx, h);
    skips.push_back(h);
    h = ad::maxpool2d(ctx.tape, h);
  }
  h = bottleneck_[0].forward(ctx, h);
  for (std::int64_t l = config_.depth; l >= 1; --l) {
    const Var<T> up = ups_[l - 1].forward(ctx, h);
    const Var<T> parts[2] = {skips[l - 1], up};
    h = decoders_[l - 1].forward(ctx, ad::concat_channels<T>(ctx.tape, parts));
  }
  return head_.forward(ctx, h);
}

template <class T>
Var<T> ModelGraph::forward(nn::Context<T>& ctx, const Var<T>& x) const {
  return ad::sigmoid(ctx.tape, forward_logits(ctx, x));
}

template <class T>
Tensor<T> ModelGraph::predict(nn::ParamStore<T>& store, const Tensor<T>& x) const {
  GradTape<T> tape(false);
  nn::Context<T> ctx{tape, store, nn::Mode::eval};
  return forward(ctx, tape.constant(x)).value();
}

#define PLUNET_INSTANTIATE_ARCH(T)                                                       \
  template nn::ParamStore<T> ModelGraph::init_params(std::uint64_t) const;               \
  template Var<T> ModelGraph::forward_logits(nn::Context<T>&, const Var<T>&) const;      \
  template Var<T> ModelGraph::forward(nn::Context<T>&, const Var<T>&) const;             \
  template Tensor<T> ModelGraph::predict(nn::ParamStore<T>&, const Tensor<T>&) const;

PLUNET_INSTANTIATE_ARCH(float)
PLUNET_INSTANTIATE_ARCH(double)

#undef PLUNET_INSTANTIATE_ARCH

}  // namespace plunet
