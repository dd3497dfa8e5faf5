#include "plunet/analysis.hpp"

#include <cstdio>
#include <stdexcept>
#include <ostream>

namespace plunet::analysis {

std::int64_t layer_params(const nn::LayerInfo& layer) {
  switch (layer.kind) {
    case nn::LayerKind::conv:
      return layer.conv.weight_count() + (layer.conv.bias ? layer.conv.out_channels : 0);
    case nn::LayerKind::conv_transpose:
      return layer.conv.in_channels * layer.conv.out_channels * layer.conv.kernel[0] * layer.conv.kernel[1] +
             (layer.conv.bias ? layer.conv.out_channels : 0);
    case nn::LayerKind::batchnorm: return 2 * layer.features;
    case nn::LayerKind::linear: return layer.features * layer.out_features + layer.out_features;
    default: return 0;
  }
}

std::int64_t layer_flops(const nn::LayerInfo& layer) {
  const Shape& in = layer.input;
  const Shape& out = layer.output;
  switch (layer.kind) {
    case nn::LayerKind::conv: {
      const auto& c = layer.conv;
      return 2 * out.numel() * (c.in_channels / c.groups) * c.kernel[0] * c.kernel[1];
    }
    case nn::LayerKind::conv_transpose: {
      const auto& c = layer.conv;
      return 2 * in.numel() * c.out_channels * c.kernel[0] * c.kernel[1];
    }
    case nn::LayerKind::linear: return 2 * in.n * layer.features * layer.out_features;
    case nn::LayerKind::maxpool:
    case nn::LayerKind::global_avg_pool: return in.numel();
    case nn::LayerKind::concat: return 0;
    case nn::LayerKind::batchnorm:
    case nn::LayerKind::relu:
    case nn::LayerKind::sigmoid:
    case nn::LayerKind::scale_channels: return out.numel();
  }
  return 0;
}

CostReport cost_report(const ModelGraph& model, const Shape& input) {
  CostReport r;
  r.input = input;
  for (const auto& layer : model.trace(input)) {
    CostRow row{layer.name, layer.kind, layer_params(layer), layer_flops(layer)};
    r.total_params += row.params;
    r.total_flops += row.flops;
    r.rows.push_back(std::move(row));
  }
  return r;
}

std::int64_t count_params(const ModelGraph& model) {
  const std::int64_t m = model.config().required_multiple();
  return cost_report(model, Shape{1, model.config().in_channels, m, m}).total_params;
}

std::int64_t count_flops(const ModelGraph& model, const Shape& input) {
  return cost_report(model, input).total_flops;
}

nlohmann::json CostReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& row : rows) {
    rows_json.push_back({{"name", row.name}, {"params", row.params}, {"flops", row.flops}});
  }
  return {
      {"input_dims", {input.n, input.c, input.h, input.w}},
      {"convention", kFlopConvention},
      {"rows", rows_json},
      {"totals", {{"params", total_params}, {"flops", total_flops}}},
  };
}

void CostReport::print_table(std::ostream& os) const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-40s %-16s %14s %18s\n", "layer", "kind", "params", "flops");
  os << buf;
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof buf, "%-40s %-16s %14lld %18lld\n", row.name.c_str(), nn::layer_kind_name(row.kind),
                  static_cast<long long>(row.params), static_cast<long long>(row.flops));
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%-40s %-16s %14lld %18lld\n", "total", "", static_cast<long long>(total_params),
                static_cast<long long>(total_flops));
  os << buf;
  std::snprintf(buf, sizeof buf, "input %s: %.2fM params, %.2fG FLOPs (%s)\n", input.str().c_str(),
                static_cast<double>(total_params) / 1e6, static_cast<double>(total_flops) / 1e9, kFlopConvention);
  os << buf;
}

PsAsppComparison compare_ps_vs_aspp(std::int64_t in_channels, std::int64_t out_channels) {
  if (in_channels < 1 || out_channels < 1) throw std::invalid_argument("channel counts must be positive");
  PsAsppComparison c;
  c.in_channels = in_channels;
  c.out_channels = out_channels;

  // PS: walk the real module and drop its SE stages.
  nn::LayerTrace ps_rows;
  nn::PSModule("m", in_channels, out_channels, 1, {1, 6, 12, 18}).trace(Shape{1, in_channels, 1, 1}, ps_rows);
  for (const auto& row : ps_rows) {
    if (row.name.rfind("m.se.", 0) == 0) continue;
    c.ps_params += layer_params(row);
  }

  // ASPP with ordinary convs in the same topology, built stage by stage.
  nn::LayerTrace aspp_rows;
  const Shape probe{1, in_channels, 1, 1};
  for (std::int64_t d : {1, 6, 12, 18}) {
    const std::string b = "aspp.branch_d" + std::to_string(d);
    nn::Conv2dLayer{b, ConvSpec::same(in_channels, out_channels, 3, d)}.trace(probe, aspp_rows);
    nn::BatchNormLayer{b + "_bn", out_channels}.trace(Shape{1, out_channels, 1, 1}, aspp_rows);
  }
  nn::Conv2dLayer{"aspp.fuse", ConvSpec::pointwise(4 * out_channels, out_channels)}.trace(
      Shape{1, 4 * out_channels, 1, 1}, aspp_rows);
  nn::BatchNormLayer{"aspp.fuse_bn", out_channels}.trace(Shape{1, out_channels, 1, 1}, aspp_rows);
  for (const auto& row : aspp_rows) c.aspp_params += layer_params(row);

  c.ratio = static_cast<double>(c.aspp_params) / static_cast<double>(c.ps_params);
  const double dense = 9.0 * static_cast<double>(in_channels) * static_cast<double>(out_channels);
  const double separable = 9.0 * static_cast<double>(in_channels) +
                           static_cast<double>(in_channels) * static_cast<double>(out_channels);
  c.branch_ratio = dense / separable;
  return c;
}

}  // namespace plunet::analysis
