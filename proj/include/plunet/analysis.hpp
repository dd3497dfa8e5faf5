#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

#include "plunet/arch.hpp"

namespace plunet::analysis {

inline constexpr const char* kFlopConvention = "2*MACs";

struct CostRow {
  std::string name;
  nn::LayerKind kind = nn::LayerKind::conv;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

struct CostReport {
  Shape input;
  std::vector<CostRow> rows;
  std::int64_t total_params = 0;
  std::int64_t total_flops = 0;

  nlohmann::json to_json() const;
  // Fixed-width per-layer table followed by totals in M / G.
  void print_table(std::ostream& os) const;
};

// Learnable scalars of one stage (BN running statistics excluded).
std::int64_t layer_params(const nn::LayerInfo& layer);
// Convolutions and linear stages: 2 * MACs. Elementwise stages: one per
// output element; pooling: one per input element; concat: none.
std::int64_t layer_flops(const nn::LayerInfo& layer);

CostReport cost_report(const ModelGraph& model, const Shape& input);
std::int64_t count_params(const ModelGraph& model);
std::int64_t count_flops(const ModelGraph& model, const Shape& input);

struct PsAsppComparison {
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  std::int64_t aspp_params = 0;  // ordinary 3x3 branches, same topology
  std::int64_t ps_params = 0;    // depthwise-separable branches
  double ratio = 0;              // aspp_params / ps_params
  double branch_ratio = 0;       // branch conv weights only
};

// Both modules without their SE gate.
PsAsppComparison compare_ps_vs_aspp(std::int64_t in_channels, std::int64_t out_channels);

}  // namespace plunet::analysis
