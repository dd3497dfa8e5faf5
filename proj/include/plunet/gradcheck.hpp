#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "plunet/tensor.hpp"

namespace plunet::gradcheck {

inline constexpr double kStep = 1e-5;
inline constexpr double kTolerance = 1e-5;
// Denominator floor of the relative error, so that entries whose true
// gradient is (near) zero are compared absolutely.
inline constexpr double kFloor = 1e-3;

struct Result {
  std::string target;
  double max_rel_error = 0;
  std::int64_t checked = 0;  // number of perturbed scalars
  bool passed = false;
};

// A differentiable scalar function of named tensors.
struct Problem {
  std::vector<std::pair<std::string, Tensor<double>*>> leaves;
  std::function<double()> loss;
  std::function<std::map<std::string, Tensor<double>>()> grads;
};

// Compares analytic gradients against central differences for every scalar
// of every leaf.
Result check(const std::string& target, const Problem& problem, double step = kStep,
             double tolerance = kTolerance);

// Names accepted by run(): primitive ops first, then composite blocks.
const std::vector<std::string>& op_targets();
const std::vector<std::string>& block_targets();
std::vector<std::string> all_targets();

// Throws std::invalid_argument for an unknown target.
Result run(const std::string& target, std::uint64_t seed);

}  // namespace plunet::gradcheck
