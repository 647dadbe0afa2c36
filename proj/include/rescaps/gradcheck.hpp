#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rescaps/autodiff.hpp"
#include "rescaps/layers.hpp"

namespace rescaps {

struct GradCheckOptions {
  double step = 1e-5;          // central-difference h
  double tolerance = 1e-3;     // max relative error per group
  double relative_floor = 1e-6;// denominator floor for near-zero gradients
  bool flip_sign = false;      // negate analytic gradients (mutation fixture)
};

struct GroupError {
  std::string name;
  Index elements = 0;
  double max_rel_error = 0;
  double max_abs_error = 0;
};

/// Builds a scalar from variables bound on the given tape.
using ScalarFunction =
    std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Compares reverse-mode gradients of `f` at `inputs` with central finite
/// differences, element by element. One GroupError per input tensor.
std::vector<GroupError> check_gradients(const std::vector<std::string>& names,
                                        const std::vector<Tensor<double>>& inputs,
                                        const ScalarFunction& f,
                                        const GradCheckOptions& options = {});

struct ModelGradCheck {
  RoutingAlgorithm routing = RoutingAlgorithm::rba;
  std::vector<GroupError> groups;
  double max_rel_error = 0;
  bool passed = false;
  double seconds = 0;
};

/// Gradient check of the full training objective (margin + reconstruction) on a
/// tiny 64-bit model: 6x6 input, 4 hidden and 2 class capsules.
ModelGradCheck gradcheck_tiny_model(RoutingAlgorithm routing, const GradCheckOptions& options = {},
                                    int depth = 3, bool use_skip = false,
                                    std::uint64_t seed = 7);

}  // namespace rescaps
