#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rescaps/tensor.hpp"

namespace rescaps {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename S>
struct AdamState {
  std::vector<Tensor<S>> first_moment;
  std::vector<Tensor<S>> second_moment;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update of `params` in place. Gradients are checked
/// for NaN/Inf before anything is modified; a bad gradient throws
/// NumericalError and leaves params and state untouched.
template <typename S>
void adam_step(std::vector<Tensor<S>>& params, const std::vector<Tensor<S>>& grads,
               AdamState<S>& state, const AdamConfig& config = {}) {
  if (grads.size() != params.size())
    throw DimensionError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].shape() != params[k].shape())
      throw DimensionError("adam_step: gradient " + to_string(grads[k].shape()) +
                           " for parameter " + to_string(params[k].shape()));
    if (!grads[k].all_finite())
      throw NumericalError("adam_step: non-finite gradient for parameter " + std::to_string(k));
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.shape());
      state.second_moment.emplace_back(p.shape());
    }
  }
  if (state.first_moment.size() != params.size())
    throw DimensionError("adam_step: optimizer state does not match parameter list");

  ++state.step;
  const double t = static_cast<double>(state.step);
  const S b1 = static_cast<S>(config.beta1), b2 = static_cast<S>(config.beta2);
  const S correction1 = static_cast<S>(1.0 - std::pow(config.beta1, t));
  const S correction2 = static_cast<S>(1.0 - std::pow(config.beta2, t));
  const S lr = static_cast<S>(config.learning_rate);
  const S eps = static_cast<S>(config.epsilon);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = state.first_moment[k].array();
    auto& v = state.second_moment[k].array();
    const auto& g = grads[k].array();
    m = b1 * m + (S(1) - b1) * g;
    v = b2 * v + (S(1) - b2) * g.square();
    params[k].array() -= lr * (m / correction1) / ((v / correction2).sqrt() + eps);
  }
}

}  // namespace rescaps
