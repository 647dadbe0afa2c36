#pragma once

#include <span>

#include "rescaps/autodiff.hpp"

namespace rescaps {

struct LossConfig {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda_down = 0.5;
  double recon_weight = 1e-5;

  void validate() const;
};

/// Mean over the batch of
///   sum_k T_k max(0, m+ - a_k)^2 + lambda (1 - T_k) max(0, a_k - m-)^2.
/// activations B x K; one label per sample.
template <typename S>
Var<S> margin_loss(const Var<S>& activations, std::span<const int> labels,
                   const LossConfig& config = {});

/// Sum of squared pixel differences, averaged over the batch. Both B x P.
template <typename S>
Var<S> reconstruction_loss(const Var<S>& reconstruction, const Tensor<S>& target);

/// margin + recon_weight * reconstruction.
template <typename S>
Var<S> total_loss(const Var<S>& activations, std::span<const int> labels,
                  const Var<S>& reconstruction, const Tensor<S>& target,
                  const LossConfig& config = {});

}  // namespace rescaps
