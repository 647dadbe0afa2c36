#include "rescaps/losses.hpp"

#include <string>

namespace rescaps {

void LossConfig::validate() const {
  if (!(0 < m_minus && m_minus < m_plus && m_plus < 1))
    throw UsageError("margin loss needs 0 < m- < m+ < 1");
  if (!(lambda_down >= 0)) throw UsageError("margin down-weight must be non-negative");
  if (!(recon_weight >= 0)) throw UsageError("reconstruction weight must be non-negative");
}

template <typename S>
Var<S> margin_loss(const Var<S>& activations, std::span<const int> labels,
                   const LossConfig& config) {
  config.validate();
  if (activations.rank() != 2) throw DimensionError("margin loss expects B x K activations");
  const Index batch = activations.dim(0), classes = activations.dim(1);
  if (static_cast<Index>(labels.size()) != batch)
    throw DimensionError("margin loss: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  if (batch == 0) throw DimensionError("margin loss of an empty batch");
  Tensor<S> present({batch, classes});
  for (Index b = 0; b < batch; ++b) {
    const int label = labels[static_cast<std::size_t>(b)];
    if (label < 0 || label >= classes)
      throw UsageError("label " + std::to_string(label) + " out of range [0, " +
                       std::to_string(classes) + ")");
    present(b, label) = S(1);
  }
  Tensor<S> absent = present;
  absent.array() = S(1) - present.array();

  Tape<S>& tape = activations.tape();
  const Var<S> t = tape.constant(std::move(present));
  const Var<S> not_t = tape.constant(std::move(absent));
  const Var<S> up = square(relu(activations * S(-1) + static_cast<S>(config.m_plus)));
  const Var<S> down = square(relu(activations + static_cast<S>(-config.m_minus)));
  const Var<S> per_class = t * up + not_t * down * static_cast<S>(config.lambda_down);
  return sum_all(per_class) * (S(1) / static_cast<S>(batch));
}

template <typename S>
Var<S> reconstruction_loss(const Var<S>& reconstruction, const Tensor<S>& target) {
  if (reconstruction.shape() != target.shape())
    throw DimensionError("reconstruction " + to_string(reconstruction.shape()) +
                         " vs target " + to_string(target.shape()));
  if (reconstruction.rank() < 1 || reconstruction.dim(0) == 0)
    throw DimensionError("reconstruction loss of an empty batch");
  const Index batch = reconstruction.dim(0);
  const Var<S> diff = reconstruction - reconstruction.tape().constant(target);
  return sum_all(square(diff)) * (S(1) / static_cast<S>(batch));
}

template <typename S>
Var<S> total_loss(const Var<S>& activations, std::span<const int> labels,
                  const Var<S>& reconstruction, const Tensor<S>& target,
                  const LossConfig& config) {
  return margin_loss(activations, labels, config) +
         reconstruction_loss(reconstruction, target) * static_cast<S>(config.recon_weight);
}

#define RESCAPS_INSTANTIATE(S)                                                              \
  template Var<S> margin_loss(const Var<S>&, std::span<const int>, const LossConfig&);      \
  template Var<S> reconstruction_loss(const Var<S>&, const Tensor<S>&);                     \
  template Var<S> total_loss(const Var<S>&, std::span<const int>, const Var<S>&,            \
                             const Tensor<S>&, const LossConfig&);

RESCAPS_INSTANTIATE(float)
RESCAPS_INSTANTIATE(double)

#undef RESCAPS_INSTANTIATE

}  // namespace rescaps
