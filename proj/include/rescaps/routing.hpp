#pragma once

#include <string>
#include <vector>

#include "rescaps/autodiff.hpp"

namespace rescaps {

enum class RoutingAlgorithm { rba, sda, em };

std::string to_string(RoutingAlgorithm algo);
/// Accepts "rba", "sda", "em"; throws UsageError otherwise.
RoutingAlgorithm parse_routing(const std::string& name);

/// Output of a capsule layer: poses B x N x d and activations B x N.
template <typename S>
struct CapsuleTensor {
  Var<S> poses;
  Var<S> activations;

  Index batch() const { return poses.dim(0); }
  Index count() const { return poses.dim(1); }
  Index dim() const { return poses.dim(2); }
};

/// Per-iteration inverse temperature lambda_t = initial + step * t.
struct LambdaSchedule {
  double initial = 1.0;
  double step = 1.0;

  double at(int iteration) const { return initial + step * iteration; }
};

inline constexpr double kEmVarianceFloor = 1e-6;

/// Learned EM routing parameters of one layer plus its schedule.
template <typename S>
struct EmParams {
  Var<S> beta_a;     // J
  Var<S> beta_u;     // J
  Var<S> pose_bias;  // J x d, added to the output poses
  LambdaSchedule lambda;
  double variance_floor = kEmVarianceFloor;
};

/// Intermediate routing quantities, copied out for inspection. Tensors are
/// indexed by iteration; shapes drop the trailing singleton axes.
template <typename S>
struct RoutingTrace {
  std::vector<Tensor<S>> couplings;         // c_ij or R_ij used in the iteration, B x I x J
  std::vector<Tensor<S>> logits;            // b_ij after the update, B x I x J
  std::vector<Tensor<S>> distances;         // SDA ||u_hat - v_j||, B x I x J
  std::vector<Tensor<S>> scales;            // SDA t_i, B x I
  std::vector<Tensor<S>> variances;         // EM sigma^2, B x J x d
  std::vector<Tensor<S>> activation_logits; // EM lambda (beta_a - cost), B x J
  std::vector<Tensor<S>> parent_activations;// EM a_j, B x J
  std::vector<Tensor<S>> responsibilities;  // EM R after the E-step, B x I x J
  Tensor<S> capped_votes;                   // SDA, B x I x J x d
};

/// Dynamic routing by agreement with an additive parent bias (J x d) on s_j.
template <typename S>
CapsuleTensor<S> rba_route(const Var<S>& votes, const Var<S>& parent_bias, int iterations,
                           RoutingTrace<S>* trace = nullptr);

/// Numerator of the SDA scale, log(0.9 (J-1)) - log(0.1). Requires J >= 2.
double sda_scale_numerator(Index parents);

/// Limits each vote's length to the child's activation: min(a_i, |u|) * u / |u|.
/// votes B x I x J x d, activations B x I.
template <typename S>
Var<S> sda_cap_votes(const Var<S>& votes, const Var<S>& child_activations);

/// Scaled-distance-agreement routing.
template <typename S>
CapsuleTensor<S> sda_route(const CapsuleTensor<S>& child, const Var<S>& votes,
                           const Var<S>& parent_bias, int iterations,
                           RoutingTrace<S>* trace = nullptr);

/// EM routing over d-dimensional pose vectors with per-dimension diagonal Gaussians.
template <typename S>
CapsuleTensor<S> em_route(const CapsuleTensor<S>& child, const Var<S>& votes,
                          const EmParams<S>& params, int iterations,
                          RoutingTrace<S>* trace = nullptr);

}  // namespace rescaps
