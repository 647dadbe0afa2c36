#include "rescaps/routing.hpp"

#include <cmath>
#include <numbers>

namespace rescaps {

std::string to_string(RoutingAlgorithm algo) {
  switch (algo) {
    case RoutingAlgorithm::rba: return "rba";
    case RoutingAlgorithm::sda: return "sda";
    case RoutingAlgorithm::em: return "em";
  }
  return "?";
}

RoutingAlgorithm parse_routing(const std::string& name) {
  if (name == "rba") return RoutingAlgorithm::rba;
  if (name == "sda") return RoutingAlgorithm::sda;
  if (name == "em") return RoutingAlgorithm::em;
  throw UsageError("unknown routing algorithm '" + name + "' (expected rba, sda or em)");
}

namespace {

// Floor on the EM cluster mass so zero child activations do not divide by zero.
constexpr double kMassFloor = 1e-12;

struct VoteDims {
  Index batch, children, parents, dim;
};

template <typename S>
VoteDims vote_dims(const Var<S>& votes) {
  if (votes.rank() != 4)
    throw DimensionError("votes must be B x I x J x d, got " + to_string(votes.shape()));
  return {votes.dim(0), votes.dim(1), votes.dim(2), votes.dim(3)};
}

void check_iterations(int iterations) {
  if (iterations < 1) throw UsageError("routing needs at least one iteration");
}

template <typename S>
void check_child(const CapsuleTensor<S>& child, const VoteDims& d) {
  const Shape want{d.batch, d.children};
  if (child.activations.shape() != want)
    throw DimensionError("child activations " + to_string(child.activations.shape()) +
                         " do not match votes (expected " + to_string(want) + ")");
}

template <typename S>
Var<S> bias_view(const Var<S>& bias, const VoteDims& d) {
  if (bias.shape() != Shape{d.parents, d.dim})
    throw DimensionError("parent bias " + to_string(bias.shape()) + " expected " +
                         to_string(Shape{d.parents, d.dim}));
  return reshape(bias, {1, 1, d.parents, d.dim});
}

/// Drops the trailing singleton axis for trace storage.
template <typename S>
Tensor<S> squeezed(const Var<S>& v, Shape shape) {
  return v.value().reshaped(std::move(shape));
}

/// Weighted parent pose s_j = sum_i c_ij u_ij + bias, squashed.
template <typename S>
Var<S> agree_and_squash(const Var<S>& couplings, const Var<S>& votes, const Var<S>& bias) {
  Var<S> s = sum(couplings * votes, 1) + bias;
  return squash(s, 3);
}

template <typename S>
CapsuleTensor<S> as_capsules(const Var<S>& v, const VoteDims& d) {
  // The stabilized norm can exceed 1 by ~eps/2 for very long s_j.
  const Var<S> one = v.tape().constant(Tensor<S>::scalar(S(1)));
  return {reshape(v, {d.batch, d.parents, d.dim}),
          reshape(minimum(norm(v, 3), one), {d.batch, d.parents})};
}

}  // namespace

template <typename S>
CapsuleTensor<S> rba_route(const Var<S>& votes, const Var<S>& parent_bias, int iterations,
                           RoutingTrace<S>* trace) {
  check_iterations(iterations);
  const VoteDims d = vote_dims(votes);
  Tape<S>& tape = votes.tape();
  const Var<S> bias = bias_view(parent_bias, d);
  Var<S> logits = tape.constant(Tensor<S>({d.batch, d.children, d.parents, 1}));
  Var<S> v;
  for (int it = 0; it < iterations; ++it) {
    const Var<S> c = softmax(logits, 2);
    v = agree_and_squash(c, votes, bias);
    if (trace) trace->couplings.push_back(squeezed(c, {d.batch, d.children, d.parents}));
    if (it + 1 < iterations) {
      logits = logits + sum(votes * v, 3);
      if (trace) trace->logits.push_back(squeezed(logits, {d.batch, d.children, d.parents}));
    }
  }
  return as_capsules(v, d);
}

double sda_scale_numerator(Index parents) {
  if (parents < 2)
    throw UsageError("scaled-distance routing needs at least two parent capsules, got " +
                     std::to_string(parents));
  return std::log(0.9 * static_cast<double>(parents - 1)) - std::log(1.0 - 0.9);
}

template <typename S>
Var<S> sda_cap_votes(const Var<S>& votes, const Var<S>& child_activations) {
  const VoteDims d = vote_dims(votes);
  if (child_activations.shape() != Shape{d.batch, d.children})
    throw DimensionError("child activations " + to_string(child_activations.shape()) +
                         " do not match votes");
  const Var<S> a = reshape(child_activations, {d.batch, d.children, 1, 1});
  const Var<S> len = norm(votes, 3);
  return votes * (minimum(a, len) / len);
}

template <typename S>
CapsuleTensor<S> sda_route(const CapsuleTensor<S>& child, const Var<S>& votes,
                           const Var<S>& parent_bias, int iterations, RoutingTrace<S>* trace) {
  check_iterations(iterations);
  const VoteDims d = vote_dims(votes);
  check_child(child, d);
  Tape<S>& tape = votes.tape();
  const S scale_num = static_cast<S>(sda_scale_numerator(d.parents));
  const Var<S> bias = bias_view(parent_bias, d);
  const Var<S> capped = sda_cap_votes(votes, child.activations);
  if (trace) trace->capped_votes = capped.value();
  // t_i = K / (-0.5 mean_j dist) = (-2K) / mean_j dist
  const Var<S> minus_two_k = tape.constant(Tensor<S>::scalar(S(-2) * scale_num));

  Var<S> logits = tape.constant(Tensor<S>({d.batch, d.children, d.parents, 1}));
  Var<S> v;
  for (int it = 0; it < iterations; ++it) {
    const Var<S> c = softmax(logits, 2);
    v = agree_and_squash(c, capped, bias);
    if (trace) trace->couplings.push_back(squeezed(c, {d.batch, d.children, d.parents}));
    // The update after the last iteration cannot change v; skip it unless traced.
    if (it + 1 < iterations || trace) {
      const Var<S> dist = norm(capped - v, 3);
      const Var<S> t = minus_two_k / mean(dist, 2);
      logits = dist * t;
      if (trace) {
        trace->distances.push_back(squeezed(dist, {d.batch, d.children, d.parents}));
        trace->scales.push_back(squeezed(t, {d.batch, d.children}));
        trace->logits.push_back(squeezed(logits, {d.batch, d.children, d.parents}));
      }
    }
  }
  return as_capsules(v, d);
}

template <typename S>
CapsuleTensor<S> em_route(const CapsuleTensor<S>& child, const Var<S>& votes,
                          const EmParams<S>& params, int iterations, RoutingTrace<S>* trace) {
  check_iterations(iterations);
  const VoteDims d = vote_dims(votes);
  check_child(child, d);
  if (params.beta_a.shape() != Shape{d.parents} || params.beta_u.shape() != Shape{d.parents})
    throw DimensionError("EM beta parameters must have one entry per parent capsule");
  Tape<S>& tape = votes.tape();

  const Var<S> a_in = reshape(child.activations, {d.batch, d.children, 1, 1});
  const Var<S> beta_a = reshape(params.beta_a, {1, 1, d.parents, 1});
  const Var<S> beta_u = reshape(params.beta_u, {1, 1, d.parents, 1});
  const S half_log_2pi = S(0.5) * std::log(S(2) * std::numbers::pi_v<S>);

  Var<S> resp = tape.constant(
      Tensor<S>({d.batch, d.children, d.parents, 1}, S(1) / static_cast<S>(d.parents)));
  Var<S> mu, z;
  for (int it = 0; it < iterations; ++it) {
    if (trace) trace->couplings.push_back(squeezed(resp, {d.batch, d.children, d.parents}));
    // M-step
    const Var<S> weighted = resp * a_in;
    const Var<S> mass = sum(weighted, 1) + static_cast<S>(kMassFloor);
    mu = sum(weighted * votes, 1) / mass;
    const Var<S> diff = votes - mu;
    const Var<S> sq = square(diff);
    const Var<S> var = sum(weighted * sq, 1) / mass + static_cast<S>(params.variance_floor);
    const Var<S> log_var = log(var);
    const Var<S> cost =
        (beta_u * static_cast<S>(d.dim) + sum(log_var, 3) * S(0.5)) * mass;
    z = (beta_a - cost) * static_cast<S>(params.lambda.at(it));
    if (trace) {
      trace->variances.push_back(squeezed(var, {d.batch, d.parents, d.dim}));
      trace->activation_logits.push_back(squeezed(z, {d.batch, d.parents}));
      trace->parent_activations.push_back(squeezed(sigmoid(z), {d.batch, d.parents}));
    }
    if (it + 1 == iterations) break;
    // E-step
    const Var<S> log_p =
        sum(sq / var * S(-0.5) - log_var * S(0.5), 3) + S(-d.dim) * half_log_2pi;
    resp = softmax(log_sigmoid(z) + log_p, 2);
    if (trace)
      trace->responsibilities.push_back(squeezed(resp, {d.batch, d.children, d.parents}));
  }
  if (params.pose_bias.shape() != Shape{d.parents, d.dim})
    throw DimensionError("EM pose bias " + to_string(params.pose_bias.shape()) + " expected " +
                         to_string(Shape{d.parents, d.dim}));
  const Var<S> poses =
      reshape(mu, {d.batch, d.parents, d.dim}) + reshape(params.pose_bias, {1, d.parents, d.dim});
  return {poses, reshape(sigmoid(z), {d.batch, d.parents})};
}

#define RESCAPS_INSTANTIATE(S)                                                                \
  template CapsuleTensor<S> rba_route(const Var<S>&, const Var<S>&, int, RoutingTrace<S>*);   \
  template Var<S> sda_cap_votes(const Var<S>&, const Var<S>&);                                \
  template CapsuleTensor<S> sda_route(const CapsuleTensor<S>&, const Var<S>&, const Var<S>&,  \
                                      int, RoutingTrace<S>*);                                 \
  template CapsuleTensor<S> em_route(const CapsuleTensor<S>&, const Var<S>&,                  \
                                     const EmParams<S>&, int, RoutingTrace<S>*);

RESCAPS_INSTANTIATE(float)
RESCAPS_INSTANTIATE(double)

#undef RESCAPS_INSTANTIATE

}  // namespace rescaps
