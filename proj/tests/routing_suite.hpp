#pragma once
// Randomized routing property checks shared by the unit tests and the acceptance
// runner. Each check returns the number of instances examined and the first failure.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "rescaps/routing.hpp"

namespace routing_suite {

using namespace rescaps;

struct Outcome {
  int instances = 0;
  int failures = 0;
  double worst = 0;  // largest deviation observed, meaning depends on the check
  std::string first_failure;

  bool passed() const { return failures == 0; }
  void fail(int instance, const std::string& what) {
    if (failures++ == 0) first_failure = "instance " + std::to_string(instance) + ": " + what;
  }
};

/// A random routing problem with B x I x J x d votes.
struct Instance {
  Index batch, children, parents, dim;
  int iterations;
  Tensor<double> votes, child_poses, child_acts, bias, beta_a, beta_u;
};

struct Limits {
  Index max_batch = 3, max_children = 6, min_parents = 2, max_parents = 5, max_dim = 6;
  int max_iterations = 3;
};

inline Instance random_instance(std::mt19937_64& rng, const Limits& lim = {}) {
  auto pick = [&](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };
  Instance x;
  x.batch = pick(1, lim.max_batch);
  x.children = pick(1, lim.max_children);
  x.parents = pick(lim.min_parents, lim.max_parents);
  x.dim = pick(1, lim.max_dim);
  x.iterations = static_cast<int>(pick(1, lim.max_iterations));
  // Vote magnitudes span several decades so both squash regimes are exercised.
  const double scale = std::pow(10.0, std::uniform_real_distribution<double>(-1.5, 1.5)(rng));
  x.votes = oracle::random_tensor({x.batch, x.children, x.parents, x.dim}, rng, -scale, scale);
  x.child_poses = oracle::random_tensor({x.batch, x.children, x.dim}, rng, -1, 1);
  x.child_acts = oracle::random_tensor({x.batch, x.children}, rng, 0.01, 0.99);
  x.bias = oracle::random_tensor({x.parents, x.dim}, rng, -0.2, 0.2);
  x.beta_a = oracle::random_tensor({x.parents}, rng, -1, 1);
  x.beta_u = oracle::random_tensor({x.parents}, rng, -1, 1);
  return x;
}

struct Routed {
  Tensor<double> poses, activations;
  RoutingTrace<double> trace;
};

inline Routed run(RoutingAlgorithm algo, const Instance& x, bool traced = true) {
  Tape<double> tape;
  const Var<double> votes = tape.constant(x.votes);
  const CapsuleTensor<double> child{tape.constant(x.child_poses), tape.constant(x.child_acts)};
  Routed out;
  RoutingTrace<double>* tr = traced ? &out.trace : nullptr;
  CapsuleTensor<double> r;
  switch (algo) {
    case RoutingAlgorithm::rba:
      r = rba_route(votes, tape.constant(x.bias), x.iterations, tr);
      break;
    case RoutingAlgorithm::sda:
      r = sda_route(child, votes, tape.constant(x.bias), x.iterations, tr);
      break;
    case RoutingAlgorithm::em: {
      EmParams<double> p{tape.constant(x.beta_a), tape.constant(x.beta_u), tape.constant(x.bias),
                         {}, kEmVarianceFloor};
      r = em_route(child, votes, p, x.iterations, tr);
      break;
    }
  }
  out.poses = r.poses.value();
  out.activations = r.activations.value();
  return out;
}

/// Largest |sum_j c_ij - 1| over a B x I x J tensor.
inline double row_sum_error(const Tensor<double>& c) {
  double worst = 0;
  for (Index b = 0; b < c.dim(0); ++b)
    for (Index i = 0; i < c.dim(1); ++i) {
      double s = 0;
      for (Index j = 0; j < c.dim(2); ++j) s += c(b, i, j);
      worst = std::max(worst, std::abs(s - 1.0));
    }
  return worst;
}

inline Outcome coupling_normalization(int n, std::uint64_t seed, double tol = 1e-5) {
  std::mt19937_64 rng(seed);
  Outcome o;
  for (int k = 0; k < n; ++k) {
    const Instance x = random_instance(rng);
    for (auto algo : {RoutingAlgorithm::rba, RoutingAlgorithm::sda, RoutingAlgorithm::em}) {
      const Routed r = run(algo, x);
      const auto& rows =
          algo == RoutingAlgorithm::em ? r.trace.responsibilities : r.trace.couplings;
      for (const auto& c : rows) {
        const double e = row_sum_error(c);
        o.worst = std::max(o.worst, e);
        if (e > tol) o.fail(k, to_string(algo) + " row sum off by " + std::to_string(e));
      }
    }
    ++o.instances;
  }
  return o;
}

inline double vector_norm(const Tensor<double>& poses, Index b, Index j) {
  double q = 0;
  for (Index h = 0; h < poses.dim(2); ++h) q += poses(b, j, h) * poses(b, j, h);
  return std::sqrt(q);
}

/// RBA/SDA parent poses have norm < 1 and activations equal to the stabilized
/// pose norm sqrt(|v|^2 + eps), capped at 1.
inline Outcome squash_bound(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Outcome o;
  for (int k = 0; k < n; ++k) {
    Instance x = random_instance(rng);
    x.votes.array() *= std::pow(10.0, std::uniform_real_distribution<double>(-2, 3)(rng));
    for (auto algo : {RoutingAlgorithm::rba, RoutingAlgorithm::sda}) {
      const Routed r = run(algo, x, false);
      for (Index b = 0; b < x.batch; ++b)
        for (Index j = 0; j < x.parents; ++j) {
          const double len = vector_norm(r.poses, b, j);
          const double act = r.activations(b, j);
          const double stable = std::min(1.0, std::sqrt(len * len + kNormEpsilon));
          o.worst = std::max(o.worst, len);
          if (!(len < 1.0)) o.fail(k, to_string(algo) + " pose norm " + std::to_string(len));
          if (act < 0.0 || act > 1.0 || std::abs(act - stable) > 1e-6)
            o.fail(k, to_string(algo) + " activation " + std::to_string(act) +
                          " vs norm " + std::to_string(len));
        }
    }
    ++o.instances;
  }
  return o;
}

/// Capped votes are parallel to the raw vote and no longer than min(a_i, |u|).
inline Outcome sda_capping(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Outcome o;
  for (int k = 0; k < n; ++k) {
    const Instance x = random_instance(rng);
    Tape<double> tape;
    const Tensor<double> capped =
        sda_cap_votes(tape.constant(x.votes), tape.constant(x.child_acts)).value();
    for (Index b = 0; b < x.batch; ++b)
      for (Index i = 0; i < x.children; ++i)
        for (Index j = 0; j < x.parents; ++j) {
          double raw = 0, cap = 0, dot = 0;
          for (Index h = 0; h < x.dim; ++h) {
            raw += x.votes(b, i, j, h) * x.votes(b, i, j, h);
            cap += capped(b, i, j, h) * capped(b, i, j, h);
            dot += x.votes(b, i, j, h) * capped(b, i, j, h);
          }
          raw = std::sqrt(raw);
          cap = std::sqrt(cap);
          const double bound = std::min(x.child_acts(b, i), raw);
          o.worst = std::max(o.worst, cap - bound);
          if (cap > bound + 1e-6) o.fail(k, "capped norm exceeds bound");
          if (raw > 1e-9 && cap > 1e-12 && dot / (raw * cap) < 1.0 - 1e-9)
            o.fail(k, "capped vote not parallel to raw vote");
        }
    ++o.instances;
  }
  return o;
}

/// t_i < 0 and, for each child, logits strictly decrease as distance grows.
inline Outcome sda_monotonicity(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Outcome o;
  for (int k = 0; k < n; ++k) {
    const Instance x = random_instance(rng);
    const Routed r = run(RoutingAlgorithm::sda, x);
    for (std::size_t it = 0; it < r.trace.logits.size(); ++it) {
      const auto& dist = r.trace.distances[it];
      const auto& logit = r.trace.logits[it];
      const auto& t = r.trace.scales[it];
      for (Index b = 0; b < x.batch; ++b)
        for (Index i = 0; i < x.children; ++i) {
          if (!(t(b, i) < 0)) o.fail(k, "non-negative scale t_i");
          for (Index j = 0; j < x.parents; ++j)
            for (Index l = 0; l < x.parents; ++l)
              if (dist(b, i, j) < dist(b, i, l) && !(logit(b, i, j) > logit(b, i, l)))
                o.fail(k, "logit not strictly decreasing in distance");
        }
    }
    ++o.instances;
  }
  return o;
}

/// sigma^2 >= floor, a_j in (0,1), responsibilities normalized.
inline Outcome em_bounds(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Outcome o;
  for (int k = 0; k < n; ++k) {
    const Instance x = random_instance(rng);
    const Routed r = run(RoutingAlgorithm::em, x);
    for (const auto& var : r.trace.variances) {
      const double lo = var.array().minCoeff();
      if (lo < kEmVarianceFloor) o.fail(k, "variance below floor: " + std::to_string(lo));
    }
    for (std::size_t it = 0; it < r.trace.parent_activations.size(); ++it) {
      const auto& a = r.trace.parent_activations[it];
      const auto& z = r.trace.activation_logits[it];
      // a = sigmoid(z) lies strictly inside (0,1) for any finite z; in double
      // precision it only rounds onto the boundary once |z| > 36.
      if (!z.all_finite()) o.fail(k, "non-finite activation logit");
      for (Index m = 0; m < a.size(); ++m) {
        const bool representable = std::abs(z[m]) < 36.0;
        const bool inside = a[m] > 0.0 && a[m] < 1.0;
        const bool closed = a[m] >= 0.0 && a[m] <= 1.0;
        if (representable ? !inside : !closed)
          o.fail(k, "activation " + std::to_string(a[m]) + " outside (0,1)");
      }
    }
    for (const auto& resp : r.trace.responsibilities) {
      const double e = row_sum_error(resp);
      o.worst = std::max(o.worst, e);
      if (e > 1e-5) o.fail(k, "responsibility row sum off by " + std::to_string(e));
    }
    ++o.instances;
  }
  return o;
}

/// Permuting parents in the inputs permutes the outputs identically.
inline Outcome permutation_equivariance(int n, std::uint64_t seed, double tol = 1e-9) {
  std::mt19937_64 rng(seed);
  Outcome o;
  for (int k = 0; k < n; ++k) {
    const Instance x = random_instance(rng);
    std::vector<Index> perm(static_cast<std::size_t>(x.parents));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Instance y = x;
    for (Index j = 0; j < x.parents; ++j) {
      const Index pj = perm[static_cast<std::size_t>(j)];
      y.beta_a[j] = x.beta_a[pj];
      y.beta_u[j] = x.beta_u[pj];
      for (Index h = 0; h < x.dim; ++h) y.bias(j, h) = x.bias(pj, h);
      for (Index b = 0; b < x.batch; ++b)
        for (Index i = 0; i < x.children; ++i)
          for (Index h = 0; h < x.dim; ++h) y.votes(b, i, j, h) = x.votes(b, i, pj, h);
    }
    for (auto algo : {RoutingAlgorithm::rba, RoutingAlgorithm::sda, RoutingAlgorithm::em}) {
      const Routed rx = run(algo, x, false);
      const Routed ry = run(algo, y, false);
      double e = 0;
      for (Index b = 0; b < x.batch; ++b)
        for (Index j = 0; j < x.parents; ++j) {
          const Index pj = perm[static_cast<std::size_t>(j)];
          e = std::max(e, std::abs(ry.activations(b, j) - rx.activations(b, pj)));
          for (Index h = 0; h < x.dim; ++h)
            e = std::max(e, std::abs(ry.poses(b, j, h) - rx.poses(b, pj, h)));
        }
      o.worst = std::max(o.worst, e);
      if (e > tol) o.fail(k, to_string(algo) + " deviation " + std::to_string(e));
    }
    ++o.instances;
  }
  return o;
}

/// With a single iteration RBA never updates its zero logits.
inline Outcome rba_single_iteration_uniform(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Outcome o;
  for (int k = 0; k < n; ++k) {
    Instance x = random_instance(rng);
    x.iterations = 1;
    const Routed r = run(RoutingAlgorithm::rba, x);
    const double want = 1.0 / static_cast<double>(x.parents);
    const double e = (r.trace.couplings.at(0).array() - want).abs().maxCoeff();
    o.worst = std::max(o.worst, e);
    if (e > 1e-12) o.fail(k, "coupling deviates from 1/J by " + std::to_string(e));
    ++o.instances;
  }
  return o;
}

inline oracle::Votes votes_of(const Instance& x, Index b) {
  oracle::Votes u(static_cast<std::size_t>(x.children),
                  std::vector<oracle::Vec>(static_cast<std::size_t>(x.parents),
                                           oracle::Vec(static_cast<std::size_t>(x.dim))));
  for (Index i = 0; i < x.children; ++i)
    for (Index j = 0; j < x.parents; ++j)
      for (Index h = 0; h < x.dim; ++h) u[i][j][h] = x.votes(b, i, j, h);
  return u;
}

inline std::vector<oracle::Vec> rows_of(const Tensor<double>& m) {
  std::vector<oracle::Vec> r(static_cast<std::size_t>(m.dim(0)));
  for (Index j = 0; j < m.dim(0); ++j)
    for (Index h = 0; h < m.dim(1); ++h) r[j].push_back(m(j, h));
  return r;
}

inline oracle::Vec flat(const Tensor<double>& t, Index offset, Index n) {
  return oracle::Vec(t.data() + offset, t.data() + offset + n);
}

/// Library routers against the scalar-loop transcriptions on tiny instances.
inline Outcome oracle_equivalence(RoutingAlgorithm algo, int n, std::uint64_t seed,
                                  double tol = 1e-5) {
  std::mt19937_64 rng(seed);
  Limits lim;
  lim.max_batch = 2;
  lim.max_children = 4;
  lim.max_parents = 3;
  lim.max_dim = 4;
  Outcome o;
  for (int k = 0; k < n; ++k) {
    const Instance x = random_instance(rng, lim);
    const Routed got = run(algo, x, false);
    double e = 0;
    for (Index b = 0; b < x.batch; ++b) {
      const oracle::Votes u = votes_of(x, b);
      const oracle::Vec acts = flat(x.child_acts, b * x.children, x.children);
      oracle::Routed want;
      switch (algo) {
        case RoutingAlgorithm::rba:
          want = oracle::rba(u, rows_of(x.bias), x.iterations);
          break;
        case RoutingAlgorithm::sda:
          want = oracle::sda(acts, u, rows_of(x.bias), x.iterations);
          break;
        case RoutingAlgorithm::em:
          want = oracle::em(acts, u, flat(x.beta_a, 0, x.parents), flat(x.beta_u, 0, x.parents),
                            rows_of(x.bias), x.iterations);
          break;
      }
      for (Index j = 0; j < x.parents; ++j) {
        e = std::max(e, std::abs(got.activations(b, j) - std::min(want.activations[j], 1.0)));
        for (Index h = 0; h < x.dim; ++h)
          e = std::max(e, std::abs(got.poses(b, j, h) - want.poses[j][h]));
      }
    }
    o.worst = std::max(o.worst, e);
    if (e > tol) o.fail(k, "max abs deviation " + std::to_string(e));
    ++o.instances;
  }
  return o;
}

inline std::string describe(const Outcome& o) {
  std::ostringstream s;
  s << o.instances << " instances, worst " << o.worst;
  if (!o.passed()) s << ", " << o.failures << " failures; " << o.first_failure;
  return s.str();
}

}  // namespace routing_suite
