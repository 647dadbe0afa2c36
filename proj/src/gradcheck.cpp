#include "rescaps/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

#include "rescaps/losses.hpp"

namespace rescaps {

namespace {

double evaluate(const std::vector<Tensor<double>>& inputs, const ScalarFunction& f) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return f(tape, vars).value().item();
}

}  // namespace

std::vector<GroupError> check_gradients(const std::vector<std::string>& names,
                                        const std::vector<Tensor<double>>& inputs,
                                        const ScalarFunction& f,
                                        const GradCheckOptions& options) {
  if (names.size() != inputs.size()) throw UsageError("check_gradients: one name per input");
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t));
    Var<double> loss = f(tape, vars);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(v.grad());
  }

  std::vector<GroupError> out;
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t g = 0; g < inputs.size(); ++g) {
    GroupError err{names[g], inputs[g].size(), 0.0, 0.0};
    for (Index k = 0; k < inputs[g].size(); ++k) {
      const double x = inputs[g][k];
      probe[g][k] = x + options.step;
      const double up = evaluate(probe, f);
      probe[g][k] = x - options.step;
      const double down = evaluate(probe, f);
      probe[g][k] = x;
      const double numeric = (up - down) / (2 * options.step);
      const double a = options.flip_sign ? -analytic[g][k] : analytic[g][k];
      const double abs_err = std::abs(a - numeric);
      const double denom =
          std::max({std::abs(a), std::abs(numeric), options.relative_floor});
      err.max_abs_error = std::max(err.max_abs_error, abs_err);
      err.max_rel_error = std::max(err.max_rel_error, abs_err / denom);
    }
    out.push_back(err);
  }
  return out;
}

ModelGradCheck gradcheck_tiny_model(RoutingAlgorithm routing, const GradCheckOptions& options,
                                    int depth, bool use_skip, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  ModelConfig config;
  config.dataset = "tiny";
  config.num_classes = 2;
  config.depth = depth;
  config.use_skip = use_skip;
  config.routing = routing;
  config.seed = seed;
  config.arch = ArchSpec::tiny();
  const Model<double> model = build_model<double>(config);

  const Index batch = 2;
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.05, 0.95);
  Tensor<double> images({batch, config.arch.image_size, config.arch.image_size,
                         config.arch.channels});
  for (Index k = 0; k < images.size(); ++k) images[k] = normal(rng);
  Tensor<double> target({batch, config.arch.image_pixels()});
  for (Index k = 0; k < target.size(); ++k) target[k] = unit(rng);
  const std::vector<int> labels{0, 1};

  LossConfig loss_config;
  loss_config.recon_weight = config.recon_weight;
  const std::size_t nparams = model.parameters().size();
  ScalarFunction objective = [&](Tape<double>& tape, const std::vector<Var<double>>& vars) {
    const std::vector<Var<double>> params(vars.begin(), vars.begin() + nparams);
    auto out = model.forward(tape, params, images, std::span<const int>(labels));
    return total_loss(out.class_caps.activations, std::span<const int>(labels),
                      *out.reconstruction, target, loss_config);
  };

  ModelGradCheck report;
  report.routing = routing;
  report.groups =
      check_gradients(model.parameters().names, model.parameters().values, objective, options);
  for (const auto& g : report.groups)
    report.max_rel_error = std::max(report.max_rel_error, g.max_rel_error);
  report.passed = report.max_rel_error < options.tolerance;
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace rescaps
