#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "rescaps/data.hpp"
#include "rescaps/layers.hpp"
#include "rescaps/losses.hpp"

namespace rescaps {

struct TrainSettings {
  /// Gradients of a batch are accumulated over chunks of this many samples.
  Index micro_batch = 32;
  Index eval_batch = 100;
  std::ostream* log = nullptr;
};

struct EpochMetrics {
  int epoch = 0;  // 1-based
  double train_loss = 0;
  double train_acc = 0;
  double test_acc = 0;
  double seconds = 0;
};

enum class RunStatus { ok, diverged };

std::string to_string(RunStatus s);

struct RunRecord {
  std::string run_id;
  ModelConfig config;
  Index train_size = 0;
  Index test_size = 0;
  std::vector<EpochMetrics> epochs;
  double wall_seconds = 0;
  double final_test_acc = 0;
  double best_test_acc = 0;
  RunStatus status = RunStatus::ok;
  std::string message;
};

/// "<dataset>-<routing>-d<depth>-<skip|noskip>-s<seed>".
std::string run_id(const ModelConfig& config);

/// Top-1 accuracy on center crops. The decoder is not evaluated.
double evaluate(const Model<float>& model, const Dataset& data, Index batch_size = 100);

/// Trains `model` in place for config.epochs epochs with Adam on margin +
/// weighted reconstruction loss, evaluating on `test` after every epoch. A
/// non-finite loss or gradient stops the run and marks it diverged.
RunRecord train_model(Model<float>& model, const Dataset& train, const Dataset& test,
                      const TrainSettings& settings = {});

}  // namespace rescaps
