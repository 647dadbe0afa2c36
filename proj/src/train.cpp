#include "rescaps/train.hpp"

#include <algorithm>
#include <chrono>
#include <ostream>

#include "rescaps/adam.hpp"

namespace rescaps {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

void check_compatible(const Model<float>& model, const Dataset& data) {
  const ModelConfig& c = model.config();
  if (data.size() == 0) throw UsageError(data.name + " " + data.split + " split is empty");
  if (data.num_classes != c.num_classes)
    throw UsageError("model has " + std::to_string(c.num_classes) + " classes, dataset " +
                     data.name + " has " + std::to_string(data.num_classes));
  if (data.channels() != c.arch.channels)
    throw UsageError("model expects " + std::to_string(c.arch.channels) +
                     " channels, dataset has " + std::to_string(data.channels()));
  if (data.height() < c.arch.image_size || data.width() < c.arch.image_size)
    throw UsageError("dataset images are smaller than the model input");
}

Tensor<float> rows(const Tensor<float>& t, Index begin, Index end) {
  Shape s = t.shape();
  const Index per = t.size() / s[0];
  s[0] = end - begin;
  Tensor<float> out(s);
  std::copy_n(t.data() + begin * per, (end - begin) * per, out.data());
  return out;
}

}  // namespace

std::string to_string(RunStatus s) { return s == RunStatus::ok ? "ok" : "diverged"; }

std::string run_id(const ModelConfig& c) {
  return c.dataset + "-" + to_string(c.routing) + "-d" + std::to_string(c.depth) + "-" +
         (c.use_skip ? "skip" : "noskip") + "-s" + std::to_string(c.seed);
}

double evaluate(const Model<float>& model, const Dataset& data, Index batch_size) {
  check_compatible(model, data);
  const auto batches = epoch_batches(data.size(), std::max<Index>(batch_size, 1), 0, 0, false);
  Index correct = 0;
  for (const auto& idx : batches) {
    const Batch b = make_eval_batch(data, idx, model.config().arch.image_size);
    Tape<float> tape;
    const auto out = model.forward(tape, model.bind(tape, false), b.images, std::nullopt);
    const auto pred = predict(out.class_caps.activations.value());
    for (std::size_t k = 0; k < pred.size(); ++k) correct += pred[k] == b.labels[k];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

RunRecord train_model(Model<float>& model, const Dataset& train, const Dataset& test,
                      const TrainSettings& settings) {
  const ModelConfig& config = model.config();
  config.validate();
  check_compatible(model, train);
  check_compatible(model, test);
  if (settings.micro_batch < 1) throw UsageError("micro-batch size must be positive");

  RunRecord rec;
  rec.run_id = run_id(config);
  rec.config = config;
  rec.train_size = train.size();
  rec.test_size = test.size();
  const auto start = Clock::now();

  LossConfig loss_config;
  loss_config.recon_weight = config.recon_weight;
  AdamConfig adam;
  adam.learning_rate = config.learning_rate;
  AdamState<float> state;
  const AugmentConfig augment = [&] {
    AugmentConfig a = AugmentConfig::for_dataset(train.name);
    a.crop = config.arch.image_size;
    return a;
  }();
  const Index batch_size = config.effective_batch_size();
  auto& params = model.parameters().values;

  try {
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      const auto epoch_start = Clock::now();
      auto aug_rng = derived_rng(config.seed, static_cast<std::uint64_t>(epoch), 1);
      double loss_sum = 0;
      Index correct = 0;
      const auto batches = epoch_batches(train.size(), batch_size, config.seed, epoch);
      for (const auto& idx : batches) {
        const Batch batch = make_train_batch(train, idx, augment, aug_rng);
        const Index n = static_cast<Index>(idx.size());
        std::vector<Tensor<float>> grads;
        for (const auto& p : params) grads.emplace_back(p.shape());
        double batch_loss = 0;
        for (Index lo = 0; lo < n; lo += settings.micro_batch) {
          const Index hi = std::min(n, lo + settings.micro_batch);
          const std::span<const int> labels(batch.labels.data() + lo,
                                            static_cast<std::size_t>(hi - lo));
          Tape<float> tape;
          const auto bound = model.bind(tape, true);
          const auto out = model.forward(tape, bound, rows(batch.images, lo, hi), labels);
          const Var<float> loss = total_loss(out.class_caps.activations, labels,
                                             *out.reconstruction, rows(batch.targets, lo, hi),
                                             loss_config);
          const float share = static_cast<float>(hi - lo) / static_cast<float>(n);
          tape.backward(loss * share);
          batch_loss += static_cast<double>(loss.value().item()) * share;
          for (std::size_t k = 0; k < bound.size(); ++k) grads[k].array() += bound[k].grad().array();
          const auto pred = predict(out.class_caps.activations.value());
          for (std::size_t k = 0; k < pred.size(); ++k) correct += pred[k] == labels[k];
        }
        adam_step(params, grads, state, adam);
        loss_sum += batch_loss * static_cast<double>(n);
      }
      EpochMetrics m;
      m.epoch = epoch + 1;
      m.train_loss = loss_sum / static_cast<double>(train.size());
      m.train_acc = static_cast<double>(correct) / static_cast<double>(train.size());
      m.test_acc = evaluate(model, test, settings.eval_batch);
      m.seconds = seconds_since(epoch_start);
      rec.epochs.push_back(m);
      if (settings.log)
        *settings.log << rec.run_id << " epoch " << m.epoch << "/" << config.epochs
                      << " loss " << m.train_loss << " train_acc " << m.train_acc
                      << " test_acc " << m.test_acc << " (" << m.seconds << " s)" << std::endl;
    }
  } catch (const NumericalError& e) {
    rec.status = RunStatus::diverged;
    rec.message = e.what();
    if (settings.log) *settings.log << rec.run_id << " diverged: " << e.what() << std::endl;
  }

  rec.wall_seconds = seconds_since(start);
  if (!rec.epochs.empty()) {
    rec.final_test_acc = rec.epochs.back().test_acc;
    for (const auto& m : rec.epochs) rec.best_test_acc = std::max(rec.best_test_acc, m.test_acc);
  }
  return rec;
}

}  // namespace rescaps
