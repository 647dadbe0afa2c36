#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "rescaps/checkpoint.hpp"
#include "rescaps/experiment.hpp"
#include "rescaps/gradcheck.hpp"

using namespace rescaps;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kFailed = 1, kUsage = 2, kDiverged = 3, kIo = 4 };

// Missing or unreadable input data is a usage problem, not an output failure.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string dataset = "mnist";
  std::string routing = "rba";
  std::string depth = "3";
  bool skip = false;
  int epochs = 30;
  int batch_size = 128;
  std::uint64_t seed = 1;
  int iterations = 2;
  double learning_rate = 1e-4;
  std::string data_dir;
  std::string out;
  Index train_limit = 0;
  Index test_limit = 0;
  Index micro_batch = 32;
};

void add_model_options(CLI::App* app, CommonOptions& o, bool lists) {
  app->add_option("--dataset", o.dataset, lists ? "Datasets, comma separated" : "mnist, fashion, svhn or norb")
      ->capture_default_str();
  app->add_option("--routing", o.routing, lists ? "Routing algorithms, comma separated" : "rba, sda or em")
      ->capture_default_str();
  app->add_option("--depth", o.depth, lists ? "Depths, e.g. 3-8 or 3,5,9" : "Capsule layers, 3 to 16")
      ->capture_default_str();
  app->add_option("--epochs", o.epochs)->capture_default_str();
  app->add_option("--batch-size", o.batch_size)->capture_default_str();
  app->add_option("--learning-rate", o.learning_rate)->capture_default_str();
  app->add_option("--iterations", o.iterations, "Routing iterations")->capture_default_str();
  app->add_option("--train-limit", o.train_limit, "Use the first N training samples (0 = all)");
  app->add_option("--test-limit", o.test_limit, "Use the first N test samples (0 = all)");
  app->add_option("--micro-batch", o.micro_batch, "Samples per gradient chunk")->capture_default_str();
}

void add_data_options(CLI::App* app, CommonOptions& o) {
  app->add_option("--data-dir", o.data_dir, "Dataset root (default $RESCAPS_DATA_DIR, then ./data)");
  app->add_option("--out", o.out, "Output directory");
}

fs::path data_dir(const CommonOptions& o) {
  if (!o.data_dir.empty()) return o.data_dir;
  if (const char* env = std::getenv("RESCAPS_DATA_DIR"); env && *env) return env;
  return "data";
}

Dataset load_split(const CommonOptions& o, const std::string& name, const std::string& split,
                   Index limit) {
  try {
    return load_dataset(data_dir(o), name, split).head(limit);
  } catch (const IoError& e) {
    throw DataError(std::string("missing dataset: ") + e.what());
  } catch (const ParseError& e) {
    throw DataError(std::string("malformed dataset: ") + e.what());
  }
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  if (out.empty()) throw UsageError("empty list '" + s + "'");
  return out;
}

ModelConfig base_config(const CommonOptions& o) {
  ModelConfig c;
  c.epochs = o.epochs;
  c.batch_size = o.batch_size;
  c.seed = o.seed;
  c.routing_iterations = o.iterations;
  c.learning_rate = o.learning_rate;
  c.use_skip = o.skip;
  return c;
}

ModelConfig single_config(const CommonOptions& o) {
  ModelConfig c = base_config(o);
  c.dataset = o.dataset;
  c.num_classes = dataset_class_count(o.dataset);
  c.arch.channels = dataset_channels(o.dataset);
  c.routing = parse_routing(o.routing);
  std::size_t used = 0;
  try {
    c.depth = std::stoi(o.depth, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != o.depth.size()) throw UsageError("--depth expects an integer");
  c.validate();
  return c;
}

TrainSettings settings(const CommonOptions& o) {
  TrainSettings s;
  s.micro_batch = o.micro_batch;
  s.log = &std::cerr;
  return s;
}

int cmd_train(const CommonOptions& o) {
  const ModelConfig config = single_config(o);
  const Dataset train = load_split(o, config.dataset, "train", o.train_limit);
  const Dataset test = load_split(o, config.dataset, "test", o.test_limit);
  const fs::path out = o.out.empty() ? fs::path("runs") / run_id(config) : fs::path(o.out);

  Model<float> model = build_model<float>(config);
  const RunRecord rec = train_model(model, train, test, settings(o));
  write_file_atomic(out / "record.json", to_json(rec).dump(2) + "\n");
  std::ostringstream metrics;
  metrics << kMetricsHeader << '\n';
  for (const auto& m : rec.epochs)
    metrics << rec.run_id << ',' << config.dataset << ',' << to_string(config.routing) << ','
            << config.depth << ',' << (config.use_skip ? 1 : 0) << ',' << config.seed << ','
            << m.epoch << ',' << format_exact(m.train_loss) << ',' << format_exact(m.test_acc) << '\n';
  write_file_atomic(out / "metrics.csv", metrics.str());
  save_checkpoint(out / "checkpoint", model);

  std::cout << rec.run_id << " status=" << to_string(rec.status)
            << " final_test_acc=" << format_exact(rec.final_test_acc)
            << " best_test_acc=" << format_exact(rec.best_test_acc) << " out=" << out.string()
            << '\n';
  if (rec.status == RunStatus::diverged) {
    std::cerr << "error: training diverged: " << rec.message << '\n';
    return kDiverged;
  }
  return kOk;
}

int cmd_eval(const CommonOptions& o, const std::string& checkpoint, const std::string& split) {
  if (split != "train" && split != "test") throw UsageError("--split must be train or test");
  const Model<float> model = load_checkpoint(checkpoint);
  const std::string& name = model.config().dataset;
  const Dataset data = load_split(o, name, split, split == "train" ? o.train_limit : o.test_limit);
  if (data.num_classes != model.config().num_classes)
    throw UsageError("checkpoint has " + std::to_string(model.config().num_classes) +
                     " classes, dataset " + name + " has " + std::to_string(data.num_classes));
  const double acc = evaluate(model, data);
  std::cout << "accuracy=" << format_exact(acc) << " samples=" << data.size() << '\n';
  return kOk;
}

int cmd_sweep(const CommonOptions& o, const std::string& skip_mode, const std::vector<std::uint64_t>& seeds) {
  SweepSpec spec;
  spec.datasets = split_list(o.dataset);
  spec.routings.clear();
  for (const auto& r : split_list(o.routing)) spec.routings.push_back(parse_routing(r));
  spec.depths = parse_depth_list(o.depth);
  spec.skip = parse_skip_mode(skip_mode);
  if (!seeds.empty()) spec.seeds = seeds;
  spec.base = base_config(o);
  for (const auto& ds : spec.datasets) dataset_class_count(ds);
  spec.validate();

  const fs::path out = o.out.empty() ? fs::path("sweep") : fs::path(o.out);
  const DataProvider provider = [&](const std::string& name) {
    return DataPair{load_split(o, name, "train", o.train_limit),
                    load_split(o, name, "test", o.test_limit)};
  };
  const SweepOutcome r = run_sweep(spec, out, provider, settings(o));
  std::cout << "planned=" << r.planned << " executed=" << r.executed << " resumed=" << r.resumed
            << " diverged=" << r.diverged << " failed=" << r.failed << " out=" << out.string() << '\n';
  if (r.failed > 0) return kUsage;
  if (r.diverged > 0) return kDiverged;
  return kOk;
}

int cmd_gradcheck(const std::string& routing, int depth, bool skip, const GradCheckOptions& opt) {
  std::vector<RoutingAlgorithm> algos;
  if (routing == "all") algos = {RoutingAlgorithm::rba, RoutingAlgorithm::sda, RoutingAlgorithm::em};
  else algos = {parse_routing(routing)};
  bool ok = true;
  for (auto a : algos) {
    const ModelGradCheck r = gradcheck_tiny_model(a, opt, depth, skip);
    std::cout << to_string(a) << " depth " << depth << (skip ? " skip" : "") << ": "
              << (r.passed ? "PASS" : "FAIL") << " max_rel_error=" << std::setprecision(3)
              << r.max_rel_error << " (" << std::fixed << std::setprecision(2) << r.seconds
              << " s)" << std::defaultfloat << '\n';
    for (const auto& g : r.groups)
      std::cout << "  " << std::left << std::setw(36) << g.name << std::right << std::setw(6)
                << g.elements << "  rel " << std::setprecision(3) << g.max_rel_error << "  abs "
                << g.max_abs_error << '\n';
    ok = ok && r.passed;
  }
  return ok ? kOk : kFailed;
}

int cmd_plotdata(const std::string& metrics, const std::string& out) {
  const int files = write_plotdata(metrics, out);
  std::cout << files << " series files written to " << out << '\n';
  return kOk;
}

int cmd_selftest() {
  bool ok = true;
  const auto report = [&](const std::string& name, bool passed) {
    std::cout << (passed ? "PASS " : "FAIL ") << name << '\n';
    ok = ok && passed;
  };
  for (auto a : {RoutingAlgorithm::rba, RoutingAlgorithm::sda, RoutingAlgorithm::em}) {
    const auto r = gradcheck_tiny_model(a);
    report("gradcheck " + to_string(a), r.passed);
  }
  GradCheckOptions flipped;
  flipped.flip_sign = true;
  report("gradcheck detects a flipped gradient", !gradcheck_tiny_model(RoutingAlgorithm::rba, flipped).passed);

  Tensor<float> t({2, 3, 4});
  for (Index k = 0; k < t.size(); ++k) t.data()[k] = static_cast<float>(k) * 0.37f - 1.0f;
  const StoredTensor back = decode_canonical(encode_canonical(t));
  const auto* f = std::get_if<Tensor<float>>(&back);
  report("canonical container round trip",
         f && f->shape() == t.shape() && std::equal(t.data(), t.data() + t.size(), f->data()));

  ModelConfig c;
  bool rejected = false;
  c.depth = 2;
  try {
    c.validate();
  } catch (const UsageError&) {
    rejected = true;
  }
  report("depth 2 rejected", rejected);
  return ok ? kOk : kFailed;
}

// Turns `key=value` lines into `--key=value` arguments placed before the user's
// own flags, so that flags given on the command line take precedence.
std::vector<std::string> config_arguments(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file: " + path.string());
  std::vector<std::string> args;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#' || line[first] == ';') continue;
    const auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError(path.string() + ":" + std::to_string(number) + ": expected key=value");
    std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    const auto trim = [](std::string& s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
    };
    trim(key);
    trim(value);
    if (key == "config") throw UsageError("config files cannot include other config files");
    args.push_back("--" + key + "=" + value);
  }
  return args;
}

std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  for (std::size_t k = 0; k < args.size(); ++k) {
    std::string path;
    std::size_t count = 0;
    if (args[k] == "--config" && k + 1 < args.size()) {
      path = args[k + 1];
      count = 2;
    } else if (args[k].rfind("--config=", 0) == 0) {
      path = args[k].substr(9);
      count = 1;
    }
    if (count == 0) continue;
    args.erase(args.begin() + static_cast<std::ptrdiff_t>(k),
               args.begin() + static_cast<std::ptrdiff_t>(k + count));
    const auto extra = config_arguments(path);
    // After the subcommand name when there is one.
    const std::size_t at = !args.empty() && args[0].rfind("-", 0) != 0 ? 1 : 0;
    args.insert(args.begin() + static_cast<std::ptrdiff_t>(at), extra.begin(), extra.end());
    break;
  }
  std::reverse(args.begin(), args.end());
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep capsule networks: training, sweeps and gradient checks", "rescaps"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::string config_path;
  app.add_option("--config", config_path, "key=value file; keys are long flag names");

  CommonOptions o;

  auto* train = app.add_subcommand("train", "Train one model and write its record and checkpoint");
  add_model_options(train, o, false);
  add_data_options(train, o);
  train->add_option("--seed", o.seed)->capture_default_str();
  train->add_flag("--skip,!--no-skip", o.skip, "Residual connections between capsule layers");

  std::string checkpoint, split = "test";
  auto* eval = app.add_subcommand("eval", "Top-1 accuracy of a checkpoint on a dataset split");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  eval->add_option("--split", split)->capture_default_str();
  eval->add_option("--train-limit", o.train_limit);
  eval->add_option("--test-limit", o.test_limit);
  add_data_options(eval, o);

  std::string skip_mode = "both";
  std::vector<std::uint64_t> seeds;
  auto* sweep = app.add_subcommand("sweep", "Train every combination of the given axes");
  add_model_options(sweep, o, true);
  add_data_options(sweep, o);
  sweep->add_option("--seed", seeds, "Seeds, space or comma separated")->delimiter(',')
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  sweep->add_option("--skip-mode", skip_mode, "on, off or both")->capture_default_str();
  sweep->add_flag_callback("--skip", [&] { skip_mode = "on"; }, "Only runs with skip connections");
  sweep->add_flag_callback("--no-skip", [&] { skip_mode = "off"; }, "Only runs without skip connections");

  std::string gc_routing = "all";
  int gc_depth = 3;
  bool gc_skip = false;
  GradCheckOptions gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check on a tiny 64-bit model");
  gradcheck->add_option("--routing", gc_routing, "rba, sda, em or all")->capture_default_str();
  gradcheck->add_option("--depth", gc_depth)->capture_default_str();
  gradcheck->add_flag("--skip,!--no-skip", gc_skip);
  gradcheck->add_option("--tolerance", gc.tolerance)->capture_default_str();
  gradcheck->add_option("--step", gc.step)->capture_default_str();
  gradcheck->add_flag("--flip-sign", gc.flip_sign, "Negate analytic gradients (must fail)");

  std::string metrics_csv, plot_out = "plots";
  auto* plotdata = app.add_subcommand("plotdata", "Accuracy-vs-depth series from a sweep metrics CSV");
  plotdata->add_option("metrics", metrics_csv, "metrics.csv written by sweep")->required();
  plotdata->add_option("--out", plot_out)->capture_default_str();

  auto* selftest = app.add_subcommand("selftest", "Quick internal consistency checks");

  try {
    std::vector<std::string> args = expand_config(argc, argv);
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o, checkpoint, split);
    if (*sweep) return cmd_sweep(o, skip_mode, seeds);
    if (*gradcheck) return cmd_gradcheck(gc_routing, gc_depth, gc_skip, gc);
    if (*plotdata) return cmd_plotdata(metrics_csv, plot_out);
    if (*selftest) return cmd_selftest();
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDiverged;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailed;
  }
  return kUsage;
}
