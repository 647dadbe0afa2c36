#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "rescaps/train.hpp"

namespace rescaps {

nlohmann::json to_json(const RunRecord& record);

/// Writes `content` to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

/// Shortest decimal form that parses back to the same double.
std::string format_exact(double value);

enum class SkipMode { on, off, both };

std::string to_string(SkipMode mode);
SkipMode parse_skip_mode(const std::string& name);

struct SweepSpec {
  std::vector<std::string> datasets = {"mnist"};
  std::vector<RoutingAlgorithm> routings = {RoutingAlgorithm::rba};
  std::vector<int> depths = {3, 4, 5, 6, 7, 8};
  SkipMode skip = SkipMode::both;
  std::vector<std::uint64_t> seeds = {1};
  /// Template for every run: epochs, batch size, optimizer and architecture.
  ModelConfig base;

  void validate() const;
  /// Cartesian product in dataset, routing, skip, depth, seed order.
  std::vector<ModelConfig> runs() const;
};

/// Parses "3-8", "3,5,7" or combinations such as "3-5,9".
std::vector<int> parse_depth_list(const std::string& text);

struct DataPair {
  Dataset train;
  Dataset test;
};

using DataProvider = std::function<DataPair(const std::string& dataset)>;

struct SweepOutcome {
  int planned = 0;
  int executed = 0;
  int resumed = 0;   // skipped because runs.csv already lists them
  int diverged = 0;
  int failed = 0;
};

inline constexpr const char* kMetricsHeader =
    "run_id,dataset,routing,depth,skip,seed,epoch,train_loss,test_acc";

/// Runs every configuration of `spec` sequentially. Output directory layout:
///   metrics.csv       one row per (run, epoch), appended per finished run
///   runs.csv          one row per run with its status
///   summary.csv       mean final accuracy per (dataset, routing, skip) x depth
///   records/<id>.json full RunRecord
/// Runs already listed as ok or diverged in runs.csv are skipped. A run that
/// throws is recorded as failed and the sweep continues.
SweepOutcome run_sweep(const SweepSpec& spec, const std::filesystem::path& out,
                       const DataProvider& data, const TrainSettings& settings = {});

/// Rebuilds summary.csv from runs.csv for the depths and rows of `spec`.
void write_summary(const SweepSpec& spec, const std::filesystem::path& out);

/// Reads a metrics CSV and writes one `<dataset>_<routing>.csv` per group
/// (header series,depth,test_acc; series skip and noskip; depth ascending)
/// plus series_index.csv listing them. Values are the final-epoch accuracy
/// averaged over seeds. Returns the number of series files written.
int write_plotdata(const std::filesystem::path& metrics_csv, const std::filesystem::path& out);

}  // namespace rescaps
