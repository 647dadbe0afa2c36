#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "rescaps/experiment.hpp"
#include "synthetic.hpp"

using namespace rescaps;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rescaps_test_experiment_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::vector<std::string>> csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    rows.push_back(fields);
  }
  return rows;
}

DataProvider bands_provider(Index side = 8) {
  return [side](const std::string& name) {
    if (name == "broken") return DataPair{synthetic::bands(name, "train", 8, 2, 4, 1),
                                          synthetic::bands(name, "test", 8, 2, 4, 2)};
    return DataPair{synthetic::bands(name, "train", 8, 2, side, 1),
                    synthetic::bands(name, "test", 6, 2, side, 2)};
  };
}

SweepSpec tiny_sweep() {
  SweepSpec s;
  s.base = synthetic::tiny_config(2);
  s.base.batch_size = 4;
  s.datasets = {"mnist"};
  s.routings = {RoutingAlgorithm::rba};
  s.depths = parse_depth_list("3-8");
  s.skip = SkipMode::both;
  return s;
}

}  // namespace

TEST_CASE("format_exact round trips") {
  for (double v : {0.0, 0.1, 1.0 / 3.0, 0.995, 1e-300, 123456.789}) {
    const std::string s = format_exact(v);
    CHECK(std::stod(s) == v);
  }
  CHECK(format_exact(0.5) == "0.5");
}

TEST_CASE("depth list parsing") {
  CHECK(parse_depth_list("3-8") == std::vector<int>{3, 4, 5, 6, 7, 8});
  CHECK(parse_depth_list("3,5,7") == std::vector<int>{3, 5, 7});
  CHECK(parse_depth_list("3-4,9") == std::vector<int>{3, 4, 9});
  CHECK_THROWS_AS(parse_depth_list(""), UsageError);
  CHECK_THROWS_AS(parse_depth_list("8-3"), UsageError);
  CHECK_THROWS_AS(parse_depth_list("a"), UsageError);
}

TEST_CASE("sweep spec product and validation") {
  SweepSpec s = tiny_sweep();
  CHECK(s.runs().size() == 12);
  s.seeds = {1, 2};
  s.routings = {RoutingAlgorithm::rba, RoutingAlgorithm::sda};
  CHECK(s.runs().size() == 48);
  s.skip = SkipMode::on;
  CHECK(s.runs().size() == 24);
  for (const auto& c : s.runs()) CHECK(c.use_skip);
  CHECK(parse_skip_mode("off") == SkipMode::off);
  CHECK_THROWS_AS(parse_skip_mode("yes"), UsageError);

  s.depths = {2, 3};
  CHECK_THROWS_AS(s.validate(), UsageError);
  s.depths = {3, 17};
  CHECK_THROWS_AS(s.validate(), UsageError);
  s.depths = {};
  CHECK_THROWS_AS(s.validate(), UsageError);
  s.depths = {3};
  s.seeds = {};
  CHECK_THROWS_AS(s.validate(), UsageError);
}

TEST_CASE("sweep writes metrics, summary and records, then resumes") {
  const fs::path out = scratch("sweep");
  const SweepSpec spec = tiny_sweep();
  const SweepOutcome first = run_sweep(spec, out, bands_provider());
  CHECK(first.planned == 12);
  CHECK(first.executed == 12);
  CHECK(first.resumed == 0);
  CHECK(first.failed == 0);

  const auto metrics = csv(out / "metrics.csv");
  REQUIRE(metrics.size() == 13);
  CHECK(slurp(out / "metrics.csv").rfind(std::string(kMetricsHeader) + "\n", 0) == 0);
  for (std::size_t k = 1; k < metrics.size(); ++k) CHECK(metrics[k].size() == 9);

  const auto summary = csv(out / "summary.csv");
  REQUIRE(summary.size() == 3);
  CHECK(summary[0] == std::vector<std::string>{"dataset", "routing", "skip", "d3", "d4", "d5",
                                               "d6", "d7", "d8"});
  CHECK(summary[1][2] == "0");
  CHECK(summary[2][2] == "1");
  for (std::size_t r = 1; r < 3; ++r) {
    REQUIRE(summary[r].size() == 9);
    for (std::size_t col = 3; col < 9; ++col) {
      ModelConfig c = spec.base;
      c.depth = spec.depths[col - 3];
      c.use_skip = r == 2;
      c.seed = spec.seeds.front();
      const auto record =
          nlohmann::json::parse(slurp(out / "records" / (run_id(c) + ".json")));
      // The cell parses back to the record's final accuracy exactly.
      CHECK(std::stod(summary[r][col]) == record["final_test_acc"].get<double>());
      CHECK(record["final_test_acc"].get<double>() ==
            record["epochs"].back()["test_acc"].get<double>());
      CHECK(record["status"] == "ok");
    }
  }

  const std::string before = slurp(out / "metrics.csv");
  const SweepOutcome second = run_sweep(spec, out, bands_provider());
  CHECK(second.planned == 12);
  CHECK(second.executed == 0);
  CHECK(second.resumed == 12);
  CHECK(slurp(out / "metrics.csv") == before);

  SweepSpec wider = spec;
  wider.depths = {3, 9};
  const SweepOutcome third = run_sweep(wider, out, bands_provider());
  CHECK(third.resumed == 2);
  CHECK(third.executed == 2);
  CHECK(csv(out / "metrics.csv").size() == 15);
  CHECK(csv(out / "summary.csv")[0].back() == "d9");
  fs::remove_all(out);
}

TEST_CASE("sweep is reproducible byte for byte") {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  SweepSpec spec = tiny_sweep();
  spec.depths = {3, 5};
  spec.base.epochs = 2;
  run_sweep(spec, a, bands_provider());
  run_sweep(spec, b, bands_provider());
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
  CHECK(slurp(a / "summary.csv") == slurp(b / "summary.csv"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("a failing run does not abort the sweep") {
  const fs::path out = scratch("partial");
  SweepSpec spec = tiny_sweep();
  spec.datasets = {"broken", "mnist"};
  spec.depths = {3};
  spec.skip = SkipMode::off;
  const SweepOutcome o = run_sweep(spec, out, bands_provider());
  CHECK(o.failed == 1);
  CHECK(o.executed == 1);
  const auto runs = csv(out / "runs.csv");
  REQUIRE(runs.size() == 3);
  CHECK(runs[1][6] == "failed");
  CHECK(runs[2][6] == "ok");
  const auto summary = csv(out / "summary.csv");
  CHECK(summary[1].back().empty());
  CHECK_FALSE(summary[2].back().empty());

  // Failed runs are retried on resume and their row is replaced.
  const SweepOutcome again = run_sweep(spec, out, bands_provider());
  CHECK(again.failed == 1);
  CHECK(again.resumed == 1);
  CHECK(csv(out / "runs.csv").size() == 3);
  fs::remove_all(out);
}

TEST_CASE("plotdata groups by dataset and routing") {
  const fs::path dir = scratch("plot");
  fs::create_directories(dir);
  std::ostringstream m;
  m << kMetricsHeader << '\n';
  const std::vector<std::string> datasets = {"mnist", "fashion", "svhn", "norb"};
  for (const auto& ds : datasets)
    for (int skip = 0; skip < 2; ++skip)
      for (int depth : {9, 3, 5})
        for (int epoch = 1; epoch <= 2; ++epoch) {
          ModelConfig c;
          c.dataset = ds;
          c.depth = depth;
          c.use_skip = skip == 1;
          // Final epoch accuracy encodes (skip, depth); epoch 1 is a decoy.
          const double acc = epoch == 2 ? 0.5 + 0.01 * depth + 0.1 * skip : 0.0;
          m << run_id(c) << ',' << ds << ",rba," << depth << ',' << skip << ",1," << epoch
            << ",0.3," << format_exact(acc) << '\n';
        }
  write_file_atomic(dir / "metrics.csv", m.str());
  CHECK(write_plotdata(dir / "metrics.csv", dir / "plots") == 4);
  const auto index = csv(dir / "plots" / "series_index.csv");
  CHECK(index.size() == 5);
  for (const auto& ds : datasets) {
    const auto rows = csv(dir / "plots" / (ds + "_rba.csv"));
    REQUIRE(rows.size() == 7);
    CHECK(rows[0] == std::vector<std::string>{"series", "depth", "test_acc"});
    std::map<std::string, std::vector<int>> depths;
    for (std::size_t k = 1; k < rows.size(); ++k) {
      const int d = std::stoi(rows[k][1]);
      depths[rows[k][0]].push_back(d);
      const double expect = 0.5 + 0.01 * d + (rows[k][0] == "skip" ? 0.1 : 0.0);
      CHECK(std::stod(rows[k][2]) == doctest::Approx(expect).epsilon(1e-12));
    }
    REQUIRE(depths.size() == 2);
    for (const auto& [series, ds_depths] : depths) {
      CHECK(ds_depths.size() == 3);
      for (std::size_t k = 1; k < ds_depths.size(); ++k) CHECK(ds_depths[k] > ds_depths[k - 1]);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("plotdata averages seeds") {
  const fs::path dir = scratch("plot_seeds");
  std::string text = std::string(kMetricsHeader) + "\n";
  text += "a-s1,mnist,sda,4,0,1,1,0.2,0.25\n";
  text += "a-s2,mnist,sda,4,0,2,1,0.2,0.75\n";
  write_file_atomic(dir / "metrics.csv", text);
  CHECK(write_plotdata(dir / "metrics.csv", dir) == 1);
  CHECK(slurp(dir / "mnist_sda.csv") == "series,depth,test_acc\nnoskip,4,0.5\n");
  fs::remove_all(dir);
}

TEST_CASE("plotdata empty and malformed input") {
  const fs::path dir = scratch("plot_edge");
  write_file_atomic(dir / "metrics.csv", std::string(kMetricsHeader) + "\n");
  CHECK(write_plotdata(dir / "metrics.csv", dir / "out") == 0);
  CHECK(slurp(dir / "out" / "series_index.csv") == "dataset,routing,file\n");

  write_file_atomic(dir / "bad_header.csv", "run,dataset\n");
  CHECK_THROWS_AS(write_plotdata(dir / "bad_header.csv", dir / "out"), ParseError);
  write_file_atomic(dir / "short.csv", std::string(kMetricsHeader) + "\nx,mnist,rba,3\n");
  CHECK_THROWS_AS(write_plotdata(dir / "short.csv", dir / "out"), ParseError);
  write_file_atomic(dir / "nan.csv", std::string(kMetricsHeader) + "\nx,mnist,rba,3,0,1,1,0.1,abc\n");
  CHECK_THROWS_AS(write_plotdata(dir / "nan.csv", dir / "out"), ParseError);
  CHECK_THROWS_AS(write_plotdata(dir / "missing.csv", dir / "out"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("run record json") {
  RunRecord r;
  r.config = synthetic::tiny_config();
  r.run_id = run_id(r.config);
  r.epochs.push_back({1, 0.5, 0.25, 0.75, 1.0});
  r.final_test_acc = 0.75;
  r.best_test_acc = 0.75;
  const auto j = to_json(r);
  CHECK(j["run_id"] == r.run_id);
  CHECK(j["config"]["depth"] == "3");
  CHECK(j["epochs"].size() == 1);
  CHECK(j["epochs"][0]["test_acc"].get<double>() == 0.75);
  CHECK(j["status"] == "ok");
  CHECK_FALSE(j.contains("message"));
}
