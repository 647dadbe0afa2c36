#include "rescaps/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "rescaps/checkpoint.hpp"

namespace rescaps {

namespace fs = std::filesystem;

namespace {

constexpr const char* kRunsHeader =
    "run_id,dataset,routing,depth,skip,seed,status,epochs,final_test_acc,best_test_acc,"
    "wall_seconds,message";

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open", path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string sanitize(std::string s) {
  std::replace_if(s.begin(), s.end(), [](char c) { return c == ',' || c == '\n' || c == '\r'; }, ' ');
  return s;
}

int parse_int_field(const std::string& s, const std::string& what, std::uint64_t at) {
  int v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw ParseError("bad " + what + " '" + s + "'", at);
  return v;
}

double parse_double_field(const std::string& s, const std::string& what, std::uint64_t at) {
  double v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw ParseError("bad " + what + " '" + s + "'", at);
  return v;
}

struct CsvTable {
  std::string header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::uint64_t> offsets;
};

CsvTable read_csv(const fs::path& path, const std::string& expected_header) {
  CsvTable t;
  const std::string text = read_file(path);
  std::stringstream ss(text);
  std::string line;
  std::uint64_t offset = 0;
  const std::size_t width = split(expected_header, ',').size();
  bool first = true;
  while (std::getline(ss, line)) {
    const std::uint64_t at = offset;
    offset += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (first) {
      first = false;
      if (line != expected_header)
        throw ParseError(path.string() + ": expected header '" + expected_header + "'", at);
      t.header = line;
      continue;
    }
    if (line.empty()) continue;
    auto fields = split(line, ',');
    if (fields.size() != width)
      throw ParseError(path.string() + ": expected " + std::to_string(width) + " fields, got " +
                           std::to_string(fields.size()),
                       at);
    t.rows.push_back(std::move(fields));
    t.offsets.push_back(at);
  }
  return t;
}

void append_atomic(const fs::path& path, const std::string& header, const std::string& rows) {
  std::string content = fs::exists(path) ? read_file(path) : header + "\n";
  if (!content.empty() && content.back() != '\n') content += '\n';
  write_file_atomic(path, content + rows);
}

struct RunRow {
  std::string run_id, status;
  double final_test_acc = 0;
  int epochs = 0;
};

std::map<std::string, RunRow> read_runs(const fs::path& path) {
  std::map<std::string, RunRow> out;
  if (!fs::exists(path)) return out;
  const CsvTable t = read_csv(path, kRunsHeader);
  for (std::size_t k = 0; k < t.rows.size(); ++k) {
    const auto& r = t.rows[k];
    RunRow row;
    row.run_id = r[0];
    row.status = r[6];
    row.epochs = parse_int_field(r[7], "epoch count", t.offsets[k]);
    row.final_test_acc = parse_double_field(r[8], "accuracy", t.offsets[k]);
    out[row.run_id] = row;
  }
  return out;
}

std::string runs_row(const ModelConfig& c, const std::string& id, const std::string& status,
                     const RunRecord* rec, const std::string& message) {
  std::ostringstream s;
  s << id << ',' << c.dataset << ',' << to_string(c.routing) << ',' << c.depth << ','
    << (c.use_skip ? 1 : 0) << ',' << c.seed << ',' << status << ','
    << (rec ? rec->epochs.size() : 0) << ',' << format_exact(rec ? rec->final_test_acc : 0) << ','
    << format_exact(rec ? rec->best_test_acc : 0) << ',' << format_exact(rec ? rec->wall_seconds : 0)
    << ',' << sanitize(message) << '\n';
  return s.str();
}

std::string metrics_rows(const RunRecord& rec) {
  const ModelConfig& c = rec.config;
  std::ostringstream s;
  for (const auto& m : rec.epochs)
    s << rec.run_id << ',' << c.dataset << ',' << to_string(c.routing) << ',' << c.depth << ','
      << (c.use_skip ? 1 : 0) << ',' << c.seed << ',' << m.epoch << ',' << format_exact(m.train_loss)
      << ',' << format_exact(m.test_acc) << '\n';
  return s.str();
}

// Replaces any earlier row of the same run (a retried failure) and appends.
void record_run(const fs::path& path, const std::string& id, const std::string& row) {
  std::string content = kRunsHeader + std::string("\n");
  if (fs::exists(path)) {
    const CsvTable t = read_csv(path, kRunsHeader);
    for (const auto& r : t.rows) {
      if (r[0] == id) continue;
      for (std::size_t k = 0; k < r.size(); ++k) content += (k ? "," : "") + r[k];
      content += '\n';
    }
  }
  write_file_atomic(path, content + row);
}

bool completed(const std::string& status) { return status == "ok" || status == "diverged"; }

}  // namespace

nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json j;
  j["run_id"] = r.run_id;
  j["config"] = config_to_map(r.config);
  j["train_size"] = r.train_size;
  j["test_size"] = r.test_size;
  j["epochs"] = nlohmann::json::array();
  for (const auto& m : r.epochs)
    j["epochs"].push_back({{"epoch", m.epoch},
                           {"train_loss", m.train_loss},
                           {"train_acc", m.train_acc},
                           {"test_acc", m.test_acc},
                           {"seconds", m.seconds}});
  j["wall_seconds"] = r.wall_seconds;
  j["final_test_acc"] = r.final_test_acc;
  j["best_test_acc"] = r.best_test_acc;
  j["status"] = to_string(r.status);
  if (!r.message.empty()) j["message"] = r.message;
  return j;
}

void write_file_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory", path.parent_path().string());
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << content;
    out.flush();
    if (!out) throw IoError("cannot write", tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename into place", path.string());
}

std::string format_exact(double value) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, r.ptr);
}

std::string to_string(SkipMode mode) {
  switch (mode) {
    case SkipMode::on: return "on";
    case SkipMode::off: return "off";
    case SkipMode::both: return "both";
  }
  return "both";
}

SkipMode parse_skip_mode(const std::string& name) {
  if (name == "on") return SkipMode::on;
  if (name == "off") return SkipMode::off;
  if (name == "both") return SkipMode::both;
  throw UsageError("skip mode must be on, off or both, got '" + name + "'");
}

std::vector<int> parse_depth_list(const std::string& text) {
  std::vector<int> out;
  for (const auto& part : split(text, ',')) {
    const auto dash = part.find('-');
    const auto num = [&](const std::string& s) {
      int v = 0;
      const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
      if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw UsageError("bad depth list '" + text + "'");
      return v;
    };
    if (dash == std::string::npos) {
      out.push_back(num(part));
    } else {
      const int lo = num(part.substr(0, dash)), hi = num(part.substr(dash + 1));
      if (hi < lo) throw UsageError("bad depth range '" + part + "'");
      for (int d = lo; d <= hi; ++d) out.push_back(d);
    }
  }
  if (out.empty()) throw UsageError("empty depth list");
  return out;
}

void SweepSpec::validate() const {
  if (datasets.empty() || routings.empty() || depths.empty() || seeds.empty())
    throw UsageError("sweep axes must be non-empty");
  for (int d : depths)
    if (d < ModelConfig::kMinDepth || d > ModelConfig::kMaxDepth)
      throw UsageError("sweep depth " + std::to_string(d) + " outside [3, 16]");
  for (const auto& c : runs()) c.validate();
}

std::vector<ModelConfig> SweepSpec::runs() const {
  std::vector<bool> skips;
  if (skip != SkipMode::on) skips.push_back(false);
  if (skip != SkipMode::off) skips.push_back(true);
  std::vector<ModelConfig> out;
  for (const auto& ds : datasets)
    for (auto routing : routings)
      for (bool s : skips)
        for (int depth : depths)
          for (auto seed : seeds) {
            ModelConfig c = base;
            c.dataset = ds;
            c.routing = routing;
            c.use_skip = s;
            c.depth = depth;
            c.seed = seed;
            out.push_back(c);
          }
  return out;
}

SweepOutcome run_sweep(const SweepSpec& spec, const fs::path& out, const DataProvider& data,
                       const TrainSettings& settings) {
  spec.validate();
  std::map<std::string, DataPair> loaded;
  for (const auto& ds : spec.datasets) loaded.emplace(ds, data(ds));

  const fs::path runs_path = out / "runs.csv";
  const auto previous = read_runs(runs_path);
  SweepOutcome outcome;
  for (ModelConfig config : spec.runs()) {
    ++outcome.planned;
    const std::string id = run_id(config);
    if (const auto it = previous.find(id); it != previous.end() && completed(it->second.status)) {
      ++outcome.resumed;
      continue;
    }
    const DataPair& d = loaded.at(config.dataset);
    config.num_classes = d.train.num_classes;
    config.arch.channels = d.train.channels();
    try {
      Model<float> model = build_model<float>(config);
      const RunRecord rec = train_model(model, d.train, d.test, settings);
      write_file_atomic(out / "records" / (id + ".json"), to_json(rec).dump(2) + "\n");
      append_atomic(out / "metrics.csv", kMetricsHeader, metrics_rows(rec));
      record_run(runs_path, id, runs_row(config, id, to_string(rec.status), &rec, rec.message));
      ++outcome.executed;
      if (rec.status == RunStatus::diverged) ++outcome.diverged;
    } catch (const IoError&) {
      throw;
    } catch (const std::exception& e) {
      record_run(runs_path, id, runs_row(config, id, "failed", nullptr, e.what()));
      ++outcome.failed;
      if (settings.log) *settings.log << id << " failed: " << e.what() << std::endl;
    }
  }
  write_summary(spec, out);
  return outcome;
}

void write_summary(const SweepSpec& spec, const fs::path& out) {
  const auto runs = read_runs(out / "runs.csv");
  std::ostringstream s;
  s << "dataset,routing,skip";
  for (int d : spec.depths) s << ",d" << d;
  s << '\n';
  std::vector<bool> skips;
  if (spec.skip != SkipMode::on) skips.push_back(false);
  if (spec.skip != SkipMode::off) skips.push_back(true);
  for (const auto& ds : spec.datasets)
    for (auto routing : spec.routings)
      for (bool skip : skips) {
        s << ds << ',' << to_string(routing) << ',' << (skip ? 1 : 0);
        for (int depth : spec.depths) {
          double sum = 0;
          int n = 0;
          for (auto seed : spec.seeds) {
            ModelConfig c;
            c.dataset = ds;
            c.routing = routing;
            c.use_skip = skip;
            c.depth = depth;
            c.seed = seed;
            const auto it = runs.find(run_id(c));
            if (it == runs.end() || !completed(it->second.status) || it->second.epochs == 0) continue;
            sum += it->second.final_test_acc;
            ++n;
          }
          s << ',';
          if (n > 0) s << format_exact(sum / n);
        }
        s << '\n';
      }
  write_file_atomic(out / "summary.csv", s.str());
}

int write_plotdata(const fs::path& metrics_csv, const fs::path& out) {
  const CsvTable t = read_csv(metrics_csv, kMetricsHeader);
  struct Final {
    int epoch = 0;
    double acc = 0;
    std::string dataset, routing;
    int depth = 0;
    bool skip = false;
  };
  std::map<std::string, Final> finals;
  for (std::size_t k = 0; k < t.rows.size(); ++k) {
    const auto& r = t.rows[k];
    const auto at = t.offsets[k];
    Final f;
    f.dataset = r[1];
    f.routing = r[2];
    f.depth = parse_int_field(r[3], "depth", at);
    const int skip = parse_int_field(r[4], "skip flag", at);
    if (skip != 0 && skip != 1) throw ParseError("skip flag must be 0 or 1", at);
    f.skip = skip == 1;
    f.epoch = parse_int_field(r[6], "epoch", at);
    parse_double_field(r[7], "train loss", at);
    f.acc = parse_double_field(r[8], "accuracy", at);
    if (r[0].empty() || f.dataset.empty() || f.routing.empty())
      throw ParseError("empty identifier field", at);
    auto [it, inserted] = finals.try_emplace(r[0], f);
    if (!inserted && f.epoch > it->second.epoch) it->second = f;
  }

  // (dataset, routing) -> (skip, depth) -> accuracies over seeds
  std::map<std::pair<std::string, std::string>, std::map<std::pair<bool, int>, std::vector<double>>> groups;
  for (const auto& [id, f] : finals) groups[{f.dataset, f.routing}][{f.skip, f.depth}].push_back(f.acc);

  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create directory", out.string());
  std::string index = "dataset,routing,file\n";
  for (const auto& [key, cells] : groups) {
    const std::string file = key.first + "_" + key.second + ".csv";
    std::ostringstream s;
    s << "series,depth,test_acc\n";
    for (const auto& [cell, accs] : cells) {
      double sum = 0;
      for (double a : accs) sum += a;
      s << (cell.first ? "skip" : "noskip") << ',' << cell.second << ','
        << format_exact(sum / static_cast<double>(accs.size())) << '\n';
    }
    write_file_atomic(out / file, s.str());
    index += key.first + "," + key.second + "," + file + "\n";
  }
  write_file_atomic(out / "series_index.csv", index);
  return static_cast<int>(groups.size());
}

}  // namespace rescaps
