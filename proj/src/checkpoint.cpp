#include "rescaps/checkpoint.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "rescaps/data.hpp"

namespace rescaps {

namespace fs = std::filesystem;

namespace {

constexpr const char* kManifestHeader = "# rescaps checkpoint v1";

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& key, const std::string& s) {
  double v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw UsageError("'" + key + "' expects a number, got '" + s + "'");
  return v;
}

long long parse_int(const std::string& key, const std::string& s) {
  long long v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw UsageError("'" + key + "' expects an integer, got '" + s + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw UsageError("'" + key + "' expects true or false, got '" + s + "'");
}

std::string join_dims(const std::vector<Index>& v, char sep) {
  std::string out;
  for (std::size_t k = 0; k < v.size(); ++k) out += (k ? std::string(1, sep) : "") + std::to_string(v[k]);
  return out;
}

std::string layer_line(const LayerSpec& l) {
  std::ostringstream s;
  s << to_string(l.kind) << ' ' << l.name << ' ' << l.in_count << 'x' << l.in_dim << ' '
    << l.out_count << 'x' << l.out_dim;
  for (const auto& in : l.inner) s << " [" << layer_line(in) << ']';
  return s.str();
}

}  // namespace

std::map<std::string, std::string> config_to_map(const ModelConfig& c) {
  const ArchSpec& a = c.arch;
  return {
      {"dataset", c.dataset},
      {"classes", std::to_string(c.num_classes)},
      {"depth", std::to_string(c.depth)},
      {"skip", c.use_skip ? "true" : "false"},
      {"routing", to_string(c.routing)},
      {"routing-iterations", std::to_string(c.routing_iterations)},
      {"seed", std::to_string(c.seed)},
      {"batch-size", std::to_string(c.batch_size)},
      {"epochs", std::to_string(c.epochs)},
      {"learning-rate", format_double(c.learning_rate)},
      {"recon-weight", format_double(c.recon_weight)},
      {"init-std", format_double(c.transform_init_std)},
      {"bias-init", format_double(c.bias_init)},
      {"em-lambda-initial", format_double(c.em_lambda.initial)},
      {"em-lambda-step", format_double(c.em_lambda.step)},
      {"arch.image-size", std::to_string(a.image_size)},
      {"arch.channels", std::to_string(a.channels)},
      {"arch.stem-kernel", std::to_string(a.stem_kernel)},
      {"arch.stem-channels", std::to_string(a.stem_channels)},
      {"arch.primary-kernel", std::to_string(a.primary_kernel)},
      {"arch.primary-stride", std::to_string(a.primary_stride)},
      {"arch.primary-channels", std::to_string(a.primary_channels)},
      {"arch.primary-dim", std::to_string(a.primary_dim)},
      {"arch.first-caps", std::to_string(a.first_caps)},
      {"arch.first-dim", std::to_string(a.first_dim)},
      {"arch.hidden-caps", std::to_string(a.hidden_caps)},
      {"arch.hidden-dim", std::to_string(a.hidden_dim)},
      {"arch.class-dim", std::to_string(a.class_dim)},
      {"arch.decoder-hidden", join_dims(a.decoder_hidden, ',')},
  };
}

ModelConfig config_from_map(const std::map<std::string, std::string>& values) {
  ModelConfig c;
  ArchSpec& a = c.arch;
  for (const auto& [k, v] : values) {
    const auto i = [&] { return parse_int(k, v); };
    const auto d = [&] { return parse_double(k, v); };
    if (k == "dataset") c.dataset = v;
    else if (k == "classes") c.num_classes = i();
    else if (k == "depth") c.depth = static_cast<int>(i());
    else if (k == "skip") c.use_skip = parse_bool(k, v);
    else if (k == "routing") c.routing = parse_routing(v);
    else if (k == "routing-iterations") c.routing_iterations = static_cast<int>(i());
    else if (k == "seed") c.seed = static_cast<std::uint64_t>(i());
    else if (k == "batch-size") c.batch_size = static_cast<int>(i());
    else if (k == "epochs") c.epochs = static_cast<int>(i());
    else if (k == "learning-rate") c.learning_rate = d();
    else if (k == "recon-weight") c.recon_weight = d();
    else if (k == "init-std") c.transform_init_std = d();
    else if (k == "bias-init") c.bias_init = d();
    else if (k == "em-lambda-initial") c.em_lambda.initial = d();
    else if (k == "em-lambda-step") c.em_lambda.step = d();
    else if (k == "arch.image-size") a.image_size = i();
    else if (k == "arch.channels") a.channels = i();
    else if (k == "arch.stem-kernel") a.stem_kernel = i();
    else if (k == "arch.stem-channels") a.stem_channels = i();
    else if (k == "arch.primary-kernel") a.primary_kernel = i();
    else if (k == "arch.primary-stride") a.primary_stride = i();
    else if (k == "arch.primary-channels") a.primary_channels = i();
    else if (k == "arch.primary-dim") a.primary_dim = i();
    else if (k == "arch.first-caps") a.first_caps = i();
    else if (k == "arch.first-dim") a.first_dim = i();
    else if (k == "arch.hidden-caps") a.hidden_caps = i();
    else if (k == "arch.hidden-dim") a.hidden_dim = i();
    else if (k == "arch.class-dim") a.class_dim = i();
    else if (k == "arch.decoder-hidden") {
      a.decoder_hidden.clear();
      std::stringstream ss(v);
      for (std::string part; std::getline(ss, part, ',');) a.decoder_hidden.push_back(parse_int(k, part));
    } else {
      throw UsageError("unknown configuration key '" + k + "'");
    }
  }
  return c;
}

void save_checkpoint(const fs::path& dir, const Model<float>& model) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory", dir.string());
  std::ostringstream m;
  m << kManifestHeader << '\n';
  for (const auto& [k, v] : config_to_map(model.config())) m << "config." << k << '=' << v << '\n';
  for (const auto& l : model.layers()) m << "layer=" << layer_line(l) << '\n';
  const auto& p = model.parameters();
  for (std::size_t k = 0; k < p.size(); ++k) {
    m << "param." << p.names[k] << '=' << join_dims(p.values[k].shape(), 'x') << '\n';
    save_canonical(dir / (p.names[k] + ".caps"), p.values[k]);
  }
  // Manifest last: a directory with a manifest is complete.
  const fs::path tmp = dir / "manifest.txt.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << m.str();
    if (!out) throw IoError("cannot write checkpoint manifest", tmp.string());
  }
  fs::rename(tmp, dir / "manifest.txt", ec);
  if (ec) throw IoError("cannot finalize checkpoint manifest", (dir / "manifest.txt").string());
}

Model<float> load_checkpoint(const fs::path& dir) {
  const fs::path path = dir / "manifest.txt";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint manifest", path.string());
  std::map<std::string, std::string> config;
  std::vector<std::string> layers;
  std::vector<std::pair<std::string, std::string>> params;
  std::string line;
  std::uint64_t offset = 0;
  bool first = true;
  while (std::getline(in, line)) {
    const std::uint64_t at = offset;
    offset += line.size() + 1;
    if (first) {
      if (line != kManifestHeader) throw ParseError(path.string() + ": not a checkpoint manifest", at);
      first = false;
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(path.string() + ": expected key=value", at);
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key.rfind("config.", 0) == 0) config[key.substr(7)] = value;
    else if (key == "layer") layers.push_back(value);
    else if (key.rfind("param.", 0) == 0) params.emplace_back(key.substr(6), value);
    else throw ParseError(path.string() + ": unknown manifest entry '" + key + "'", at);
  }
  if (first) throw ParseError(path.string() + ": empty manifest", 0);

  Model<float> model = build_model<float>(config_from_map(config));
  std::vector<std::string> expected;
  for (const auto& l : model.layers()) expected.push_back(layer_line(l));
  if (expected != layers)
    throw UsageError(path.string() + ": layer plan does not match the recorded configuration");
  auto& set = model.parameters();
  if (params.size() != set.size())
    throw UsageError(path.string() + ": " + std::to_string(params.size()) +
                     " parameters recorded, model has " + std::to_string(set.size()));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& [name, dims] = params[k];
    if (set.names[k] != name)
      throw UsageError(path.string() + ": parameter " + std::to_string(k) + " is '" + name +
                       "', expected '" + set.names[k] + "'");
    const StoredTensor stored = load_canonical(dir / (name + ".caps"));
    const auto* f = std::get_if<Tensor<float>>(&stored);
    if (f == nullptr) throw UsageError(name + ".caps: expected f32 payload");
    if (f->shape() != set.values[k].shape() || join_dims(f->shape(), 'x') != dims)
      throw UsageError(name + ".caps: shape " + to_string(f->shape()) + " does not match " +
                       to_string(set.values[k].shape()));
    set.values[k] = *f;
  }
  return model;
}

}  // namespace rescaps
