#include "rescaps/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace rescaps {

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file", path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed", path.string());
  return std::move(ss).str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create file", path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw IoError("write failed", path.string());
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n)
      throw ParseError(std::string("truncated ") + what + ": need " + std::to_string(n) +
                           " bytes, " + std::to_string(remaining()) + " left",
                       pos_);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32(bool big_endian, const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) {
      const auto b = static_cast<std::uint8_t>(bytes_[pos_ + k]);
      v |= big_endian ? std::uint32_t(b) << (8 * (3 - k)) : std::uint32_t(b) << (8 * k);
    }
    pos_ += 4;
    return v;
  }
  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    const auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

void put_u32_le(std::string& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}

}  // namespace

const Shape& stored_shape(const StoredTensor& t) {
  return std::visit([](const auto& x) -> const Shape& { return x.shape(); }, t);
}

DType stored_dtype(const StoredTensor& t) {
  return std::holds_alternative<Tensor<std::uint8_t>>(t) ? DType::u8 : DType::f32;
}

std::string encode_canonical(const StoredTensor& t) {
  const Shape& shape = stored_shape(t);
  if (shape.size() > 255) throw UsageError("canonical container supports rank <= 255");
  std::string out = "CAPS";
  put_u32_le(out, kCanonicalVersion);
  out.push_back(static_cast<char>(stored_dtype(t)));
  out.push_back(static_cast<char>(shape.size()));
  for (Index d : shape) {
    if (d < 0 || d > Index(UINT32_MAX)) throw UsageError("dimension does not fit in u32");
    put_u32_le(out, static_cast<std::uint32_t>(d));
  }
  if (const auto* u = std::get_if<Tensor<std::uint8_t>>(&t)) {
    out.append(reinterpret_cast<const char*>(u->data()), static_cast<std::size_t>(u->size()));
  } else {
    const auto& f = std::get<Tensor<float>>(t);
    static_assert(std::endian::native == std::endian::little, "f32 payload assumes little-endian");
    out.append(reinterpret_cast<const char*>(f.data()),
               static_cast<std::size_t>(f.size()) * sizeof(float));
  }
  return out;
}

StoredTensor decode_canonical(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(4, "magic") != "CAPS") throw ParseError("bad magic, expected \"CAPS\"", 0);
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32(false, "version");
  if (version != kCanonicalVersion)
    throw ParseError("unsupported container version " + std::to_string(version), version_at);
  const std::size_t dtype_at = r.offset();
  const std::uint8_t dtype = r.u8("dtype");
  if (dtype > 1) throw ParseError("unknown dtype code " + std::to_string(dtype), dtype_at);
  const std::uint8_t rank = r.u8("rank");
  Shape shape;
  for (int k = 0; k < rank; ++k) shape.push_back(static_cast<Index>(r.u32(false, "dims")));
  const std::size_t elem = dtype == 0 ? 1 : sizeof(float);
  const std::size_t count = static_cast<std::size_t>(numel(shape));
  const std::size_t payload_at = r.offset();
  if (r.remaining() != count * elem)
    throw ParseError("payload length " + std::to_string(r.remaining()) + " does not match dims " +
                         to_string(shape) + " (expected " + std::to_string(count * elem) + ")",
                     payload_at);
  const std::string_view payload = r.take(count * elem, "payload");
  if (dtype == 0) {
    Tensor<std::uint8_t> t(shape);
    std::memcpy(t.data(), payload.data(), payload.size());
    return t;
  }
  Tensor<float> t(shape);
  std::memcpy(t.data(), payload.data(), payload.size());
  return t;
}

void save_canonical(const fs::path& path, const StoredTensor& t) {
  write_file(path, encode_canonical(t));
}

StoredTensor load_canonical(const fs::path& path) {
  const std::string bytes = read_file(path);
  try {
    return decode_canonical(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

Tensor<std::uint8_t> decode_idx(std::string_view bytes) {
  Reader r(bytes);
  r.need(4, "IDX magic");
  if (r.u8("IDX magic") != 0 || r.u8("IDX magic") != 0)
    throw ParseError("bad IDX magic (first two bytes must be zero)", 0);
  const std::uint8_t type = r.u8("IDX type");
  if (type != 0x08) throw ParseError("unsupported IDX element type " + std::to_string(type), 2);
  const std::uint8_t rank = r.u8("IDX rank");
  if (rank == 0) throw ParseError("IDX rank must be positive", 3);
  Shape shape;
  for (int k = 0; k < rank; ++k) shape.push_back(static_cast<Index>(r.u32(true, "IDX dims")));
  const auto count = static_cast<std::size_t>(numel(shape));
  const std::string_view payload = r.take(count, "IDX payload");
  Tensor<std::uint8_t> t(shape);
  std::memcpy(t.data(), payload.data(), count);
  return t;
}

Tensor<float> Dataset::image(Index n) const {
  const Shape& s = stored_shape(images);
  Tensor<float> out({s[1], s[2], s[3]});
  const Index len = out.size();
  if (const auto* u = std::get_if<Tensor<std::uint8_t>>(&images)) {
    for (Index k = 0; k < len; ++k) out[k] = static_cast<float>((*u)[n * len + k]) / 255.0f;
  } else {
    const auto& f = std::get<Tensor<float>>(images);
    std::copy_n(f.data() + n * len, len, out.data());
  }
  return out;
}

Dataset Dataset::head(Index limit) const {
  if (limit <= 0 || limit >= size()) return *this;
  Dataset out;
  out.name = name;
  out.split = split;
  out.num_classes = num_classes;
  out.labels.assign(labels.begin(), labels.begin() + limit);
  std::visit(
      [&](const auto& t) {
        using T = std::decay_t<decltype(t)>;
        Shape s = t.shape();
        const Index per = t.size() / s[0];
        s[0] = limit;
        T sub(s);
        std::copy_n(t.data(), limit * per, sub.data());
        out.images = std::move(sub);
      },
      images);
  return out;
}

void Dataset::validate() const {
  const Shape& s = stored_shape(images);
  if (s.size() != 4) throw UsageError(name + ": images must be N x H x W x C, got " + to_string(s));
  if (s[0] != size())
    throw UsageError(name + ": " + std::to_string(s[0]) + " images but " +
                     std::to_string(size()) + " labels");
  for (std::size_t k = 0; k < labels.size(); ++k)
    if (labels[k] < 0 || labels[k] >= num_classes)
      throw UsageError(name + ": label " + std::to_string(labels[k]) + " at index " +
                       std::to_string(k) + " outside [0, " + std::to_string(num_classes) + ")");
}

namespace {

std::vector<int> labels_from(const StoredTensor& t, const std::string& where) {
  const Shape& s = stored_shape(t);
  if (s.size() != 1) throw UsageError(where + ": labels must be rank 1, got " + to_string(s));
  std::vector<int> out(static_cast<std::size_t>(s[0]));
  std::visit(
      [&](const auto& x) {
        for (Index k = 0; k < x.size(); ++k) {
          const double v = static_cast<double>(x[k]);
          if (v != std::floor(v)) throw UsageError(where + ": non-integer label");
          out[static_cast<std::size_t>(k)] = static_cast<int>(v);
        }
      },
      t);
  return out;
}

}  // namespace

Dataset load_idx(const fs::path& images, const fs::path& labels, Index num_classes) {
  Tensor<std::uint8_t> img, lab;
  try {
    img = decode_idx(read_file(images));
  } catch (const ParseError& e) {
    throw ParseError(images.string() + ": " + e.what(), e.offset());
  }
  try {
    lab = decode_idx(read_file(labels));
  } catch (const ParseError& e) {
    throw ParseError(labels.string() + ": " + e.what(), e.offset());
  }
  if (img.rank() != 3) throw ParseError(images.string() + ": IDX images must be N x H x W", 3);
  if (lab.rank() != 1) throw ParseError(labels.string() + ": IDX labels must be rank 1", 3);
  if (img.dim(0) != lab.dim(0))
    throw ParseError("image count " + std::to_string(img.dim(0)) + " != label count " +
                         std::to_string(lab.dim(0)),
                     4);
  Dataset d;
  d.images = img.reshaped({img.dim(0), img.dim(1), img.dim(2), 1});
  d.labels = labels_from(StoredTensor(lab), labels.string());
  d.num_classes = num_classes;
  d.validate();
  return d;
}

Dataset load_canonical_dataset(const fs::path& images, const fs::path& labels,
                               Index num_classes) {
  Dataset d;
  d.images = load_canonical(images);
  d.labels = labels_from(load_canonical(labels), labels.string());
  d.num_classes = num_classes;
  if (stored_shape(d.images).size() != 4)
    throw UsageError(images.string() + ": images must be N x H x W x C");
  d.validate();
  return d;
}

Dataset load_dataset(const fs::path& data_dir, const std::string& name, const std::string& split) {
  if (split != "train" && split != "test")
    throw UsageError("split must be train or test, got '" + split + "'");
  const fs::path dir = data_dir / name;
  Dataset d;
  if (name == "mnist" || name == "fashion") {
    const std::string prefix = split == "train" ? "train" : "t10k";
    d = load_idx(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"), 10);
  } else if (name == "svhn" || name == "norb") {
    d = load_canonical_dataset(dir / (split + "-images.caps"), dir / (split + "-labels.caps"),
                               name == "norb" ? 5 : 10);
  } else {
    throw UsageError("unknown dataset '" + name + "' (expected mnist, fashion, svhn or norb)");
  }
  d.name = name;
  d.split = split;
  return d;
}

AugmentConfig AugmentConfig::for_dataset(const std::string& name) {
  AugmentConfig a;
  a.use_brightness = name == "svhn" || name == "norb";
  a.use_flip = name == "fashion";
  return a;
}

Tensor<float> crop_at(const Tensor<float>& image, Index top, Index left, Index size) {
  if (image.rank() != 3) throw DimensionError("image must be H x W x C");
  const Index h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (size > h || size > w)
    throw DimensionError("crop " + std::to_string(size) + " larger than image " +
                         to_string(image.shape()));
  if (top < 0 || left < 0 || top + size > h || left + size > w)
    throw DimensionError("crop window out of bounds");
  Tensor<float> out({size, size, c});
  for (Index y = 0; y < size; ++y)
    std::copy_n(image.data() + ((top + y) * w + left) * c, size * c, out.data() + y * size * c);
  return out;
}

Tensor<float> random_crop(const Tensor<float>& image, Index size, std::mt19937_64& rng) {
  if (image.rank() != 3 || size > image.dim(0) || size > image.dim(1))
    throw DimensionError("crop " + std::to_string(size) + " larger than image " +
                         to_string(image.shape()));
  std::uniform_int_distribution<Index> ty(0, image.dim(0) - size), tx(0, image.dim(1) - size);
  const Index top = ty(rng);
  const Index left = tx(rng);
  return crop_at(image, top, left, size);
}

Tensor<float> center_crop(const Tensor<float>& image, Index size) {
  if (image.rank() != 3) throw DimensionError("image must be H x W x C");
  return crop_at(image, (image.dim(0) - size) / 2, (image.dim(1) - size) / 2, size);
}

Tensor<float> adjust_brightness(const Tensor<float>& image, float delta) {
  Tensor<float> out = image;
  out.array() = (out.array() + delta).max(0.0f).min(1.0f);
  return out;
}

Tensor<float> random_brightness(const Tensor<float>& image, double range, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-range, range);
  return adjust_brightness(image, static_cast<float>(d(rng)));
}

Tensor<float> hflip(const Tensor<float>& image) {
  if (image.rank() != 3) throw DimensionError("image must be H x W x C");
  const Index h = image.dim(0), w = image.dim(1), c = image.dim(2);
  Tensor<float> out(image.shape());
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      std::copy_n(image.data() + (y * w + x) * c, c, out.data() + (y * w + (w - 1 - x)) * c);
  return out;
}

Tensor<float> random_hflip(const Tensor<float>& image, double probability, std::mt19937_64& rng) {
  std::bernoulli_distribution flip(probability);
  return flip(rng) ? hflip(image) : image;
}

Tensor<float> standardize(const Tensor<float>& image) {
  const auto x = image.array().cast<double>();
  const double mean = x.mean();
  const double sd = std::sqrt((x - mean).square().mean());
  Tensor<float> out(image.shape());
  out.array() = ((x - mean) / std::max(sd, kStdFloor)).cast<float>();
  return out;
}

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(tag)};
  return std::mt19937_64(seq);
}

std::vector<std::vector<Index>> epoch_batches(Index n, Index batch_size, std::uint64_t seed,
                                              int epoch, bool shuffle) {
  if (batch_size < 1) throw UsageError("batch size must be positive");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  if (shuffle) {
    auto rng = derived_rng(seed, static_cast<std::uint64_t>(epoch), 0);
    // Fisher-Yates with an explicit index draw keeps the order identical across
    // standard library implementations of std::shuffle.
    for (std::size_t k = order.size(); k > 1; --k) {
      const std::size_t j = static_cast<std::size_t>(rng() % k);
      std::swap(order[k - 1], order[j]);
    }
  }
  std::vector<std::vector<Index>> batches;
  for (Index start = 0; start < n; start += batch_size)
    batches.emplace_back(order.begin() + start, order.begin() + std::min(n, start + batch_size));
  return batches;
}

namespace {

Batch assemble(const std::vector<Tensor<float>>& crops, std::span<const Index> indices,
               const Dataset& data) {
  Batch b;
  const Index count = static_cast<Index>(crops.size());
  const Shape& s = crops.front().shape();
  const Index per = crops.front().size();
  b.images = Tensor<float>({count, s[0], s[1], s[2]});
  b.targets = Tensor<float>({count, per});
  for (Index k = 0; k < count; ++k) {
    std::copy_n(crops[k].data(), per, b.targets.data() + k * per);
    const Tensor<float> z = standardize(crops[k]);
    std::copy_n(z.data(), per, b.images.data() + k * per);
    b.labels.push_back(data.labels.at(static_cast<std::size_t>(indices[k])));
  }
  return b;
}

}  // namespace

Batch make_train_batch(const Dataset& data, std::span<const Index> indices,
                       const AugmentConfig& augment, std::mt19937_64& rng) {
  if (indices.empty()) throw UsageError("empty batch");
  std::vector<Tensor<float>> crops;
  crops.reserve(indices.size());
  for (Index n : indices) {
    Tensor<float> img = data.image(n);
    if (augment.use_brightness) img = random_brightness(img, augment.brightness, rng);
    if (augment.use_flip) img = random_hflip(img, augment.flip_probability, rng);
    crops.push_back(random_crop(img, augment.crop, rng));
  }
  return assemble(crops, indices, data);
}

Batch make_eval_batch(const Dataset& data, std::span<const Index> indices, Index crop) {
  if (indices.empty()) throw UsageError("empty batch");
  std::vector<Tensor<float>> crops;
  crops.reserve(indices.size());
  for (Index n : indices) crops.push_back(center_crop(data.image(n), crop));
  return assemble(crops, indices, data);
}

}  // namespace rescaps
