#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <set>

#include "rescaps/data.hpp"

using namespace rescaps;
namespace fs = std::filesystem;

namespace {

/// Big-endian IDX writer written independently of the library parser.
std::string idx_bytes(const std::vector<std::uint32_t>& dims, const std::vector<std::uint8_t>& data) {
  std::string s{'\0', '\0', '\x08', static_cast<char>(dims.size())};
  for (auto d : dims)
    for (int k = 3; k >= 0; --k) s.push_back(static_cast<char>((d >> (8 * k)) & 0xff));
  s.append(data.begin(), data.end());
  return s;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("rescaps_test_" + std::to_string(std::random_device{}()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path write(const std::string& name, const std::string& bytes) const {
    const fs::path p = path / name;
    fs::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << bytes;
    return p;
  }
};

/// Image whose pixel (y, x, c) holds y * 1000 + x * 10 + c, so crops reveal their offset.
Tensor<float> coded_image(Index h, Index w, Index c) {
  Tensor<float> t({h, w, c});
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index k = 0; k < c; ++k) t(y, x, k) = float(y * 1000 + x * 10 + k);
  return t;
}

std::pair<Index, Index> offset_of(const Tensor<float>& crop) {
  const auto v = static_cast<Index>(crop(0, 0, 0));
  return {v / 1000, (v % 1000) / 10};
}

Tensor<float> random_image(std::mt19937_64& rng, Index h, Index w, Index c) {
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  Tensor<float> t({h, w, c});
  for (Index k = 0; k < t.size(); ++k) t[k] = d(rng);
  return t;
}

}  // namespace

TEST_CASE("IDX parsing: shapes, labels and the dataset loader") {
  TempDir tmp;
  std::vector<std::uint8_t> pix(3 * 28 * 28);
  for (std::size_t k = 0; k < pix.size(); ++k) pix[k] = static_cast<std::uint8_t>(k * 7);
  const auto img = tmp.write("mnist/train-images-idx3-ubyte", idx_bytes({3, 28, 28}, pix));
  const auto lab = tmp.write("mnist/train-labels-idx1-ubyte", idx_bytes({3}, {7, 0, 9}));
  const Dataset d = load_idx(img, lab);
  CHECK(d.size() == 3);
  CHECK(stored_shape(d.images) == Shape{3, 28, 28, 1});
  CHECK(d.labels == std::vector<int>{7, 0, 9});
  const Tensor<float> first = d.image(1);
  CHECK(first(0, 0, 0) == doctest::Approx(float(std::uint8_t(784 * 7)) / 255.0f));

  const Dataset via_dir = load_dataset(tmp.path, "mnist", "train");
  CHECK(via_dir.name == "mnist");
  CHECK(via_dir.split == "train");
  CHECK(via_dir.head(2).size() == 2);
  CHECK(stored_shape(via_dir.head(2).images) == Shape{2, 28, 28, 1});
  CHECK_THROWS_AS(load_dataset(tmp.path, "mnist", "test"), IoError);
  CHECK_THROWS_AS(load_dataset(tmp.path, "cifar", "train"), UsageError);
}

TEST_CASE("IDX parse errors name the byte offset") {
  std::vector<std::uint8_t> pix(2 * 4 * 4, 1);
  const std::string good = idx_bytes({2, 4, 4}, pix);

  SUBCASE("truncated payload") {
    try {
      decode_idx(good.substr(0, good.size() - 5));
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.offset() == 16);
      CHECK(std::string(e.what()).find("byte offset 16") != std::string::npos);
    }
  }
  SUBCASE("truncated header") {
    try {
      decode_idx(good.substr(0, 9));
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.offset() == 8);
    }
  }
  SUBCASE("bad magic") {
    std::string bad = good;
    bad[0] = 1;
    CHECK_THROWS_AS(decode_idx(bad), ParseError);
    bad = good;
    bad[2] = 0x0d;  // float payload
    CHECK_THROWS_AS(decode_idx(bad), ParseError);
  }
  SUBCASE("count mismatch and label range") {
    TempDir tmp;
    const auto img = tmp.write("i", good);
    CHECK_THROWS_AS(load_idx(img, tmp.write("l3", idx_bytes({3}, {1, 2, 3}))), ParseError);
    CHECK_THROWS_AS(load_idx(img, tmp.write("l2", idx_bytes({2}, {1, 10}))), UsageError);
    CHECK_THROWS_AS(load_idx(tmp.path / "missing", img), IoError);
  }
}

TEST_CASE("official MNIST files, when present, parse as N x 28 x 28 x 1") {
  const char* env = std::getenv("RESCAPS_DATA_DIR");
  if (env == nullptr || !fs::exists(fs::path(env) / "mnist" / "train-images-idx3-ubyte")) {
    MESSAGE("RESCAPS_DATA_DIR/mnist not available; skipping");
    return;
  }
  const Dataset d = load_dataset(env, "mnist", "train");
  CHECK(d.height() == 28);
  CHECK(d.width() == 28);
  CHECK(d.channels() == 1);
  for (int l : d.labels) CHECK((l >= 0 && l < 10));
}

TEST_CASE("canonical container byte layout") {
  const Tensor<std::uint8_t> t({2, 3}, {1, 2, 3, 4, 5, 6});
  const std::string b = encode_canonical(t);
  const std::string header("CAPS\x01\x00\x00\x00\x00\x02\x02\x00\x00\x00\x03\x00\x00\x00", 18);
  CHECK(b.substr(0, 18) == header);
  CHECK(b.size() == 18 + 6);
  CHECK(b.substr(18) == std::string("\x01\x02\x03\x04\x05\x06"));

  const Tensor<float> f({1}, {1.0f});
  const std::string fb = encode_canonical(f);
  CHECK(fb[8] == 1);
  CHECK(fb.substr(14) == std::string("\x00\x00\x80\x3f", 4));  // 1.0f little-endian
}

TEST_CASE("canonical container round-trips bit-exactly") {
  TempDir tmp;
  std::mt19937_64 rng(41);
  Tensor<std::uint8_t> u({5, 4, 3, 2});
  for (Index k = 0; k < u.size(); ++k) u[k] = static_cast<std::uint8_t>(rng());
  save_canonical(tmp.path / "u.caps", u);
  const auto ru = std::get<Tensor<std::uint8_t>>(load_canonical(tmp.path / "u.caps"));
  CHECK(ru.shape() == u.shape());
  CHECK(std::memcmp(ru.data(), u.data(), static_cast<std::size_t>(u.size())) == 0);

  Tensor<float> f({7, 3});
  for (Index k = 0; k < f.size(); ++k) {
    const auto bits = static_cast<std::uint32_t>(rng());
    std::memcpy(&f.data()[k], &bits, 4);  // arbitrary bit patterns, NaNs included
  }
  save_canonical(tmp.path / "f.caps", f);
  const auto rf = std::get<Tensor<float>>(load_canonical(tmp.path / "f.caps"));
  CHECK(rf.shape() == f.shape());
  CHECK(std::memcmp(rf.data(), f.data(), static_cast<std::size_t>(f.size()) * 4) == 0);

  const Tensor<float> scalar = Tensor<float>::scalar(2.5f);
  CHECK(std::get<Tensor<float>>(decode_canonical(encode_canonical(scalar))).item() == 2.5f);
}

TEST_CASE("canonical container rejects malformed input") {
  const std::string good = encode_canonical(Tensor<std::uint8_t>({4}, 9));
  const auto offset_of_error = [](const std::string& bytes) -> long long {
    try {
      decode_canonical(bytes);
    } catch (const ParseError& e) {
      return static_cast<long long>(e.offset());
    }
    return -1;
  };
  std::string bad = good;
  bad[0] = 'X';
  CHECK(offset_of_error(bad) == 0);
  bad = good;
  bad[4] = 2;
  CHECK(offset_of_error(bad) == 4);
  bad = good;
  bad[8] = 7;
  CHECK(offset_of_error(bad) == 8);
  CHECK(offset_of_error(good.substr(0, good.size() - 1)) == 14);
  CHECK(offset_of_error(good + "x") == 14);
  CHECK(offset_of_error(good.substr(0, 12)) == 10);
  CHECK(offset_of_error(good) == -1);
}

TEST_CASE("canonical datasets load with labels") {
  TempDir tmp;
  fs::create_directories(tmp.path / "norb");
  save_canonical(tmp.path / "norb" / "test-images.caps", Tensor<std::uint8_t>({3, 28, 28, 1}, 128));
  save_canonical(tmp.path / "norb" / "test-labels.caps", Tensor<std::uint8_t>({3}, {0, 4, 2}));
  const Dataset d = load_dataset(tmp.path, "norb", "test");
  CHECK(d.num_classes == 5);
  CHECK(d.labels == std::vector<int>{0, 4, 2});
  CHECK(d.image(2)(5, 5, 0) == doctest::Approx(128.0f / 255.0f));

  save_canonical(tmp.path / "norb" / "train-images.caps", Tensor<std::uint8_t>({2, 28, 28, 1}));
  save_canonical(tmp.path / "norb" / "train-labels.caps", Tensor<std::uint8_t>({2}, {0, 5}));
  CHECK_THROWS_AS(load_dataset(tmp.path, "norb", "train"), UsageError);
}

TEST_CASE("random crop offsets cover exactly the slack range") {
  std::mt19937_64 rng(42);
  for (auto [size, slack] : {std::pair<Index, Index>{28, 4}, {32, 8}, {24, 0}}) {
    const Tensor<float> img = coded_image(size, size, 1);
    std::set<std::pair<Index, Index>> seen;
    for (int k = 0; k < 3000; ++k) {
      const Tensor<float> c = random_crop(img, 24, rng);
      CHECK(c.shape() == Shape{24, 24, 1});
      const auto off = offset_of(c);
      CHECK((off.first >= 0 && off.first <= slack && off.second >= 0 && off.second <= slack));
      seen.insert(off);
    }
    CHECK(static_cast<Index>(seen.size()) == (slack + 1) * (slack + 1));
  }
  const Tensor<float> same = coded_image(24, 24, 2);
  CHECK(max_abs_diff(random_crop(same, 24, rng), same) == 0.0);
  CHECK_THROWS_AS(random_crop(coded_image(20, 30, 1), 24, rng), DimensionError);
}

TEST_CASE("center crop offsets") {
  CHECK(offset_of(center_crop(coded_image(28, 28, 1), 24)) == std::pair<Index, Index>{2, 2});
  CHECK(offset_of(center_crop(coded_image(32, 32, 3), 24)) == std::pair<Index, Index>{4, 4});
  const Tensor<float> id = coded_image(24, 24, 1);
  CHECK(max_abs_diff(center_crop(id, 24), id) == 0.0);
  // channels travel with their pixel
  CHECK(center_crop(coded_image(32, 32, 3), 24)(1, 2, 2) == float(5 * 1000 + 6 * 10 + 2));
  CHECK_THROWS_AS(center_crop(coded_image(23, 23, 1), 24), DimensionError);
}

TEST_CASE("brightness shift and clamp") {
  const Tensor<float> half({4, 4, 1}, 0.5f);
  CHECK(max_abs_diff(adjust_brightness(half, 0.0f), half) == 0.0);
  const float below = std::nextafter(0.25f, 0.0f);
  CHECK((adjust_brightness(half, below).array() - 0.75f).abs().maxCoeff() < 1e-6f);
  const Tensor<float> white({2, 2, 3}, 1.0f);
  CHECK(max_abs_diff(adjust_brightness(white, 0.2f), white) == 0.0);
  CHECK(adjust_brightness(Tensor<float>({1, 1, 1}, 0.1f), -0.2f)[0] == 0.0f);

  std::mt19937_64 rng(43);
  for (int k = 0; k < 1000; ++k) {
    const float v = random_brightness(half, 0.25, rng)[0];
    CHECK((v >= 0.25f && v < 0.75f));
  }
}

TEST_CASE("horizontal flip") {
  const Tensor<float> marker({2, 2, 1}, {1.0f, 0.0f, 0.0f, 0.0f});
  const Tensor<float> mirrored = hflip(marker);
  CHECK(mirrored(0, 1, 0) == 1.0f);
  CHECK(mirrored(0, 0, 0) == 0.0f);
  const Tensor<float> rgb = coded_image(3, 5, 3);
  CHECK(max_abs_diff(hflip(hflip(rgb)), rgb) == 0.0);
  CHECK(hflip(rgb)(1, 0, 2) == rgb(1, 4, 2));
  const Tensor<float> sym({2, 3, 1}, {1, 2, 1, 4, 5, 4});
  CHECK(max_abs_diff(hflip(sym), sym) == 0.0);

  std::mt19937_64 rng(44);
  int flips = 0;
  for (int k = 0; k < 4000; ++k) flips += random_hflip(marker, 0.5, rng)(0, 1, 0) == 1.0f;
  CHECK(flips > 1800);
  CHECK(flips < 2200);
}

TEST_CASE("standardize: examples and tolerances") {
  const Tensor<float> two({1, 2, 1}, {0.0f, 1.0f});
  const Tensor<float> z = standardize(two);
  CHECK(z[0] == doctest::Approx(-1.0f));
  CHECK(z[1] == doctest::Approx(1.0f));
  CHECK(standardize(Tensor<float>({3, 3, 2}, 0.4f)).array().abs().maxCoeff() == 0.0f);

  std::mt19937_64 rng(45);
  for (int k = 0; k < 500; ++k) {
    const Index h = 24, c = k % 2 ? 3 : 1;
    Tensor<float> img = random_image(rng, h, h, c);
    img.array() = img.array() * float(k % 7 + 1) * 0.1f;
    const auto x = standardize(img).array().cast<double>();
    const double mean = x.mean();
    const double sd = std::sqrt((x - mean).square().mean());
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(sd - 1.0) < 1e-4);
  }
}

TEST_CASE("epoch batches: counts, tail, determinism, permutation") {
  const auto b = epoch_batches(60000, 128, 7, 0);
  CHECK(b.size() == 469);
  CHECK(b.back().size() == 96);
  CHECK(epoch_batches(60000, 128, 7, 0) == b);
  CHECK(epoch_batches(60000, 128, 7, 1) != b);
  CHECK(epoch_batches(60000, 128, 8, 0) != b);

  std::vector<Index> all;
  for (const auto& x : b) all.insert(all.end(), x.begin(), x.end());
  std::sort(all.begin(), all.end());
  std::vector<Index> expect(60000);
  std::iota(expect.begin(), expect.end(), Index{0});
  CHECK(all == expect);

  const auto ordered = epoch_batches(10, 4, 1, 0, false);
  REQUIRE(ordered.size() == 3);
  CHECK(ordered[2] == std::vector<Index>{8, 9});
  CHECK_THROWS_AS(epoch_batches(10, 0, 1, 0), UsageError);
}

TEST_CASE("train and eval batches") {
  Dataset d;
  d.name = "fashion";
  d.num_classes = 10;
  Tensor<std::uint8_t> imgs({4, 28, 28, 1});
  std::mt19937_64 rng(46);
  for (Index k = 0; k < imgs.size(); ++k) imgs[k] = static_cast<std::uint8_t>(rng());
  d.images = imgs;
  d.labels = {3, 1, 4, 1};

  const std::vector<Index> idx{2, 0, 3};
  auto r1 = derived_rng(5, 0, 1), r2 = derived_rng(5, 0, 1);
  const Batch a = make_train_batch(d, idx, AugmentConfig::for_dataset("fashion"), r1);
  const Batch b = make_train_batch(d, idx, AugmentConfig::for_dataset("fashion"), r2);
  CHECK(a.images.shape() == Shape{3, 24, 24, 1});
  CHECK(a.targets.shape() == Shape{3, 576});
  CHECK(a.labels == std::vector<int>{4, 3, 1});
  CHECK(max_abs_diff(a.images, b.images) == 0.0);
  CHECK(max_abs_diff(a.targets, b.targets) == 0.0);
  CHECK(a.targets.array().minCoeff() >= 0.0f);
  CHECK(a.targets.array().maxCoeff() <= 1.0f);

  const Batch e = make_eval_batch(d, idx, 24);
  const Tensor<float> want = center_crop(d.image(0), 24);
  for (Index k = 0; k < 576; ++k) CHECK(e.targets(1, k) == want[k]);
  const Tensor<float> z = standardize(want);
  for (Index k = 0; k < 576; ++k) CHECK(e.images[576 + k] == z[k]);

  const auto for_svhn = AugmentConfig::for_dataset("svhn");
  CHECK(for_svhn.use_brightness);
  CHECK_FALSE(for_svhn.use_flip);
  CHECK_FALSE(AugmentConfig::for_dataset("mnist").use_brightness);
}
