#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "rescaps/tensor.hpp"

namespace rescaps {

// -- canonical tensor container ------------------------------------------------
//
// Layout: "CAPS" | u32 LE version (1) | u8 dtype (0 = u8, 1 = f32 LE) | u8 rank |
//         rank x u32 LE dims | row-major payload.

enum class DType : std::uint8_t { u8 = 0, f32 = 1 };

inline constexpr std::uint32_t kCanonicalVersion = 1;

using StoredTensor = std::variant<Tensor<std::uint8_t>, Tensor<float>>;

const Shape& stored_shape(const StoredTensor& t);
DType stored_dtype(const StoredTensor& t);

std::string encode_canonical(const StoredTensor& t);
/// Throws ParseError with the offending byte offset.
StoredTensor decode_canonical(std::string_view bytes);

void save_canonical(const std::filesystem::path& path, const StoredTensor& t);
StoredTensor load_canonical(const std::filesystem::path& path);

// -- IDX (MNIST distribution format) -------------------------------------------

/// Parses an IDX file of unsigned bytes (type code 0x08). Throws ParseError.
Tensor<std::uint8_t> decode_idx(std::string_view bytes);

// -- datasets ------------------------------------------------------------------

struct Dataset {
  std::string name;
  std::string split;
  StoredTensor images;  // N x H x W x C
  std::vector<int> labels;
  Index num_classes = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index height() const { return stored_shape(images)[1]; }
  Index width() const { return stored_shape(images)[2]; }
  Index channels() const { return stored_shape(images)[3]; }

  /// Image n as H x W x C floats in [0,1] (bytes divided by 255; f32 used as stored).
  Tensor<float> image(Index n) const;
  /// First `limit` samples (all when limit <= 0 or >= size).
  Dataset head(Index limit) const;
  /// Checks label range and image/label counts; throws ParseError/UsageError.
  void validate() const;
};

/// Pairs an IDX image file (N x H x W) with its label file; images gain C = 1.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 Index num_classes = 10);

/// Pairs canonical image (N x H x W x C) and label (N) containers.
Dataset load_canonical_dataset(const std::filesystem::path& images,
                               const std::filesystem::path& labels, Index num_classes);

/// Locates a split under `data_dir`: mnist and fashion as IDX files in
/// `<dir>/<name>/`, svhn and norb as `<dir>/<name>/<split>-{images,labels}.caps`.
/// `split` is "train" or "test". Missing files raise IoError.
Dataset load_dataset(const std::filesystem::path& data_dir, const std::string& name,
                     const std::string& split);

// -- augmentation --------------------------------------------------------------

struct AugmentConfig {
  Index crop = 24;
  double brightness = 0.25;  // delta ~ U[-b, b)
  double flip_probability = 0.5;
  bool use_brightness = false;
  bool use_flip = false;

  /// Brightness for svhn and norb, horizontal flips for fashion.
  static AugmentConfig for_dataset(const std::string& name);
};

/// Window of `size` x `size` at (top, left). image H x W x C.
Tensor<float> crop_at(const Tensor<float>& image, Index top, Index left, Index size);
Tensor<float> random_crop(const Tensor<float>& image, Index size, std::mt19937_64& rng);
Tensor<float> center_crop(const Tensor<float>& image, Index size);

/// Adds delta to every pixel and clamps to [0,1].
Tensor<float> adjust_brightness(const Tensor<float>& image, float delta);
Tensor<float> random_brightness(const Tensor<float>& image, double range, std::mt19937_64& rng);

/// Reverses the W axis.
Tensor<float> hflip(const Tensor<float>& image);
Tensor<float> random_hflip(const Tensor<float>& image, double probability, std::mt19937_64& rng);

inline constexpr double kStdFloor = 1e-6;

/// (x - mean) / max(std, 1e-6) over all pixels and channels, population std.
Tensor<float> standardize(const Tensor<float>& image);

// -- batching ------------------------------------------------------------------

/// Sample order for one epoch: a permutation seeded by (seed, epoch), or the
/// identity when shuffle is off, cut into batches with the short tail kept.
std::vector<std::vector<Index>> epoch_batches(Index n, Index batch_size, std::uint64_t seed,
                                              int epoch, bool shuffle = true);

struct Batch {
  Tensor<float> images;   // B x crop x crop x C, standardized
  Tensor<float> targets;  // B x crop*crop*C, the [0,1] crop before standardization
  std::vector<int> labels;
};

/// scale -> brightness/flip -> random crop -> standardize.
Batch make_train_batch(const Dataset& data, std::span<const Index> indices,
                       const AugmentConfig& augment, std::mt19937_64& rng);

/// scale -> center crop -> standardize.
Batch make_eval_batch(const Dataset& data, std::span<const Index> indices, Index crop);

/// Deterministic generator for stream `tag` of (seed, epoch).
std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t tag);

}  // namespace rescaps
