#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "watt/tensor.hpp"

namespace watt {

// Row-major [count, height, width, channels] pixels in [0, 1].
struct ImageSet {
  std::string split;  // provenance tag: "train", "test", or "test/<corruption>"
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  std::vector<double> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return height * width * channels; }
  std::span<const double> image(std::size_t i) const;
  Tensor images(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> class_histogram(std::size_t num_classes) const;
};

struct Dataset {
  std::vector<std::string> class_names;
  ImageSet train;
  ImageSet test;
  std::uint64_t seed = 0;
  std::string source;  // "synthetic" or "cifar10"

  std::size_t num_classes() const { return class_names.size(); }
};

struct SyntheticConfig {
  std::size_t train_size = 4096;
  std::size_t test_size = 1024;
};

const std::vector<std::string>& synthetic_class_names();

// Eight parametric shape/texture classes with per-sample jitter. Splits are
// class-balanced and drawn from independent streams.
Dataset generate_dataset(std::uint64_t seed, const SyntheticConfig& config = {});

// Short description plus a content hash, enough to regenerate and check a
// synthetic dataset.
nlohmann::json dataset_manifest(const Dataset& dataset);
std::uint64_t content_hash(const ImageSet& images);

// ---------------------------------------------------------------------------
// Corruptions

enum class CorruptionKind { gaussian_noise, shot_noise, impulse_noise, box_blur, contrast, brightness, pixelate };

inline constexpr std::array<CorruptionKind, 7> kAllCorruptions = {
    CorruptionKind::gaussian_noise, CorruptionKind::shot_noise, CorruptionKind::impulse_noise,
    CorruptionKind::box_blur,       CorruptionKind::contrast,   CorruptionKind::brightness,
    CorruptionKind::pixelate};

std::string_view to_string(CorruptionKind kind);
CorruptionKind corruption_from_string(std::string_view name);

struct Corruption {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 1;
};

// Severity tables, index = severity - 1.
//   gaussian_noise  sigma of additive noise
//   shot_noise      photon count scale (lower is noisier)
//   impulse_noise   fraction of salt-and-pepper pixels
//   box_blur        passes of a 3x3 box filter
//   contrast        factor applied around the per-image mean
//   brightness      additive offset
//   pixelate        side length of the downsampled grid (for 16x16 inputs)
inline constexpr std::array<double, 5> kGaussianSigma = {0.04, 0.08, 0.12, 0.18, 0.26};
inline constexpr std::array<double, 5> kShotScale = {60.0, 25.0, 12.0, 5.0, 3.0};
inline constexpr std::array<double, 5> kImpulseAmount = {0.03, 0.06, 0.09, 0.17, 0.27};
inline constexpr std::array<double, 5> kBlurPasses = {1, 2, 3, 4, 6};
inline constexpr std::array<double, 5> kContrastFactor = {0.75, 0.5, 0.4, 0.3, 0.15};
inline constexpr std::array<double, 5> kBrightnessDelta = {0.1, 0.2, 0.3, 0.4, 0.5};
inline constexpr std::array<double, 5> kPixelateGrid = {12, 10, 8, 6, 4};

double severity_parameter(const Corruption& corruption);

// Applies `kind` with an explicit parameter (in the units of the table above).
ImageSet corrupt_with_parameter(const ImageSet& images, CorruptionKind kind, double parameter, std::uint64_t seed);
ImageSet apply_corruption(const ImageSet& images, const Corruption& corruption, std::uint64_t seed);

// ---------------------------------------------------------------------------
// CIFAR-10 binary ingestion

const std::vector<std::string>& cifar10_class_names();

// One CIFAR-10 binary batch file: 3073-byte records (label, 1024 R, 1024 G,
// 1024 B). Images are converted to grayscale and area-downsampled to 16x16.
ImageSet load_cifar10_file(const std::filesystem::path& file, std::string split);
// Reads data_batch_{1..5}.bin (if present) and test_batch.bin from `dir`.
Dataset load_cifar10(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Batches

// Images a test-time method may see.
struct UnlabeledBatch {
  Tensor images;  // [B, H, W, C]
  std::size_t size() const { return images.shape()[0]; }
};

struct Batch {
  UnlabeledBatch inputs;
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // positions in the source ImageSet

  std::size_t size() const { return labels.size(); }
};

// Deterministic shuffled partition of [0, n) into batches of `batch_size`;
// the final short batch is kept unless `drop_last`.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    bool drop_last);
Batch make_batch(const ImageSet& images, std::span<const std::size_t> indices);
std::vector<Batch> batch_iter(const ImageSet& images, std::size_t batch_size, std::uint64_t seed, bool drop_last);

}  // namespace watt
