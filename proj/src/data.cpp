#include "watt/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "watt/io.hpp"
#include "watt/random.hpp"

namespace watt {

std::span<const double> ImageSet::image(std::size_t i) const {
  return std::span<const double>(pixels).subspan(i * image_numel(), image_numel());
}

Tensor ImageSet::images(std::span<const std::size_t> indices) const {
  std::vector<double> out;
  out.reserve(indices.size() * image_numel());
  for (auto i : indices) {
    if (i >= size()) throw std::out_of_range("ImageSet: index " + std::to_string(i) + " >= " + std::to_string(size()));
    const auto img = image(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  return Tensor::from({indices.size(), height, width, channels}, std::move(out));
}

std::vector<std::size_t> ImageSet::class_histogram(std::size_t num_classes) const {
  std::vector<std::size_t> hist(num_classes, 0);
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) throw std::out_of_range("class_histogram: label out of range");
    ++hist[static_cast<std::size_t>(l)];
  }
  return hist;
}

// ---------------------------------------------------------------------------
// Synthetic shapes

const std::vector<std::string>& synthetic_class_names() {
  static const std::vector<std::string> names = {"stripe", "column", "diagonal", "disk",
                                                 "ring",   "checker", "cross",   "square"};
  return names;
}

namespace {

constexpr std::size_t kSide = 16;

double smooth_step(double d) { return std::clamp(0.5 - d, 0.0, 1.0); }

// Pattern intensity in [0, 1] for one class with jitter drawn from rng.
std::vector<double> render_pattern(int label, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> p(kSide * kSide, 0.0);
  const double cx = 7.5 + (u(rng) - 0.5) * 3.0;
  const double cy = 7.5 + (u(rng) - 0.5) * 3.0;
  const double phase = u(rng) * 2.0 * std::numbers::pi;
  for (std::size_t y = 0; y < kSide; ++y) {
    for (std::size_t x = 0; x < kSide; ++x) {
      const double fx = static_cast<double>(x);
      const double fy = static_cast<double>(y);
      double v = 0.0;
      switch (label) {
        case 0:
        case 1:
        case 2: {
          const double coord = label == 0 ? fy : label == 1 ? fx : (fx + fy) / std::numbers::sqrt2;
          v = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * coord / 5.0 + phase);
          break;
        }
        case 3: {
          const double r = std::hypot(fx - cx, fy - cy);
          v = smooth_step(r - 4.5);
          break;
        }
        case 4: {
          const double r = std::hypot(fx - cx, fy - cy);
          v = smooth_step(std::abs(r - 5.0) - 1.0);
          break;
        }
        case 5: {
          const auto cell = [&](double c) { return static_cast<long>(std::floor((c + phase) / 4.0)); };
          v = ((cell(fx) + cell(fy)) % 2 == 0) ? 1.0 : 0.0;
          break;
        }
        case 6: {
          const double dx = std::abs(fx - cx);
          const double dy = std::abs(fy - cy);
          v = std::max(smooth_step(dx - 1.5), smooth_step(dy - 1.5));
          break;
        }
        case 7: {
          const double d = std::max(std::abs(fx - cx), std::abs(fy - cy));
          v = smooth_step(std::abs(d - 5.0) - 1.0);
          break;
        }
        default:
          throw std::logic_error("render_pattern: unknown class");
      }
      p[y * kSide + x] = v;
    }
  }
  return p;
}

ImageSet generate_split(std::uint64_t seed, const std::string& split, std::size_t count, std::size_t num_classes) {
  ImageSet set;
  set.split = split;
  set.pixels.reserve(count * kSide * kSide);
  Rng rng = make_rng(seed, "data/" + split);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> grain(0.0, 0.02);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % num_classes);
    const double background = 0.15 + 0.25 * u(rng);
    const double amplitude = 0.35 + 0.35 * u(rng);
    const auto pattern = render_pattern(label, rng);
    for (double v : pattern) set.pixels.push_back(std::clamp(background + amplitude * v + grain(rng), 0.0, 1.0));
    set.labels.push_back(label);
  }
  return set;
}

}  // namespace

Dataset generate_dataset(std::uint64_t seed, const SyntheticConfig& config) {
  const auto& names = synthetic_class_names();
  if (config.train_size % names.size() != 0 || config.test_size % names.size() != 0) {
    throw std::invalid_argument("generate_dataset: split sizes must be multiples of the class count");
  }
  Dataset ds;
  ds.class_names = names;
  ds.seed = seed;
  ds.source = "synthetic";
  ds.train = generate_split(seed, "train", config.train_size, names.size());
  ds.test = generate_split(seed, "test", config.test_size, names.size());
  return ds;
}

std::uint64_t content_hash(const ImageSet& images) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  for (double p : images.pixels) mix(std::bit_cast<std::uint64_t>(p));
  for (int l : images.labels) mix(static_cast<std::uint64_t>(l));
  return h;
}

nlohmann::json dataset_manifest(const Dataset& dataset) {
  return {{"source", dataset.source},
          {"seed", dataset.seed},
          {"class_names", dataset.class_names},
          {"train_size", dataset.train.size()},
          {"test_size", dataset.test.size()},
          {"train_hash", content_hash(dataset.train)},
          {"test_hash", content_hash(dataset.test)}};
}

// ---------------------------------------------------------------------------
// Corruptions

std::string_view to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::gaussian_noise: return "gaussian_noise";
    case CorruptionKind::shot_noise: return "shot_noise";
    case CorruptionKind::impulse_noise: return "impulse_noise";
    case CorruptionKind::box_blur: return "box_blur";
    case CorruptionKind::contrast: return "contrast";
    case CorruptionKind::brightness: return "brightness";
    case CorruptionKind::pixelate: return "pixelate";
  }
  return "unknown";
}

CorruptionKind corruption_from_string(std::string_view name) {
  for (auto k : kAllCorruptions) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown corruption kind '" + std::string(name) + "'");
}

double severity_parameter(const Corruption& c) {
  if (c.severity < 1 || c.severity > 5) {
    throw std::invalid_argument("corruption severity must be in 1..5, got " + std::to_string(c.severity));
  }
  const auto i = static_cast<std::size_t>(c.severity - 1);
  switch (c.kind) {
    case CorruptionKind::gaussian_noise: return kGaussianSigma[i];
    case CorruptionKind::shot_noise: return kShotScale[i];
    case CorruptionKind::impulse_noise: return kImpulseAmount[i];
    case CorruptionKind::box_blur: return kBlurPasses[i];
    case CorruptionKind::contrast: return kContrastFactor[i];
    case CorruptionKind::brightness: return kBrightnessDelta[i];
    case CorruptionKind::pixelate: return kPixelateGrid[i];
  }
  throw std::invalid_argument("unknown corruption kind");
}

namespace {

void box_blur_once(std::span<double> img, std::size_t h, std::size_t w, std::size_t ch) {
  std::vector<double> src(img.begin(), img.end());
  auto at = [&](long y, long x, std::size_t c) {
    y = std::clamp<long>(y, 0, static_cast<long>(h) - 1);
    x = std::clamp<long>(x, 0, static_cast<long>(w) - 1);
    return src[(static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)) * ch + c];
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < ch; ++c) {
        double s = 0.0;
        for (long dy = -1; dy <= 1; ++dy)
          for (long dx = -1; dx <= 1; ++dx) s += at(static_cast<long>(y) + dy, static_cast<long>(x) + dx, c);
        img[(y * w + x) * ch + c] = s / 9.0;
      }
}

// Area-average onto a grid x grid lattice, then nearest-neighbour back up.
void pixelate(std::span<double> img, std::size_t h, std::size_t w, std::size_t ch, std::size_t grid) {
  std::vector<double> small(grid * grid * ch, 0.0);
  std::vector<double> weight(grid * grid, 0.0);
  const double sy = static_cast<double>(grid) / static_cast<double>(h);
  const double sx = static_cast<double>(grid) / static_cast<double>(w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      // Pixel footprint in the small grid: [y*sy, (y+1)*sy) x [x*sx, (x+1)*sx).
      const double y0 = static_cast<double>(y) * sy;
      const double y1 = y0 + sy;
      const double x0 = static_cast<double>(x) * sx;
      const double x1 = x0 + sx;
      for (auto gy = static_cast<std::size_t>(y0); gy < grid && static_cast<double>(gy) < y1; ++gy) {
        const double oy = std::min(y1, static_cast<double>(gy + 1)) - std::max(y0, static_cast<double>(gy));
        for (auto gx = static_cast<std::size_t>(x0); gx < grid && static_cast<double>(gx) < x1; ++gx) {
          const double ox = std::min(x1, static_cast<double>(gx + 1)) - std::max(x0, static_cast<double>(gx));
          const double a = oy * ox;
          if (a <= 0.0) continue;
          weight[gy * grid + gx] += a;
          for (std::size_t c = 0; c < ch; ++c) small[(gy * grid + gx) * ch + c] += a * img[(y * w + x) * ch + c];
        }
      }
    }
  }
  for (std::size_t g = 0; g < grid * grid; ++g)
    for (std::size_t c = 0; c < ch; ++c) small[g * ch + c] /= weight[g];
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t gy = y * grid / h;
      const std::size_t gx = x * grid / w;
      for (std::size_t c = 0; c < ch; ++c) img[(y * w + x) * ch + c] = small[(gy * grid + gx) * ch + c];
    }
}

}  // namespace

ImageSet corrupt_with_parameter(const ImageSet& images, CorruptionKind kind, double parameter, std::uint64_t seed) {
  ImageSet out = images;
  out.split = images.split + "/" + std::string(to_string(kind));
  Rng rng = make_rng(seed, "corruption/" + std::string(to_string(kind)));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t n = images.image_numel();
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::span<double> img(out.pixels.data() + i * n, n);
    switch (kind) {
      case CorruptionKind::gaussian_noise: {
        std::normal_distribution<double> noise(0.0, parameter);
        for (auto& p : img) p += noise(rng);
        break;
      }
      case CorruptionKind::shot_noise:
        for (auto& p : img) {
          const double rate = std::max(p, 0.0) * parameter;
          if (rate > 0.0) {
            std::poisson_distribution<long> count(rate);
            p = static_cast<double>(count(rng)) / parameter;
          }
        }
        break;
      case CorruptionKind::impulse_noise:
        for (auto& p : img) {
          if (u(rng) < parameter) p = u(rng) < 0.5 ? 0.0 : 1.0;
        }
        break;
      case CorruptionKind::box_blur:
        for (int pass = 0; pass < static_cast<int>(parameter); ++pass) {
          box_blur_once(img, images.height, images.width, images.channels);
        }
        break;
      case CorruptionKind::contrast: {
        double mu = 0.0;
        for (double p : img) mu += p;
        mu /= static_cast<double>(n);
        for (auto& p : img) p = (p - mu) * parameter + mu;
        break;
      }
      case CorruptionKind::brightness:
        for (auto& p : img) p += parameter;
        break;
      case CorruptionKind::pixelate: {
        const auto grid = static_cast<std::size_t>(parameter);
        if (grid == 0 || grid > images.height) throw std::invalid_argument("pixelate: grid size out of range");
        pixelate(img, images.height, images.width, images.channels, grid);
        break;
      }
    }
    for (auto& p : img) p = std::clamp(p, 0.0, 1.0);
  }
  return out;
}

ImageSet apply_corruption(const ImageSet& images, const Corruption& corruption, std::uint64_t seed) {
  return corrupt_with_parameter(images, corruption.kind, severity_parameter(corruption), seed);
}

// ---------------------------------------------------------------------------
// CIFAR-10

const std::vector<std::string>& cifar10_class_names() {
  static const std::vector<std::string> names = {"airplane", "automobile", "bird",  "cat",  "deer",
                                                 "dog",      "frog",       "horse", "ship", "truck"};
  return names;
}

ImageSet load_cifar10_file(const std::filesystem::path& file, std::string split) {
  constexpr std::size_t kRecord = 3073;
  constexpr std::size_t kPlane = 1024;
  const std::string bytes = read_file(file);
  if (bytes.empty() || bytes.size() % kRecord != 0) {
    throw std::runtime_error("CIFAR-10 file '" + file.string() + "' has size " + std::to_string(bytes.size()) +
                             ", not a multiple of 3073-byte records");
  }
  ImageSet set;
  set.split = std::move(split);
  const std::size_t count = bytes.size() / kRecord;
  set.pixels.reserve(count * 256);
  for (std::size_t r = 0; r < count; ++r) {
    const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data() + r * kRecord);
    if (rec[0] > 9) throw std::runtime_error("CIFAR-10 file '" + file.string() + "' has label " + std::to_string(rec[0]));
    set.labels.push_back(rec[0]);
    const unsigned char* red = rec + 1;
    const unsigned char* green = red + kPlane;
    const unsigned char* blue = green + kPlane;
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t i = (2 * y + dy) * 32 + 2 * x + dx;
            acc += 0.299 * red[i] + 0.587 * green[i] + 0.114 * blue[i];
          }
        set.pixels.push_back(std::clamp(acc / (4.0 * 255.0), 0.0, 1.0));
      }
  }
  return set;
}

Dataset load_cifar10(const std::filesystem::path& dir) {
  const auto test_file = dir / "test_batch.bin";
  if (!std::filesystem::exists(test_file)) throw std::runtime_error("CIFAR-10: missing '" + test_file.string() + "'");
  Dataset ds;
  ds.class_names = cifar10_class_names();
  ds.source = "cifar10";
  ds.test = load_cifar10_file(test_file, "test");
  ds.train.split = "train";
  for (int b = 1; b <= 5; ++b) {
    const auto f = dir / ("data_batch_" + std::to_string(b) + ".bin");
    if (!std::filesystem::exists(f)) continue;
    ImageSet part = load_cifar10_file(f, "train");
    ds.train.pixels.insert(ds.train.pixels.end(), part.pixels.begin(), part.pixels.end());
    ds.train.labels.insert(ds.train.labels.end(), part.labels.begin(), part.labels.end());
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Batches

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    bool drop_last) {
  if (batch_size == 0) throw std::invalid_argument("batch_indices: batch size must be >= 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = make_rng(seed, "shuffle");
  // Explicit Fisher-Yates so the order does not depend on std::shuffle's implementation.
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    if (drop_last && end - start < batch_size) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

Batch make_batch(const ImageSet& images, std::span<const std::size_t> indices) {
  Batch b;
  b.inputs.images = images.images(indices);
  b.indices.assign(indices.begin(), indices.end());
  for (auto i : indices) b.labels.push_back(images.labels[i]);
  return b;
}

std::vector<Batch> batch_iter(const ImageSet& images, std::size_t batch_size, std::uint64_t seed, bool drop_last) {
  std::vector<Batch> out;
  for (const auto& idx : batch_indices(images.size(), batch_size, seed, drop_last)) out.push_back(make_batch(images, idx));
  return out;
}

}  // namespace watt
