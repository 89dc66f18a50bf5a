#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualnet/rng.hpp"

namespace dualnet {

/// Images at native resolution, pixels in [0, 1], CHW per image.
struct ImageSet {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t count() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
  const float* image(std::size_t i) const { return pixels.data() + i * image_size(); }
};

/// A labelled image source with a train and a test split. Labels are
/// 0..num_classes-1; `label_base` offsets them into a stream-wide label space
/// so that classes of different sources never collide.
struct Source {
  std::string name;
  int label_base = 0;
  int num_classes = 10;
  ImageSet train;
  ImageSet test;
};

class DatasetMissing : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- IDX ----------------------------------------------------------------

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

/// Reads a whole file, transparently inflating gzip content.
inline std::vector<unsigned char> read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw DatasetMissing("cannot open " + path.string());
  std::vector<unsigned char> out;
  std::array<unsigned char, 1 << 16> buf{};
  int got = 0;
  while ((got = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) out.insert(out.end(), buf.data(), buf.data() + got);
  const bool failed = got < 0;
  gzclose(f);
  if (failed) throw FormatError("decompression failed for " + path.string());
  return out;
}

inline std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

inline std::filesystem::path find_variant(const std::filesystem::path& dir, const std::string& stem) {
  for (const auto& candidate : {stem, stem + ".gz"}) {
    if (std::filesystem::exists(dir / candidate)) return dir / candidate;
  }
  // torchvision / some mirrors use '.' instead of '-' before idx
  std::string dotted = stem;
  if (auto pos = dotted.find("-idx"); pos != std::string::npos) dotted[pos] = '.';
  for (const auto& candidate : {dotted, dotted + ".gz"}) {
    if (std::filesystem::exists(dir / candidate)) return dir / candidate;
  }
  throw DatasetMissing("missing " + (dir / stem).string() + "[.gz]");
}

}  // namespace detail

/// Parses IDX image bytes (magic 0x00000803, big-endian n/rows/cols).
inline ImageSet parse_idx_images(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 16) throw FormatError("IDX image file too short");
  if (detail::be32(bytes.data()) != kIdxImageMagic) throw FormatError("bad IDX image magic");
  ImageSet set;
  const std::size_t n = detail::be32(bytes.data() + 4);
  set.height = detail::be32(bytes.data() + 8);
  set.width = detail::be32(bytes.data() + 12);
  if (bytes.size() != 16 + n * set.height * set.width) throw FormatError("IDX image payload size mismatch");
  set.pixels.resize(n * set.height * set.width);
  for (std::size_t i = 0; i < set.pixels.size(); ++i) set.pixels[i] = static_cast<float>(bytes[16 + i]) / 255.0f;
  set.labels.assign(n, 0);
  return set;
}

inline std::vector<int> parse_idx_labels(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 8) throw FormatError("IDX label file too short");
  if (detail::be32(bytes.data()) != kIdxLabelMagic) throw FormatError("bad IDX label magic");
  const std::size_t n = detail::be32(bytes.data() + 4);
  if (bytes.size() != 8 + n) throw FormatError("IDX label payload size mismatch");
  return std::vector<int>(bytes.begin() + 8, bytes.end());
}

inline ImageSet load_idx_pair(const std::filesystem::path& images, const std::filesystem::path& labels) {
  ImageSet set = parse_idx_images(detail::read_maybe_gzip(images));
  set.labels = parse_idx_labels(detail::read_maybe_gzip(labels));
  if (set.labels.size() * set.image_size() != set.pixels.size()) throw FormatError("IDX image/label count mismatch");
  return set;
}

/// MNIST-layout directory: {train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz].
inline Source load_mnist_dir(const std::filesystem::path& dir, std::string name, int label_base) {
  Source s;
  s.name = std::move(name);
  s.label_base = label_base;
  s.train = load_idx_pair(detail::find_variant(dir, "train-images-idx3-ubyte"),
                          detail::find_variant(dir, "train-labels-idx1-ubyte"));
  s.test = load_idx_pair(detail::find_variant(dir, "t10k-images-idx3-ubyte"),
                         detail::find_variant(dir, "t10k-labels-idx1-ubyte"));
  return s;
}

// ---- CIFAR-10 binary ----------------------------------------------------

inline constexpr std::size_t kCifarRecord = 3073;

inline void append_cifar_batch(const std::vector<unsigned char>& bytes, ImageSet& set) {
  if (bytes.size() % kCifarRecord != 0) throw FormatError("CIFAR batch is not a multiple of 3073 bytes");
  set.channels = 3;
  set.height = set.width = 32;
  for (std::size_t off = 0; off < bytes.size(); off += kCifarRecord) {
    if (bytes[off] > 9) throw FormatError("CIFAR label byte out of range");
    set.labels.push_back(bytes[off]);
    for (std::size_t k = 1; k < kCifarRecord; ++k) set.pixels.push_back(static_cast<float>(bytes[off + k]) / 255.0f);
  }
}

inline Source load_cifar10_dir(const std::filesystem::path& dir, int label_base) {
  Source s;
  s.name = "cifar10";
  s.label_base = label_base;
  for (int b = 1; b <= 5; ++b) {
    append_cifar_batch(detail::read_maybe_gzip(detail::find_variant(dir, "data_batch_" + std::to_string(b) + ".bin")),
                       s.train);
  }
  append_cifar_batch(detail::read_maybe_gzip(detail::find_variant(dir, "test_batch.bin")), s.test);
  return s;
}

// ---- synthetic sources --------------------------------------------------

namespace detail {

using Painter = void (*)(float* img, std::size_t size, int cls, Rng& rng);

/// Oriented sinusoidal gratings: class = (orientation in 5) x (frequency in 2).
inline void paint_texture(float* img, std::size_t size, int cls, Rng& rng) {
  const double angle = (cls % 5) * std::numbers::pi / 5 + rng.uniform(-0.08, 0.08);
  const double freq = (cls / 5 == 0 ? 2.5 : 5.0) * rng.uniform(0.9, 1.1);
  const double phase = rng.uniform(0, 2 * std::numbers::pi);
  const double contrast = rng.uniform(0.3, 0.5);
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (ca * x + sa * y) / static_cast<double>(size);
      const double v = 0.5 + contrast * std::sin(2 * std::numbers::pi * freq * u + phase) + 0.05 * rng.normal();
      img[y * size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
}

/// Filled or outlined geometric shapes at a random position and scale.
inline void paint_shape(float* img, std::size_t size, int cls, Rng& rng) {
  const double s = static_cast<double>(size);
  const double cx = s * rng.uniform(0.4, 0.6), cy = s * rng.uniform(0.4, 0.6);
  const double r = s * rng.uniform(0.22, 0.32);
  const double ink = rng.uniform(0.7, 1.0);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = (x + 0.5 - cx) / r, dy = (y + 0.5 - cy) / r;
      const double rad = std::sqrt(dx * dx + dy * dy);
      const double cheb = std::max(std::abs(dx), std::abs(dy));
      bool on = false;
      switch (cls) {
        case 0: on = rad < 1.0; break;                                   // disc
        case 1: on = rad < 1.0 && rad > 0.6; break;                      // ring
        case 2: on = cheb < 0.9; break;                                  // square
        case 3: on = cheb < 0.9 && cheb > 0.55; break;                   // frame
        case 4: on = dy > -0.9 && dy < 0.9 && std::abs(dx) < (dy + 0.9) / 2; break;  // triangle
        case 5: on = (std::abs(dx) < 0.25 || std::abs(dy) < 0.25) && cheb < 1.0; break;  // plus
        case 6: on = (std::abs(dx - dy) < 0.3 || std::abs(dx + dy) < 0.3) && cheb < 1.0; break;  // cross
        case 7: on = std::abs(dy) < 0.3 && std::abs(dx) < 1.1; break;    // horizontal bar
        case 8: on = std::abs(dx) < 0.3 && std::abs(dy) < 1.1; break;    // vertical bar
        default: on = std::abs(dx) + std::abs(dy) < 1.0; break;          // diamond
      }
      const double v = (on ? ink : 0.0) + 0.04 * rng.normal();
      img[y * size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
}

/// Constellations of Gaussian blobs; the class fixes blob count and layout.
inline void paint_blobs(float* img, std::size_t size, int cls, Rng& rng) {
  const double s = static_cast<double>(size);
  const int count = 1 + cls % 5;
  const bool ring = cls >= 5;
  const double jitter = 0.04 * s;
  std::fill_n(img, size * size, 0.0f);
  for (int b = 0; b < count; ++b) {
    double bx, by;
    if (ring) {
      const double a = 2 * std::numbers::pi * b / count;
      bx = s / 2 + 0.28 * s * std::cos(a);
      by = s / 2 + 0.28 * s * std::sin(a);
    } else {
      bx = s * (b + 1) / (count + 1);
      by = s / 2;
    }
    bx += rng.uniform(-jitter, jitter);
    by += rng.uniform(-jitter, jitter);
    const double sigma = 0.07 * s * rng.uniform(0.85, 1.15);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
        img[y * size + x] += static_cast<float>(std::exp(-d2 / (2 * sigma * sigma)));
      }
  }
  for (std::size_t i = 0; i < size * size; ++i) {
    img[i] = static_cast<float>(std::clamp(img[i] + 0.04 * rng.normal(), 0.0, 1.0));
  }
}

inline ImageSet paint_set(Painter paint, std::size_t per_class, std::size_t size, std::uint64_t seed,
                          std::string_view split) {
  ImageSet set;
  set.channels = 1;
  set.height = set.width = size;
  set.pixels.resize(10 * per_class * size * size);
  for (std::size_t i = 0; i < 10 * per_class; ++i) {
    const int cls = static_cast<int>(i % 10);
    Rng rng(derive_seed(seed, split, i));
    paint(set.pixels.data() + i * size * size, size, cls, rng);
    set.labels.push_back(cls);
  }
  return set;
}

}  // namespace detail

struct SyntheticCounts {
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 250;
};

inline Source synthetic_source(const std::string& name, int label_base, std::uint64_t seed, SyntheticCounts counts = {},
                               std::size_t size = 32) {
  detail::Painter painter = nullptr;
  if (name == "textures") painter = detail::paint_texture;
  else if (name == "shapes") painter = detail::paint_shape;
  else if (name == "blobs") painter = detail::paint_blobs;
  else throw std::invalid_argument("unknown synthetic source '" + name + "'");
  Source s;
  s.name = name;
  s.label_base = label_base;
  const std::uint64_t root = derive_seed(seed, name);
  s.train = detail::paint_set(painter, counts.train_per_class, size, root, "train");
  s.test = detail::paint_set(painter, counts.test_per_class, size, root, "test");
  return s;
}

/// Tints grayscale digits: colored ink on a colored background.
inline ImageSet colorize(const ImageSet& gray) {
  static constexpr float ink[3] = {1.0f, 0.45f, 0.2f};
  static constexpr float background[3] = {0.05f, 0.15f, 0.35f};
  ImageSet out;
  out.channels = 3;
  out.height = gray.height;
  out.width = gray.width;
  out.labels = gray.labels;
  const std::size_t plane = gray.height * gray.width;
  out.pixels.resize(gray.count() * 3 * plane);
  for (std::size_t i = 0; i < gray.count(); ++i)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const float v = gray.pixels[i * plane + p];
        out.pixels[(i * 3 + c) * plane + p] = v * ink[c] + (1 - v) * background[c];
      }
  return out;
}

inline std::filesystem::path default_data_root() {
  if (const char* env = std::getenv("DUALNET_DATA"); env && *env) return env;
  return "data";
}

/// Named sources, loaded lazily. File-backed: mnist, fashion_mnist, cifar10,
/// color_mnist (derived from mnist). Synthetic: textures, shapes, blobs.
class SourceRegistry {
 public:
  explicit SourceRegistry(std::filesystem::path root = default_data_root(), std::uint64_t synthetic_seed = 0,
                          SyntheticCounts counts = {})
      : root_(std::move(root)), seed_(synthetic_seed), counts_(counts) {}

  const std::filesystem::path& root() const { return root_; }

  static const std::vector<std::string>& known() {
    static const std::vector<std::string> names = {"mnist",  "fashion_mnist", "cifar10", "color_mnist",
                                                   "textures", "shapes",      "blobs"};
    return names;
  }

  bool available(const std::string& name) {
    try {
      get(name);
      return true;
    } catch (const DatasetMissing&) {
      return false;
    }
  }

  const Source& get(const std::string& name) {
    if (auto it = cache_.find(name); it != cache_.end()) return *it->second;
    auto src = std::make_unique<Source>(load(name));
    return *cache_.emplace(name, std::move(src)).first->second;
  }

 private:
  Source load(const std::string& name) {
    const int base = label_base(name);
    try {
      if (name == "mnist") return load_mnist_dir(root_ / "mnist", "mnist", base);
      if (name == "fashion_mnist") return load_mnist_dir(root_ / "fashion_mnist", "fashion_mnist", base);
      if (name == "cifar10") return load_cifar10_dir(root_ / "cifar10", base);
    } catch (const DatasetMissing& e) {
      throw DatasetMissing(std::string(e.what()) + "\nhint: place the " + name + " files under " +
                           (root_ / name).string() + " (set DUALNET_DATA to change the root); for MNIST, " +
                           "tools/prepare_mnist_subset.py writes a 5k-image subset");
    }
    if (name == "color_mnist") {
      Source s = get("mnist");
      s.name = name;
      s.label_base = base;
      s.train = colorize(s.train);
      s.test = colorize(s.test);
      return s;
    }
    return synthetic_source(name, base, seed_, counts_);
  }

  static int label_base(const std::string& name) {
    const auto& names = known();
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw std::invalid_argument("unknown dataset '" + name + "'");
    // color_mnist keeps digit semantics, so it shares mnist's label space
    if (name == "color_mnist") return 0;
    return 100 * static_cast<int>(it - names.begin());
  }

  std::filesystem::path root_;
  std::uint64_t seed_;
  SyntheticCounts counts_;
  std::map<std::string, std::unique_ptr<Source>> cache_;
};

}  // namespace dualnet
