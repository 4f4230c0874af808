#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "jscc/error.hpp"
#include "jscc/image_io.hpp"
#include "jscc/rng.hpp"
#include "jscc/tensor.hpp"

namespace jscc {

using SourceImage = Tensor<float>;

/// p -> 2p/255 - 1
inline float normalize_pixel(std::uint8_t p) { return float(2.0 * p / 255.0 - 1.0); }

/// Inverse of normalize_pixel, rounding and clamping to [0, 255].
inline std::uint8_t denormalize_pixel(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::round((v + 1.0) * 127.5), 0.0, 255.0));
}

/// Channel-first bytes (C*H*W) to a (1, C, H, W) image in [-1, 1].
inline SourceImage normalize(std::span<const std::uint8_t> chw, int channels, int height, int width) {
  if (chw.size() != std::size_t(channels) * height * width) {
    throw ConfigError("normalize: byte count does not match (C, H, W)");
  }
  SourceImage img({1, channels, height, width});
  for (std::size_t i = 0; i < chw.size(); ++i) img[i] = normalize_pixel(chw[i]);
  return img;
}

inline SourceImage normalize(const RgbImage& rgb) {
  SourceImage img({1, 3, rgb.height, rgb.width});
  for (int y = 0; y < rgb.height; ++y)
    for (int x = 0; x < rgb.width; ++x)
      for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = normalize_pixel(rgb.pixels[(std::size_t(y) * rgb.width + x) * 3 + c]);
  return img;
}

template <typename T>
std::vector<std::uint8_t> denormalize(const Tensor<T>& img) {
  std::vector<std::uint8_t> out(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = denormalize_pixel(double(img[i]));
  return out;
}

/// First batch item as an interleaved RGB raster.
template <typename T>
RgbImage to_rgb(const Tensor<T>& img) {
  const Shape s = img.shape();
  if (s.c != 3) throw ConfigError("to_rgb expects three channels");
  RgbImage out{s.w, s.h, std::vector<std::uint8_t>(std::size_t(s.h) * s.w * 3)};
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      for (int c = 0; c < 3; ++c) out.pixels[(std::size_t(y) * s.w + x) * 3 + c] = denormalize_pixel(img.at(0, c, y, x));
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

template <typename T>
Tensor<T> crop(const Tensor<T>& img, int top, int left, int height, int width) {
  const Shape s = img.shape();
  if (top < 0 || left < 0 || top + height > s.h || left + width > s.w) {
    throw ConfigError("crop window exceeds the image");
  }
  Tensor<T> out({s.n, s.c, height, width});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < height; ++y)
        std::copy_n(&img.at(n, c, top + y, left), width, &out.at(n, c, y, 0));
  return out;
}

/// Uniformly positioned size x size crop.
template <typename T>
Tensor<T> random_crop(const Tensor<T>& img, int size, Rng& rng) {
  const Shape s = img.shape();
  if (size <= 0 || s.h < size || s.w < size) {
    throw ConfigError("random_crop: image " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                      " is smaller than the crop size " + std::to_string(size));
  }
  const int top = rng.integer(0, s.h - size);
  const int left = rng.integer(0, s.w - size);
  return crop(img, top, left, size, size);
}

/// Mirror along the width axis.
template <typename T>
Tensor<T> hflip(const Tensor<T>& img) {
  Tensor<T> out(img.shape());
  const Shape s = img.shape();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) out.at(n, c, y, x) = img.at(n, c, y, s.w - 1 - x);
  return out;
}

template <typename T>
Tensor<T> random_hflip(const Tensor<T>& img, Rng& rng, double p = 0.5) {
  return rng.bernoulli(p) ? hflip(img) : img;
}

// ---------------------------------------------------------------------------
// Synthetic images

/// Seeded smooth random field: linear colour ramp, low-frequency sinusoids
/// and a few flat-coloured ellipses, quantized to the 8-bit lattice.
inline SourceImage synthetic_image(std::uint64_t seed, std::uint64_t index, int height = 32, int width = 32) {
  Rng rng(seed, {0x73796e, index});
  std::vector<double> img(std::size_t(3) * height * width);
  auto at = [&](int c, int y, int x) -> double& { return img[(std::size_t(c) * height + y) * width + x]; };
  const double sx = width > 1 ? 1.0 / (width - 1) : 0.0, sy = height > 1 ? 1.0 / (height - 1) : 0.0;

  double ramp[3][3];
  for (auto& r : ramp)
    for (auto& v : r) v = rng.uniform(-1, 1);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) at(c, y, x) = ramp[c][0] + ramp[c][1] * x * sx + ramp[c][2] * y * sy;

  const int waves = rng.integer(1, 3);
  for (int k = 0; k < waves; ++k) {
    const double fx = rng.uniform(0, 3), fy = rng.uniform(0, 3), phase = rng.uniform(0, 2 * std::numbers::pi);
    double amp[3];
    for (auto& a : amp) a = rng.uniform(0, 0.4);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double s = std::sin(2 * std::numbers::pi * (fx * x * sx + fy * y * sy) + phase);
        for (int c = 0; c < 3; ++c) at(c, y, x) += amp[c] * s;
      }
  }

  const int blobs = rng.integer(1, 4);
  for (int k = 0; k < blobs; ++k) {
    const double cx = rng.uniform(0, 1), cy = rng.uniform(0, 1);
    const double rx = rng.uniform(0.08, 0.35), ry = rng.uniform(0.08, 0.35);
    double col[3];
    for (auto& v : col) v = rng.uniform(-1, 1);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double dx = (x * sx - cx) / rx, dy = (y * sy - cy) / ry;
        if (dx * dx + dy * dy < 1.0)
          for (int c = 0; c < 3; ++c) at(c, y, x) = col[c];
      }
  }

  SourceImage out({1, 3, height, width});
  for (std::size_t i = 0; i < img.size(); ++i) {
    out[i] = normalize_pixel(denormalize_pixel(std::clamp(img[i], -1.0, 1.0)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

enum class DatasetSource { cifar10_binary, image_folder, synthetic };
enum class Split { train, test };

inline DatasetSource parse_dataset_source(const std::string& s) {
  if (s == "cifar10_binary" || s == "cifar10") return DatasetSource::cifar10_binary;
  if (s == "image_folder" || s == "folder") return DatasetSource::image_folder;
  if (s == "synthetic") return DatasetSource::synthetic;
  throw ConfigError("unknown dataset source '" + s + "' (expected cifar10_binary, image_folder or synthetic)");
}
inline std::string to_string(DatasetSource s) {
  switch (s) {
    case DatasetSource::cifar10_binary: return "cifar10_binary";
    case DatasetSource::image_folder: return "image_folder";
    case DatasetSource::synthetic: return "synthetic";
  }
  return "?";
}
inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "' (expected train or test)");
}

struct DatasetConfig {
  DatasetSource source = DatasetSource::synthetic;
  Split split = Split::test;
  /// File or directory (cifar10_binary) or folder (image_folder).
  std::string path;
  /// Maximum number of images to keep (0 = all).
  int count = 0;
  /// Applied by sample(): random square crop of this size, then optional flip.
  std::optional<int> crop_size;
  bool hflip = false;
  /// Synthetic source only.
  std::uint64_t seed = 0;
  int height = 32;
  int width = 32;
};

inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;

/// Images and optional class labels held in memory; emitted channel-first in
/// [-1, 1]. get() is deterministic; sample() applies the augmentation chain.
class DatasetHandle {
 public:
  DatasetHandle() = default;
  DatasetHandle(DatasetConfig config, std::vector<SourceImage> images, std::vector<int> labels = {})
      : config_(std::move(config)), images_(std::move(images)), labels_(std::move(labels)) {}

  const DatasetConfig& config() const { return config_; }
  std::size_t size() const { return images_.size(); }
  bool empty() const { return images_.empty(); }
  const SourceImage& get(std::size_t i) const { return images_.at(i); }
  const std::vector<int>& labels() const { return labels_; }
  std::size_t skipped() const { return skipped_; }
  void set_skipped(std::size_t n) { skipped_ = n; }

  SourceImage sample(std::size_t i, Rng& rng) const {
    SourceImage img = images_.at(i);
    if (config_.crop_size) img = random_crop(img, *config_.crop_size, rng);
    if (config_.hflip) img = random_hflip(img, rng);
    return img;
  }

 private:
  DatasetConfig config_;
  std::vector<SourceImage> images_;
  std::vector<int> labels_;
  std::size_t skipped_ = 0;
};

/// Parses the standard CIFAR-10 binary layout: records of one label byte
/// followed by 3072 channel-first pixel bytes.
inline void parse_cifar10(const std::vector<std::uint8_t>& bytes, const std::string& path,
                          std::vector<SourceImage>& images, std::vector<int>& labels, std::size_t limit) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % kCifarRecordBytes;
    throw DataError("malformed CIFAR-10 file " + path + ": incomplete record at byte offset " + std::to_string(offset));
  }
  for (std::size_t off = 0; off < bytes.size(); off += kCifarRecordBytes) {
    if (limit && images.size() >= limit) return;
    const int label = bytes[off];
    if (label > 9) {
      throw DataError("malformed CIFAR-10 file " + path + ": label " + std::to_string(label) + " at byte offset " +
                      std::to_string(off));
    }
    labels.push_back(label);
    images.push_back(normalize(std::span<const std::uint8_t>(bytes.data() + off + 1, kCifarRecordBytes - 1), 3, 32, 32));
  }
}

inline DatasetHandle load_dataset(const DatasetConfig& config) {
  namespace fs = std::filesystem;
  const std::size_t limit = config.count > 0 ? std::size_t(config.count) : 0;
  std::vector<SourceImage> images;
  std::vector<int> labels;

  switch (config.source) {
    case DatasetSource::synthetic: {
      if (config.count <= 0) throw ConfigError("synthetic dataset needs a positive count");
      const std::uint64_t split_key = config.split == Split::train ? 1 : 2;
      for (int i = 0; i < config.count; ++i) {
        images.push_back(synthetic_image(mix64(config.seed ^ mix64(split_key)), std::uint64_t(i), config.height, config.width));
      }
      return DatasetHandle(config, std::move(images));
    }
    case DatasetSource::cifar10_binary: {
      std::vector<std::string> files;
      if (fs::is_directory(config.path)) {
        if (config.split == Split::test) {
          files.push_back((fs::path(config.path) / "test_batch.bin").string());
        } else {
          for (int b = 1; b <= 5; ++b) files.push_back((fs::path(config.path) / ("data_batch_" + std::to_string(b) + ".bin")).string());
        }
      } else {
        files.push_back(config.path);
      }
      for (const auto& f : files) {
        if (!fs::exists(f)) throw DataError("CIFAR-10 file not found: " + f);
        parse_cifar10(detail::read_file(f), f, images, labels, limit);
      }
      if (images.empty()) throw DataError("CIFAR-10 source " + config.path + " contains no records");
      return DatasetHandle(config, std::move(images), std::move(labels));
    }
    case DatasetSource::image_folder: {
      if (!fs::is_directory(config.path)) throw DataError("image folder not found: " + config.path);
      std::vector<fs::path> paths;
      for (const auto& e : fs::directory_iterator(config.path)) {
        if (e.is_regular_file()) paths.push_back(e.path());
      }
      std::sort(paths.begin(), paths.end());
      std::size_t skipped = 0;
      for (const auto& p : paths) {
        if (limit && images.size() >= limit) break;
        try {
          images.push_back(normalize(read_image(p.string())));
        } catch (const DataError& e) {
          ++skipped;
          std::cerr << "warning: skipping " << p.string() << ": " << e.what() << "\n";
        }
      }
      if (images.empty()) throw DataError("image folder " + config.path + " contains no readable images");
      DatasetHandle h(config, std::move(images));
      h.set_skipped(skipped);
      return h;
    }
  }
  throw ConfigError("unknown dataset source");
}

}  // namespace jscc
