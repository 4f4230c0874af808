#pragma once

// 8-bit RGB image decoding for dataset folders: binary PPM (P6), BMP (24/32
// bit, uncompressed) and, when built with libpng, PNG.

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#ifdef JSCC_HAVE_PNG
#include <png.h>
#endif

#include "jscc/error.hpp"

namespace jscc {

/// Interleaved 8-bit RGB raster.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  ///< height * width * 3, row-major, RGB
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline RgbImage decode_ppm(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  std::size_t pos = 2;
  auto next_token = [&]() -> long {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    long v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      any = true;
    }
    if (!any) throw DataError("malformed PPM header in " + path);
    return v;
  };
  RgbImage img;
  img.width = int(next_token());
  img.height = int(next_token());
  const long maxval = next_token();
  if (maxval != 255) throw DataError(path + ": only 8-bit PPM is supported");
  ++pos;
  const std::size_t n = std::size_t(img.width) * img.height * 3;
  if (img.width <= 0 || img.height <= 0 || bytes.size() < pos + n) throw DataError("truncated PPM " + path);
  img.pixels.assign(bytes.begin() + std::ptrdiff_t(pos), bytes.begin() + std::ptrdiff_t(pos + n));
  return img;
}

inline RgbImage decode_bmp(const std::vector<std::uint8_t>& b, const std::string& path) {
  auto u32 = [&](std::size_t o) {
    if (o + 4 > b.size()) throw DataError("truncated BMP " + path);
    return std::uint32_t(b[o]) | std::uint32_t(b[o + 1]) << 8 | std::uint32_t(b[o + 2]) << 16 |
           std::uint32_t(b[o + 3]) << 24;
  };
  auto u16 = [&](std::size_t o) {
    if (o + 2 > b.size()) throw DataError("truncated BMP " + path);
    return std::uint16_t(b[o] | b[o + 1] << 8);
  };
  const std::uint32_t offset = u32(10);
  const auto width = std::int32_t(u32(18));
  const auto raw_height = std::int32_t(u32(22));
  const int bpp = u16(28);
  const std::uint32_t compression = u32(30);
  if ((bpp != 24 && bpp != 32) || (compression != 0 && compression != 3)) {
    throw DataError(path + ": only uncompressed 24/32-bit BMP is supported");
  }
  const bool bottom_up = raw_height > 0;
  const int height = bottom_up ? raw_height : -raw_height;
  const std::size_t stride = (std::size_t(width) * (bpp / 8) + 3) & ~std::size_t(3);
  if (width <= 0 || height <= 0 || b.size() < offset + stride * height) throw DataError("truncated BMP " + path);
  RgbImage img{width, height, std::vector<std::uint8_t>(std::size_t(width) * height * 3)};
  for (int y = 0; y < height; ++y) {
    const std::uint8_t* row = b.data() + offset + stride * std::size_t(bottom_up ? height - 1 - y : y);
    for (int x = 0; x < width; ++x) {
      const std::uint8_t* px = row + std::size_t(x) * (bpp / 8);
      std::uint8_t* dst = &img.pixels[(std::size_t(y) * width + x) * 3];
      dst[0] = px[2];
      dst[1] = px[1];
      dst[2] = px[0];
    }
  }
  return img;
}

#ifdef JSCC_HAVE_PNG
inline RgbImage decode_png(const std::string& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw DataError("cannot decode PNG " + path + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  RgbImage img{int(image.width), int(image.height), std::vector<std::uint8_t>(PNG_IMAGE_SIZE(image))};
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw DataError("cannot decode PNG " + path + ": " + msg);
  }
  return img;
}
#endif

}  // namespace detail

inline RgbImage read_image(const std::string& path) {
  const auto lower_ext = [&]() {
    auto dot = path.rfind('.');
    std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
    for (auto& ch : ext) ch = char(std::tolower(ch));
    return ext;
  }();
  if (lower_ext == "png") {
#ifdef JSCC_HAVE_PNG
    return detail::decode_png(path);
#else
    throw DataError("PNG support not compiled in: " + path);
#endif
  }
  const auto bytes = detail::read_file(path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return detail::decode_ppm(bytes, path);
  if (bytes.size() >= 2 && bytes[0] == 'B' && bytes[1] == 'M') return detail::decode_bmp(bytes, path);
  throw DataError("unsupported image format: " + path);
}

inline void write_ppm(const RgbImage& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
}

}  // namespace jscc
