#pragma once

#include <png.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace clmex {

/// H x W x C image, channel-interleaved (HWC), values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }

  bool operator==(const Image&) const = default;
};

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(is.get())) << (8 * i);
  return v;
}

}  // namespace detail

// Raw float container (.rawf), all integers little-endian:
//   bytes 0-7   magic "CLMXRAWF"
//   bytes 8-11  u32 version (1)
//   bytes 12-23 u32 height, u32 width, u32 channels
//   then height*width*channels IEEE-754 binary32 values, HWC order.
inline constexpr char kRawMagic[8] = {'C', 'L', 'M', 'X', 'R', 'A', 'W', 'F'};
inline constexpr std::uint32_t kRawVersion = 1;

/// Rounds every pixel to binary32 so an in-memory image equals its stored form.
inline void quantize_to_float(Image& image) {
  for (auto& p : image.pixels) p = static_cast<double>(static_cast<float>(p));
}

inline void write_raw_image(const std::filesystem::path& path, const Image& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ImageIoError("cannot open " + path.string() + " for writing");
  os.write(kRawMagic, sizeof kRawMagic);
  detail::put_u32(os, kRawVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(image.height));
  detail::put_u32(os, static_cast<std::uint32_t>(image.width));
  detail::put_u32(os, static_cast<std::uint32_t>(image.channels));
  for (double p : image.pixels) detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(p)));
  if (!os) throw ImageIoError("write failed: " + path.string());
}

inline Image read_raw_image(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ImageIoError("cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kRawMagic, sizeof magic) != 0) {
    throw ImageIoError(path.string() + ": not a raw float image");
  }
  if (const auto version = detail::get_u32(is); version != kRawVersion) {
    throw ImageIoError(path.string() + ": unsupported raw image version " + std::to_string(version));
  }
  const auto h = detail::get_u32(is), w = detail::get_u32(is), c = detail::get_u32(is);
  Image image(h, w, c);
  for (auto& p : image.pixels) p = static_cast<double>(std::bit_cast<float>(detail::get_u32(is)));
  if (!is) throw ImageIoError(path.string() + ": truncated pixel data");
  return image;
}

/// 8-bit PNG reader. Grey and palette images are expanded to RGB; alpha is dropped.
inline Image read_png_image(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!file) throw ImageIoError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("libpng initialisation failed");
  }
  std::vector<png_byte> buffer;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError(path.string() + ": malformed PNG");
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t h = png_get_image_height(png, info), w = png_get_image_width(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(h * stride);
  rows.resize(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = buffer.data() + y * stride;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  Image image(h, w, 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) image.at(y, x, c) = rows[y][x * 3 + c] / 255.0;
  return image;
}

/// 8-bit RGB PNG writer (previews and test fixtures).
inline void write_png_image(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 3) throw ImageIoError("write_png_image expects 3 channels");
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!file) throw ImageIoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng initialisation failed");
  }
  std::vector<png_byte> buffer(image.height * image.width * 3);
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    const double v = std::min(1.0, std::max(0.0, image.pixels[i]));
    buffer[i] = static_cast<png_byte>(v * 255.0 + 0.5);
  }
  std::vector<png_bytep> rows(image.height);
  for (std::size_t y = 0; y < image.height; ++y) rows[y] = buffer.data() + y * image.width * 3;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError(path.string() + ": PNG write failed");
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Dispatches on extension: .png via libpng, anything else as a raw float container.
inline Image read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ImageIoError("missing image file " + path.string());
  auto ext = path.extension().string();
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return ext == ".png" ? read_png_image(path) : read_raw_image(path);
}

}  // namespace clmex
