#pragma once

// 8-bit RGB images, PNG I/O and the pixel <-> latent mapping ([0,255] <-> [-1,1]).

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "zorder/core.hpp"

namespace zorder {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  Image() = default;
  Image(int w, int h, Rgb fill = {}) : width(w), height(h), rgb(std::size_t(w) * h * 3) {
    for (int i = 0; i < w * h; ++i) set(i, fill);
  }

  Rgb at(int i) const { return {rgb[3 * std::size_t(i)], rgb[3 * std::size_t(i) + 1], rgb[3 * std::size_t(i) + 2]}; }
  Rgb at(int x, int y) const { return at(y * width + x); }
  void set(int i, Rgb c) {
    rgb[3 * std::size_t(i)] = c.r;
    rgb[3 * std::size_t(i) + 1] = c.g;
    rgb[3 * std::size_t(i) + 2] = c.b;
  }
  void set(int x, int y, Rgb c) { set(y * width + x, c); }

  bool operator==(const Image&) const = default;
};

inline Matrix<float> image_to_latent(const Image& img) {
  Matrix<float> m(img.width * img.height, 3);
  for (int i = 0; i < img.width * img.height; ++i)
    for (int c = 0; c < 3; ++c) m(i, c) = float(img.rgb[3 * std::size_t(i) + c]) / 127.5f - 1.0f;
  return m;
}

template <class S>
Image latent_to_image(const Matrix<S>& latent, int width, int height) {
  require(latent.rows() == Eigen::Index(width) * height && latent.cols() == 3, "latent_to_image: shape mismatch");
  Image img(width, height);
  for (int i = 0; i < width * height; ++i)
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp((double(latent(i, c)) + 1.0) * 127.5, 0.0, 255.0);
      img.rgb[3 * std::size_t(i) + c] = std::uint8_t(std::lround(v));
    }
  return img;
}

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

inline void write_png(const std::filesystem::path& path, const Image& img) {
  detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw Error("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("PNG write failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 9);
  png_write_info(png, info);
  std::vector<png_bytep> rows(std::size_t(img.height));
  for (int y = 0; y < img.height; ++y)
    rows[std::size_t(y)] = const_cast<png_bytep>(img.rgb.data() + std::size_t(y) * img.width * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Image read_png(const std::filesystem::path& path) {
  detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw Error("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8)) throw Error("not a PNG file: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng initialisation failed");
  }
  Image img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("corrupt PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  img.width = int(png_get_image_width(png, info));
  img.height = int(png_get_image_height(png, info));
  img.rgb.resize(std::size_t(img.width) * img.height * 3);
  std::vector<png_bytep> rows(std::size_t(img.height));
  for (int y = 0; y < img.height; ++y) rows[std::size_t(y)] = img.rgb.data() + std::size_t(y) * img.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

/// Nearest-neighbour upscale, used for visual dumps of 8x8 maps.
inline Image upscale(const Image& img, int factor) {
  Image out(img.width * factor, img.height * factor);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) out.set(x, y, img.at(x / factor, y / factor));
  return out;
}

}  // namespace zorder
