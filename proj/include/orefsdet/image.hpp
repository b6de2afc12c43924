#pragma once

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "orefsdet/ops.hpp"
#include "orefsdet/tensor.hpp"

namespace orefsdet {

/// RGB image as a 3 x H x W float tensor in [0, 1].
using Image = Tensor<float>;

inline float quantize8(float v) { return std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f; }

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

/// Reads an 8-bit PNG (gray, RGB or with alpha; alpha is dropped).
inline Image read_png(const std::filesystem::path& path) {
  detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw DataError("missing image file: " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8)) throw DataError("not a PNG file: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw DataError("libpng init failed");
  std::vector<png_byte> buffer;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("corrupt PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t w = png_get_image_width(png, info), h = png_get_image_height(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(stride * h);
  rows.resize(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = buffer.data() + y * stride;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  Image img({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(rows[y][x * 3 + c]) / 255.0f;
  return img;
}

/// Writes an 8-bit RGB PNG with fixed settings (byte-stable output).
inline void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("write_png: expected 3xHxW image");
  detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw DataError("cannot write image: " + path.string());
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::vector<png_byte> row(w * 3);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw DataError("libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("PNG write failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_compression_level(png, 6);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        row[x * 3 + c] = static_cast<png_byte>(std::lround(std::clamp(img.at(c, y, x), 0.0f, 1.0f) * 255.0f));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Bilinear resize of a C x H x W image (half-pixel centres).
inline Image resize_image(const Image& img, std::size_t out_h, std::size_t out_w) {
  if (img.dim(1) == out_h && img.dim(2) == out_w) return img;
  NoGradGuard ng;
  return bilinear_resize(Var<float>(img), out_h, out_w).value();
}

/// Integer-pixel crop [x0, x1) x [y0, y1), clipped to the image.
inline Image crop_image(const Image& img, long x0, long y0, long x1, long y1) {
  const long H = static_cast<long>(img.dim(1)), W = static_cast<long>(img.dim(2));
  x0 = std::clamp(x0, 0L, W);
  x1 = std::clamp(x1, 0L, W);
  y0 = std::clamp(y0, 0L, H);
  y1 = std::clamp(y1, 0L, H);
  if (x1 <= x0 || y1 <= y0) throw ShapeError("crop_image: empty crop");
  Image out({img.dim(0), static_cast<std::size_t>(y1 - y0), static_cast<std::size_t>(x1 - x0)});
  for (std::size_t c = 0; c < img.dim(0); ++c)
    for (long y = y0; y < y1; ++y)
      for (long x = x0; x < x1; ++x)
        out.at(c, static_cast<std::size_t>(y - y0), static_cast<std::size_t>(x - x0)) =
            img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  return out;
}

/// Draws a box outline (for overlays).
inline void draw_box(Image& img, const Box& b, float r, float g, float bl, int thickness = 2) {
  const long H = static_cast<long>(img.dim(1)), W = static_cast<long>(img.dim(2));
  const long x0 = std::lround(b.x1), y0 = std::lround(b.y1), x1 = std::lround(b.x2) - 1, y1 = std::lround(b.y2) - 1;
  auto put = [&](long x, long y) {
    if (x < 0 || y < 0 || x >= W || y >= H) return;
    img.at(0, y, x) = r;
    img.at(1, y, x) = g;
    img.at(2, y, x) = bl;
  };
  for (int t = 0; t < thickness; ++t) {
    for (long x = x0; x <= x1; ++x) {
      put(x, y0 + t);
      put(x, y1 - t);
    }
    for (long y = y0; y <= y1; ++y) {
      put(x0 + t, y);
      put(x1 - t, y);
    }
  }
}

}  // namespace orefsdet
