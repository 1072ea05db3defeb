#pragma once

// PNG and JPEG decoding into Image, PNG encoding of grayscale, palette and
// RGB rasters.

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "edadet/errors.hpp"
#include "edadet/image.hpp"

namespace edadet {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& p, const char* mode) {
  FilePtr f(std::fopen(p.string().c_str(), mode));
  if (!f) throw IoError("cannot open " + p.string());
  return f;
}

inline Image read_png(const std::filesystem::path& path) {
  auto f = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialization failed");
  }
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> buf;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG: " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const std::size_t stride = png_get_rowbytes(png, info);
  buf.resize(stride * static_cast<std::size_t>(h));
  rows.resize(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = buf.data() + stride * static_cast<std::size_t>(y);
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  Image im(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) im.at(y, x, c) = buf[stride * static_cast<std::size_t>(y) + 3u * x + c] / 255.0f;
  return im;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

inline void jpeg_error_exit(j_common_ptr cinfo) { std::longjmp(reinterpret_cast<JpegError*>(cinfo->err)->jump, 1); }

inline Image read_jpeg(const std::filesystem::path& path) {
  auto f = open_file(path, "rb");
  jpeg_decompress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  std::vector<std::uint8_t> buf;
  int w = 0, h = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("corrupt JPEG: " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  w = static_cast<int>(cinfo.output_width);
  h = static_cast<int>(cinfo.output_height);
  buf.resize(static_cast<std::size_t>(w) * h * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = buf.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  Image im(h, w);
  std::transform(buf.begin(), buf.end(), im.pixels.begin(), [](std::uint8_t v) { return v / 255.0f; });
  return im;
}

inline void write_png_raw(const std::filesystem::path& path, int w, int h, int color_type,
                          const std::vector<std::uint8_t>& data, int channels,
                          const std::vector<std::array<std::uint8_t, 3>>* palette = nullptr) {
  auto f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialization failed");
  }
  std::vector<png_color> pal;
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG write failed: " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  if (palette) {
    for (const auto& c : *palette) pal.push_back({c[0], c[1], c[2]});
    png_set_PLTE(png, info, pal.data(), static_cast<int>(pal.size()));
  }
  png_write_info(png, info);
  for (int y = 0; y < h; ++y)
    rows[static_cast<std::size_t>(y)] =
        const_cast<png_bytep>(data.data() + static_cast<std::size_t>(y) * w * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

// Dispatches on the file signature.
inline Image read_image(const std::filesystem::path& path) {
  auto f = detail::open_file(path, "rb");
  unsigned char sig[8] = {};
  const auto n = std::fread(sig, 1, 8, f.get());
  f.reset();
  if (n == 8 && png_sig_cmp(sig, 0, 8) == 0) return detail::read_png(path);
  if (n >= 3 && sig[0] == 0xFF && sig[1] == 0xD8 && sig[2] == 0xFF) return detail::read_jpeg(path);
  throw IoError("unsupported image format: " + path.string());
}

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

inline void write_png_gray(const std::filesystem::path& path, int w, int h, const std::vector<std::uint8_t>& data) {
  require(data.size() == static_cast<std::size_t>(w) * h, "write_png_gray: size mismatch");
  detail::write_png_raw(path, w, h, PNG_COLOR_TYPE_GRAY, data, 1);
}

inline void write_png_indexed(const std::filesystem::path& path, int w, int h, const std::vector<std::uint8_t>& labels,
                              const std::vector<std::array<std::uint8_t, 3>>& palette) {
  require(labels.size() == static_cast<std::size_t>(w) * h, "write_png_indexed: size mismatch");
  require(!palette.empty() && palette.size() <= 256, "write_png_indexed: palette must hold 1..256 colors");
  for (auto l : labels) require(l < palette.size(), "write_png_indexed: label outside palette");
  detail::write_png_raw(path, w, h, PNG_COLOR_TYPE_PALETTE, labels, 1, &palette);
}

inline void write_png_rgb(const std::filesystem::path& path, const Image& im) {
  std::vector<std::uint8_t> data(im.pixels.size());
  std::transform(im.pixels.begin(), im.pixels.end(), data.begin(), [](float v) { return to_byte(v); });
  detail::write_png_raw(path, im.width, im.height, PNG_COLOR_TYPE_RGB, data, 3);
}

// Reads back an 8-bit grayscale or palette PNG as raw sample values.
inline std::vector<std::uint8_t> read_png_samples(const std::filesystem::path& path, int& w, int& h) {
  auto f = detail::open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialization failed");
  }
  std::vector<std::uint8_t> buf;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG: " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  const auto ct = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) != 8 || (ct != PNG_COLOR_TYPE_GRAY && ct != PNG_COLOR_TYPE_PALETTE)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("expected an 8-bit grayscale or palette PNG: " + path.string());
  }
  w = static_cast<int>(png_get_image_width(png, info));
  h = static_cast<int>(png_get_image_height(png, info));
  buf.resize(static_cast<std::size_t>(w) * h);
  rows.resize(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = buf.data() + static_cast<std::size_t>(y) * w;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  return buf;
}

}  // namespace edadet
