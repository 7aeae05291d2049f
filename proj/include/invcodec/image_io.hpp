#pragma once

// PNG (via libpng) and binary PPM/PGM ingestion and emission. Pixels map to
// [0,1] float tensors in (channel, y, x) layout; 16-bit, paletted, gray and
// alpha PNG inputs are normalized to 8-bit RGB on read.

#include <png.h>

#include <cctype>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "invcodec/tensor.hpp"

namespace invcodec {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline uint8_t to_byte(float v) {
  const float c = std::min(1.0f, std::max(0.0f, v));
  return static_cast<uint8_t>(std::lround(c * 255.0f));
}

}  // namespace detail

inline Tensor load_png(const std::string& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  require(f != nullptr, "load_png: cannot open " + path);
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, "load_png: libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("load_png: libpng info init failed");
  }
  std::vector<png_bytep> rows;
  std::vector<uint8_t> pixels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("load_png: failed to read " + path);
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const size_t stride = png_get_rowbytes(png, info);
  pixels.resize(stride * h);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor out({3, static_cast<int64_t>(h), static_cast<int64_t>(w)});
  for (png_uint_32 y = 0; y < h; ++y)
    for (png_uint_32 x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(c, y, x) =
            static_cast<float>(pixels[y * stride + 3 * x + c]) / 255.0f;
  return out;
}

inline void save_png(const std::string& path, const Tensor& img) {
  require(img.rank() == 3 && img.dim(0) == 3, "save_png: 3xHxW tensor expected");
  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  require(f != nullptr, "save_png: cannot open " + path);
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  require(png != nullptr, "save_png: libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("save_png: libpng info init failed");
  }
  const int64_t h = img.dim(1), w = img.dim(2);
  std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("save_png: failed to write " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w),
               static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        row[static_cast<size_t>(3 * x + c)] = detail::to_byte(img.at(c, y, x));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Binary PPM (P6) / PGM (P5), 8-bit.
inline Tensor load_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "load_ppm: cannot open " + path);
  std::string magic;
  is >> magic;
  require(magic == "P6" || magic == "P5", "load_ppm: not a binary PPM/PGM");
  auto next_int = [&is, &path]() {
    // Skip whitespace and '#' comment lines.
    while (true) {
      const int c = is.peek();
      if (c == '#') {
        std::string line;
        std::getline(is, line);
      } else if (std::isspace(c)) {
        is.get();
      } else {
        break;
      }
      require(is.good(), "load_ppm: truncated header in " + path);
    }
    int64_t v;
    is >> v;
    return v;
  };
  const int64_t w = next_int(), h = next_int(), maxv = next_int();
  require(w >= 1 && h >= 1, "load_ppm: bad dimensions");
  require(maxv == 255, "load_ppm: only 8-bit images supported");
  is.get();  // single whitespace after header
  const int ch = magic == "P6" ? 3 : 1;
  std::vector<uint8_t> pixels(static_cast<size_t>(w * h * ch));
  is.read(reinterpret_cast<char*>(pixels.data()),
          static_cast<std::streamsize>(pixels.size()));
  require(is.gcount() == static_cast<std::streamsize>(pixels.size()),
          "load_ppm: truncated pixel data in " + path);
  Tensor out({3, h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(c, y, x) =
            static_cast<float>(
                pixels[static_cast<size_t>((y * w + x) * ch + (ch == 3 ? c : 0))]) /
            255.0f;
  return out;
}

inline void save_ppm(const std::string& path, const Tensor& img) {
  require(img.rank() == 3 && img.dim(0) == 3, "save_ppm: 3xHxW tensor expected");
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "save_ppm: cannot open " + path);
  const int64_t h = img.dim(1), w = img.dim(2);
  os << "P6\n" << w << " " << h << "\n255\n";
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        os.put(static_cast<char>(detail::to_byte(img.at(c, y, x))));
  require(os.good(), "save_ppm: write failed for " + path);
}

// Dispatch on file signature (PNG) or PPM magic.
inline Tensor load_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "load_image: cannot open " + path);
  char sig[2] = {0, 0};
  is.read(sig, 2);
  is.close();
  if (static_cast<uint8_t>(sig[0]) == 0x89 && sig[1] == 'P')
    return load_png(path);
  if (sig[0] == 'P' && (sig[1] == '6' || sig[1] == '5')) return load_ppm(path);
  throw std::runtime_error("load_image: unsupported format (PNG or binary "
                           "PPM/PGM expected): " +
                           path);
}

inline void save_image(const std::string& path, const Tensor& img) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".ppm")
    save_ppm(path, img);
  else
    save_png(path, img);
}

}  // namespace invcodec
