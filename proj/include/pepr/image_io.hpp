#pragma once

// 8-bit images and PNG read/write through libpng.

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "pepr/error.hpp"
#include "pepr/file_audit.hpp"

namespace pepr {

struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;  // [y][x][c]

  Image8() = default;
  Image8(int h, int w, int c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  std::uint8_t& operator()(int y, int x, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t operator()(int y, int x, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  friend bool operator==(const Image8&, const Image8&) = default;
};

namespace png_io {

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

inline void write(const Image8& img, const std::string& path) {
  require(img.channels == 1 || img.channels == 3, "png: only 1 or 3 channels supported");
  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open for writing", path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng init failed", path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png encode failed", path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.data.data() + static_cast<std::size_t>(y) * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Image8 read(const std::string& path) {
  audit::record_open(path);
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open image", path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng init failed", path);
  }
  Image8 img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png decode failed", path);
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth != 8 || (color != PNG_COLOR_TYPE_RGB && color != PNG_COLOR_TYPE_GRAY)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unsupported png layout (need 8-bit gray or RGB)", path);
  }
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = color == PNG_COLOR_TYPE_RGB ? 3 : 1;
  img.data.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
  for (int y = 0; y < img.height; ++y) png_read_row(png, img.data.data() + static_cast<std::size_t>(y) * stride, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace png_io
}  // namespace pepr
