#pragma once

#include <png.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "polypseg/error.hpp"

namespace polypseg {

/// Interleaved 8-bit pixels, row-major, `channels` of 1 (gray) or 3 (RGB).
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  friend bool operator==(const Image8&, const Image8&) = default;
};

namespace detail {

inline Image8 read_png(const std::filesystem::path& path, std::size_t channels) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw FileError("cannot read PNG '" + path.string() + "': " + img.message);
  }
  img.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 out{img.width, img.height, channels, {}};
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw FileError("cannot decode PNG '" + path.string() + "': " + img.message);
  }
  return out;
}

}  // namespace detail

/// Any PNG converted to 8-bit RGB (alpha composited on black, gray expanded).
inline Image8 read_png_rgb(const std::filesystem::path& path) { return detail::read_png(path, 3); }

/// Any PNG converted to 8-bit grayscale.
inline Image8 read_png_gray(const std::filesystem::path& path) { return detail::read_png(path, 1); }

inline void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw InvalidArgument("write_png: channels must be 1 or 3");
  }
  if (image.pixels.size() != image.width * image.height * image.channels || image.width == 0 ||
      image.height == 0) {
    throw InvalidArgument("write_png: pixel buffer does not match dimensions");
  }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw FileError("cannot write PNG '" + path.string() + "': " + img.message);
  }
}

}  // namespace polypseg
