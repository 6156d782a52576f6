#pragma once

// 8-bit PNG read/write through libpng's simplified API.

#include <png.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "srwseg/core/error.hpp"

namespace srwseg::io {

struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 (gray) or 3 (rgb), interleaved
  std::vector<std::uint8_t> pixels;
};

namespace detail {
inline std::string png_message(const png_image& img) { return img.message[0] ? img.message : "unknown libpng error"; }
}  // namespace detail

/// Reads a PNG, converting to gray (channels = 1) or rgb (channels = 3).
inline Image8 read_png(const std::filesystem::path& path, int channels) {
  if (channels != 1 && channels != 3) throw ValidationError("read_png: channels must be 1 or 3");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + detail::png_message(img));
  }
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image8 out;
  out.width = static_cast<int>(img.width);
  out.height = static_cast<int>(img.height);
  out.channels = channels;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + detail::png_message(img));
  }
  return out;
}

/// Channel count stored in the file, without decoding pixels.
inline int png_stored_channels(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + detail::png_message(img));
  }
  const int c = PNG_IMAGE_PIXEL_CHANNELS(img.format);
  png_image_free(&img);
  return c;
}

inline void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) throw ValidationError("write_png: channels must be 1 or 3");
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
    throw ValidationError("write_png: pixel buffer does not match dimensions");
  }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + detail::png_message(img));
  }
}

}  // namespace srwseg::io
