#pragma once

#include <png.h>

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "syn2real/errors.hpp"
#include "syn2real/tensor.hpp"

namespace s2r {

// 8-bit PNG codecs via libpng's simplified API. Images cross this boundary
// as {3,H,W} float tensors with values on the k/255 grid, label maps as
// {H,W} int tensors with pixel value = class id.

inline void write_rgb_png(const std::string& path, const TensorF& img) {
  if (img.ndim() != 3 || img.dim(0) != 3)
    throw ShapeError("write_rgb_png: need {3,H,W} image");
  const int h = img.dim(1), w = img.dim(2);
  std::vector<std::uint8_t> buf(size_t(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = img.at3(c, y, x);
        v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
        buf[size_t((std::int64_t(y) * w + x) * 3 + c)] =
            std::uint8_t(std::lround(v * 255.f));
      }
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  pi.width = png_uint_32(w);
  pi.height = png_uint_32(h);
  pi.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.c_str(), 0, buf.data(), 0, nullptr))
    throw FormatError("write_rgb_png: " + path + ": " + pi.message);
}

inline TensorF read_rgb_png(const std::string& path) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str()))
    throw FormatError("read_rgb_png: " + path + ": " + pi.message);
  pi.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, buf.data(), 0, nullptr))
    throw FormatError("read_rgb_png: " + path + ": " + pi.message);
  const int h = int(pi.height), w = int(pi.width);
  TensorF img({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at3(c, y, x) =
            float(buf[size_t((std::int64_t(y) * w + x) * 3 + c)]) / 255.f;
  return img;
}

inline void write_mask_png(const std::string& path, const LabelMap& mask) {
  if (mask.ndim() != 2) throw ShapeError("write_mask_png: need {H,W} mask");
  const int h = mask.dim(0), w = mask.dim(1);
  std::vector<std::uint8_t> buf(size_t(h) * w);
  for (std::int64_t i = 0; i < mask.numel(); ++i) {
    const std::int32_t v = mask[i];
    if (v < 0 || v > 255)
      throw FormatError("write_mask_png: class id out of 8-bit range");
    buf[size_t(i)] = std::uint8_t(v);
  }
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  pi.width = png_uint_32(w);
  pi.height = png_uint_32(h);
  pi.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&pi, path.c_str(), 0, buf.data(), 0, nullptr))
    throw FormatError("write_mask_png: " + path + ": " + pi.message);
}

inline LabelMap read_mask_png(const std::string& path) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str()))
    throw FormatError("read_mask_png: " + path + ": " + pi.message);
  pi.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, buf.data(), 0, nullptr))
    throw FormatError("read_mask_png: " + path + ": " + pi.message);
  const int h = int(pi.height), w = int(pi.width);
  LabelMap mask({h, w});
  for (std::int64_t i = 0; i < mask.numel(); ++i)
    mask[i] = std::int32_t(buf[size_t(i)]);
  return mask;
}

}  // namespace s2r
