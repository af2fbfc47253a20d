/*
 * Copyright 2026 The HistoMIL Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <png.h>

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "histomil/error.hpp"
#include "histomil/imaging.hpp"

namespace histomil {

// Decodes any PNG libpng understands into 8-bit RGB.
inline RasterImage read_png(const std::string& path, double mpp = 0.5) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw ValidationError("read_png: cannot decode '" + path + "': " + image.message);
  image.format = PNG_FORMAT_RGB;
  RasterImage out(static_cast<int>(image.width), static_cast<int>(image.height), mpp);
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw ValidationError("read_png: cannot decode '" + path + "': " + msg);
  }
  return out;
}

inline void write_png(const std::string& path, int width, int height,
                      const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != static_cast<std::size_t>(width) * height * 3)
    throw DimensionError("write_png: pixel buffer does not match dimensions");
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, rgb.data(), 0, nullptr))
    throw Error("write_png: cannot write '" + path + "': " + image.message);
}

inline void write_png(const std::string& path, const RasterImage& img) {
  write_png(path, img.width, img.height, img.pixels);
}

inline void write_png(const std::string& path, const Tile& tile) {
  write_png(path, tile.size, tile.size, tile.pixels);
}

inline Tile read_tile_png(const std::string& path) {
  RasterImage img = read_png(path);
  if (img.width != img.height)
    throw DimensionError("read_tile_png: '" + path + "' is not square");
  Tile tile;
  tile.size = img.width;
  tile.pixels = std::move(img.pixels);
  return tile;
}

}  // namespace histomil
