// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace glip {

/// Interleaved RGB raster, row-major, channel values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, 0.0f) {}

  float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  bool operator==(const Image&) const = default;
};

/// Binary PPM (P6, maxval 255). Values are quantized to 8 bits on write.
std::string encode_ppm(const Image& image);
Image decode_ppm(const std::string& bytes);
void write_ppm(const std::string& path, const Image& image);
Image read_ppm(const std::string& path);

/// Rounds every channel to the nearest 1/255 step so that an image survives a
/// PPM round trip bit-exactly.
void quantize(Image& image);

std::string base64_encode(const std::string& bytes);
std::string base64_decode(const std::string& text);

}  // namespace glip
