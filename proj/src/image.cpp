// SPDX-License-Identifier: Apache-2.0
#include "glip/image.hpp"

#include <algorithm>
#include <cctype>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include "glip/common.hpp"

namespace glip {

std::string encode_ppm(const Image& image) {
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) +
                    "\n255\n";
  out.reserve(out.size() + image.data.size());
  for (float v : image.data) {
    const long q = std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f);
    out.push_back(static_cast<char>(static_cast<unsigned char>(q)));
  }
  return out;
}

Image decode_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_field = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (next_field() != "P6") throw Error(ErrorCode::FormatError, "not a binary PPM (P6)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_field());
    h = std::stoi(next_field());
    maxval = std::stoi(next_field());
  } catch (const std::exception&) {
    throw Error(ErrorCode::FormatError, "malformed PPM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) {
    throw Error(ErrorCode::FormatError, "unsupported PPM geometry or maxval");
  }
  ++pos;  // single whitespace before the raster
  const std::size_t need = static_cast<std::size_t>(w) * h * 3;
  if (bytes.size() < pos + need) throw Error(ErrorCode::FormatError, "truncated PPM raster");
  Image image(h, w);
  for (std::size_t i = 0; i < need; ++i)
    image.data[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i])) / 255.0f;
  return image;
}

void write_ppm(const std::string& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  const std::string bytes = encode_ppm(image);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_ppm(ss.str());
}

void quantize(Image& image) {
  for (float& v : image.data)
    v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
}

namespace {
constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const std::string& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const unsigned v = (static_cast<unsigned char>(bytes[i]) << 16) |
                       (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                       static_cast<unsigned char>(bytes[i + 2]);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  const std::size_t rest = bytes.size() - i;
  if (rest == 1) {
    const unsigned v = static_cast<unsigned char>(bytes[i]) << 16;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += "==";
  } else if (rest == 2) {
    const unsigned v = (static_cast<unsigned char>(bytes[i]) << 16) |
                       (static_cast<unsigned char>(bytes[i + 1]) << 8);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::string base64_decode(const std::string& text) {
  std::array<int, 256> table{};
  table.fill(-1);
  for (int i = 0; i < 64; ++i) table[static_cast<unsigned char>(kAlphabet[i])] = i;
  std::string out;
  unsigned buffer = 0;
  int bits = 0;
  for (char c : text) {
    if (c == '=') break;
    if (std::isspace(static_cast<unsigned char>(c))) continue;
    const int v = table[static_cast<unsigned char>(c)];
    if (v < 0) throw Error(ErrorCode::FormatError, "invalid base64 character");
    buffer = (buffer << 6) | static_cast<unsigned>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<char>((buffer >> bits) & 0xFF));
    }
  }
  return out;
}

}  // namespace glip
