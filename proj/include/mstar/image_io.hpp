// 8-bit RGB raster with binary PPM (P6) / PGM (P5) serialization and the
// bilinear resize used when the trainer switches resolutions.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mstar/mat.hpp"

namespace mstar {

struct Image {
  int w = 0;
  int h = 0;
  std::vector<uint8_t> pix;  // row-major, 3 bytes per pixel

  Image() = default;
  Image(int w_, int h_) : w(w_), h(h_), pix(static_cast<size_t>(w_) * h_ * 3, 0) {}

  uint8_t* at(int x, int y) { return pix.data() + (static_cast<size_t>(y) * w + x) * 3; }
  const uint8_t* at(int x, int y) const {
    return pix.data() + (static_cast<size_t>(y) * w + x) * 3;
  }
};

void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);  // throws std::runtime_error on malformed input

// Grayscale dump of a non-negative map, normalized so its max maps to 255.
void write_pgm(const std::string& path, const Mat& map);

Image resize_bilinear(const Image& src, int new_w, int new_h);

}  // namespace mstar
