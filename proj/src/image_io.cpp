#include "mstar/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace mstar {

void write_ppm(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
  f << "P6\n" << img.w << " " << img.h << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pix.data()),
          static_cast<std::streamsize>(img.pix.size()));
  if (!f) throw std::runtime_error("write_ppm: short write to " + path);
}

namespace {

// Reads the next whitespace/comment-delimited token of a PNM header.
std::string pnm_token(std::istream& in) {
  std::string t;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!t.empty()) return t;
      continue;
    }
    t.push_back(static_cast<char>(c));
  }
  return t;
}

}  // namespace

Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
  if (pnm_token(f) != "P6") throw std::runtime_error("read_ppm: not a P6 file: " + path);
  const std::string ws = pnm_token(f), hs = pnm_token(f), max = pnm_token(f);
  int w = 0, h = 0;
  try {
    w = std::stoi(ws);
    h = std::stoi(hs);
  } catch (const std::exception&) {
    throw std::runtime_error("read_ppm: bad header in " + path);
  }
  if (w <= 0 || h <= 0 || max != "255")
    throw std::runtime_error("read_ppm: unsupported header in " + path);
  Image img(w, h);
  f.read(reinterpret_cast<char*>(img.pix.data()), static_cast<std::streamsize>(img.pix.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.pix.size()))
    throw std::runtime_error("read_ppm: truncated pixel data in " + path);
  return img;
}

void write_pgm(const std::string& path, const Mat& map) {
  if (map.empty()) throw std::invalid_argument("write_pgm: empty map");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_pgm: cannot open " + path);
  double mx = 0.0;
  for (double v : map.a) mx = std::max(mx, v);
  f << "P5\n" << map.cols << " " << map.rows << "\n255\n";
  std::vector<uint8_t> buf(map.a.size());
  for (size_t i = 0; i < map.a.size(); ++i) {
    const double v = mx > 0 ? map.a[i] / mx : 0.0;
    buf[i] = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  }
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("write_pgm: short write to " + path);
}

Image resize_bilinear(const Image& src, int new_w, int new_h) {
  if (src.w <= 0 || src.h <= 0) throw std::invalid_argument("resize_bilinear: empty source");
  Image dst(new_w, new_h);
  for (int y = 0; y < new_h; ++y) {
    const double sy = (new_h == 1) ? 0.0 : static_cast<double>(y) * (src.h - 1) / (new_h - 1);
    const int y0 = static_cast<int>(sy);
    const int y1 = std::min(y0 + 1, src.h - 1);
    const double fy = sy - y0;
    for (int x = 0; x < new_w; ++x) {
      const double sx = (new_w == 1) ? 0.0 : static_cast<double>(x) * (src.w - 1) / (new_w - 1);
      const int x0 = static_cast<int>(sx);
      const int x1 = std::min(x0 + 1, src.w - 1);
      const double fx = sx - x0;
      const uint8_t* p00 = src.at(x0, y0);
      const uint8_t* p01 = src.at(x1, y0);
      const uint8_t* p10 = src.at(x0, y1);
      const uint8_t* p11 = src.at(x1, y1);
      uint8_t* d = dst.at(x, y);
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - fy) * ((1 - fx) * p00[c] + fx * p01[c]) +
                         fy * ((1 - fx) * p10[c] + fx * p11[c]);
        d[c] = static_cast<uint8_t>(std::lround(v));
      }
    }
  }
  return dst;
}

}  // namespace mstar
