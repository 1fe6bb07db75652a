// Dense row-major double matrix plus the seeded RNG used across the project.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace mstar {

struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}
  Mat(int r, int c, double fill)
      : rows(r), cols(c), a(static_cast<size_t>(r) * c, fill) {}

  double& operator()(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }

  double* row(int i) { return a.data() + static_cast<size_t>(i) * cols; }
  const double* row(int i) const { return a.data() + static_cast<size_t>(i) * cols; }

  size_t size() const { return a.size(); }
  bool empty() const { return a.empty(); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

  void fill(double v) { std::fill(a.begin(), a.end(), v); }

  void add(const Mat& o) {
    if (!same_shape(o)) throw std::invalid_argument("Mat::add shape mismatch");
    for (size_t i = 0; i < a.size(); ++i) a[i] += o.a[i];
  }

  bool all_finite() const {
    for (double v : a)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// Deterministic RNG. All randomness in the project flows through explicit
// seeds so identical (config, seed) runs are bit-reproducible.
struct Rng {
  std::mt19937_64 gen;
  explicit Rng(uint64_t seed) : gen(seed) {}

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen);
  }
  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(gen);
  }
  // Inclusive bounds.
  int randint(int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(gen);
  }
  template <class T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), gen);
  }
  uint64_t next() { return gen(); }
};

inline Mat randn(int r, int c, double stddev, Rng& rng) {
  Mat m(r, c);
  for (double& v : m.a) v = rng.normal(0.0, stddev);
  return m;
}

// FNV-1a over raw bytes; used for checkpoint/index fingerprints.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace mstar
