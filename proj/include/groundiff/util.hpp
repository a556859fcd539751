#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace groundiff {

// Dense row-major matrix of doubles. Small helper shared by geometry,
// objective and engine code; the autodiff graph has its own storage.
struct Mat {
  int rows{0};
  int cols{0};
  std::vector<double> d;

  Mat() = default;
  Mat(int r, int c, double fill = 0.0) : rows(r), cols(c), d(static_cast<size_t>(r) * c, fill) {}

  double& at(int r, int c) { return d[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return d[static_cast<size_t>(r) * cols + c]; }
  size_t size() const { return d.size(); }
};

inline double clamp(double v, double lo, double hi) {
  return std::min(std::max(v, lo), hi);
}

// FNV-1a over a byte string; used for config provenance hashes.
inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string to_hex(uint64_t v);

}  // namespace groundiff
