#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sfuda/common.hpp"
#include "sfuda/sha256.hpp"

namespace sfuda {

static_assert(std::endian::native == std::endian::little,
              "on-disk and wire formats assume a little-endian host");
static_assert(sizeof(float) == 4);

// Batch of images, shape (n, W, H, C), channel-last row-major, values in
// [0, 1] for anything that crosses a dataset or oracle boundary.
struct ImageTensor {
  int n = 0, w = 0, h = 0, c = 0;
  std::vector<float> data;

  ImageTensor() = default;
  ImageTensor(int n_, int w_, int h_, int c_)
      : n(n_), w(w_), h(h_), c(c_), data(checked_size(n_, w_, h_, c_)) {}

  static size_t checked_size(int n_, int w_, int h_, int c_) {
    if (w_ <= 0 || h_ <= 0 || c_ <= 0 || n_ < 0)
      throw InvalidInputError("ImageTensor: shape dimensions must be positive");
    return static_cast<size_t>(n_) * static_cast<size_t>(w_) *
           static_cast<size_t>(h_) * static_cast<size_t>(c_);
  }

  size_t sample_size() const {
    return static_cast<size_t>(w) * static_cast<size_t>(h) *
           static_cast<size_t>(c);
  }
  size_t size() const { return data.size(); }

  float& at(int i, int x, int y, int ch) {
    return data[((static_cast<size_t>(i) * w + x) * h + y) * c + ch];
  }
  float at(int i, int x, int y, int ch) const {
    return data[((static_cast<size_t>(i) * w + x) * h + y) * c + ch];
  }

  std::span<float> sample(int i) {
    return {data.data() + static_cast<size_t>(i) * sample_size(),
            sample_size()};
  }
  std::span<const float> sample(int i) const {
    return {data.data() + static_cast<size_t>(i) * sample_size(),
            sample_size()};
  }

  ImageTensor slice(int lo, int hi) const {
    ImageTensor out(hi - lo, w, h, c);
    std::copy(data.begin() + static_cast<long>(lo) * static_cast<long>(sample_size()),
              data.begin() + static_cast<long>(hi) * static_cast<long>(sample_size()),
              out.data.begin());
    return out;
  }

  void clip01() {
    for (float& v : data) v = std::min(1.0f, std::max(0.0f, v));
  }

  bool finite_in_01() const {
    for (const float v : data)
      if (!(v >= 0.0f && v <= 1.0f)) return false;
    return true;
  }
};

inline std::string content_digest(const ImageTensor& t, int i) {
  const auto s = t.sample(i);
  return sha256_hex(s.data(), s.size_bytes());
}

inline std::string tensor_digest(const ImageTensor& t) {
  return sha256_hex(t.data.data(), t.data.size() * sizeof(float));
}

// Dense row-major float matrix; the (n, F) / (n, K) shapes of the pipeline.
struct Matrix {
  int rows = 0, cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(int r, int c)
      : rows(r), cols(c),
        data(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0f) {}

  float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  float at(int r, int c) const {
    return data[static_cast<size_t>(r) * cols + c];
  }
  std::span<float> row(int r) {
    return {data.data() + static_cast<size_t>(r) * cols,
            static_cast<size_t>(cols)};
  }
  std::span<const float> row(int r) const {
    return {data.data() + static_cast<size_t>(r) * cols,
            static_cast<size_t>(cols)};
  }
};

// argmax with ties broken toward the smallest index
inline int argmax_row(std::span<const float> row) {
  int best = 0;
  for (int k = 1; k < static_cast<int>(row.size()); ++k)
    if (row[static_cast<size_t>(k)] > row[static_cast<size_t>(best)]) best = k;
  return best;
}

}  // namespace sfuda
