#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "sfuda/common.hpp"
#include "sfuda/rng.hpp"
#include "sfuda/tensor.hpp"

namespace sfuda {

struct KMeansResult {
  Matrix centroids;             // (k, dim)
  std::vector<int> assignment;  // per point
  int iterations = 0;
};

// Lloyd's algorithm. Seeded init from k distinct points; empty clusters are
// re-seeded from the point farthest from its assigned centroid; converges
// when no centroid moves more than tol (L2).
inline KMeansResult kmeans(const Matrix& points, int k, Seed seed,
                           int max_iters = 100, double tol = 1e-6) {
  const int n = points.rows, dim = points.cols;
  if (k < 1) throw ConfigError("kmeans: k must be >= 1");
  if (n < k) throw ConfigError("kmeans: fewer points than clusters");

  KMeansResult res;
  res.centroids = Matrix(k, dim);
  res.assignment.assign(static_cast<size_t>(n), 0);

  Rng rng(seed);
  const auto init = rng.sample_without_replacement(n, k);
  for (int c = 0; c < k; ++c) {
    const auto row = points.row(init[static_cast<size_t>(c)]);
    std::copy(row.begin(), row.end(), res.centroids.row(c).begin());
  }

  std::vector<double> dist2(static_cast<size_t>(n), 0.0);
  for (int iter = 0; iter < max_iters; ++iter) {
    res.iterations = iter + 1;

    for (int i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int best_c = 0;
      const float* p = points.row(i).data();
      for (int c = 0; c < k; ++c) {
        double d = 0.0;
        const float* q = res.centroids.row(c).data();
        for (int j = 0; j < dim; ++j) {
          const double diff = static_cast<double>(p[j]) - q[j];
          d += diff * diff;
        }
        if (d < best) {
          best = d;
          best_c = c;
        }
      }
      res.assignment[static_cast<size_t>(i)] = best_c;
      dist2[static_cast<size_t>(i)] = best;
    }

    std::vector<double> acc(static_cast<size_t>(k) * dim, 0.0);
    std::vector<int> count(static_cast<size_t>(k), 0);
    for (int i = 0; i < n; ++i) {
      const int c = res.assignment[static_cast<size_t>(i)];
      ++count[static_cast<size_t>(c)];
      const float* p = points.row(i).data();
      double* a = acc.data() + static_cast<size_t>(c) * dim;
      for (int j = 0; j < dim; ++j) a[j] += p[j];
    }

    double max_shift2 = 0.0;
    for (int c = 0; c < k; ++c) {
      if (count[static_cast<size_t>(c)] == 0) {
        // farthest point from its own centroid becomes the new seed
        int far = 0;
        for (int i = 1; i < n; ++i)
          if (dist2[static_cast<size_t>(i)] > dist2[static_cast<size_t>(far)]) far = i;
        const auto row = points.row(far);
        std::copy(row.begin(), row.end(), res.centroids.row(c).begin());
        dist2[static_cast<size_t>(far)] = 0.0;  // a point is not picked twice
        max_shift2 = std::numeric_limits<double>::infinity();
        continue;
      }
      double shift2 = 0.0;
      for (int j = 0; j < dim; ++j) {
        const double next =
            acc[static_cast<size_t>(c) * dim + j] / count[static_cast<size_t>(c)];
        const double diff = next - static_cast<double>(res.centroids.at(c, j));
        shift2 += diff * diff;
        res.centroids.at(c, j) = static_cast<float>(next);
      }
      max_shift2 = std::max(max_shift2, shift2);
    }
    if (max_shift2 <= tol * tol) break;
  }
  return res;
}

}  // namespace sfuda
