#pragma once

#include <cmath>
#include <vector>

#include "sfuda/common.hpp"
#include "sfuda/dataset.hpp"
#include "sfuda/nn.hpp"
#include "sfuda/tensor.hpp"

namespace sfuda {

// Confidence reweighting: divide each entry by the square root of its
// class's dataset-wide column mass, then renormalize rows. Column sums run
// over the whole matrix, which is why callers must never refine per batch.
inline Matrix depict_refine(const Matrix& p) {
  if (p.rows < 1 || p.cols < 1)
    throw InvalidInputError("depict_refine: empty confidence matrix");

  std::vector<double> col_sum(static_cast<size_t>(p.cols), 0.0);
  for (int j = 0; j < p.rows; ++j) {
    double row_sum = 0.0;
    for (int k = 0; k < p.cols; ++k) {
      const float v = p.at(j, k);
      if (!(v >= 0.0f))
        throw InvalidInputError("depict_refine: negative or non-finite entry");
      row_sum += v;
      col_sum[static_cast<size_t>(k)] += v;
    }
    if (std::abs(row_sum - 1.0) > 1e-4)
      throw InvalidInputError("depict_refine: row does not sum to 1");
  }

  std::vector<double> divisor(static_cast<size_t>(p.cols));
  for (int k = 0; k < p.cols; ++k) {
    const double s = col_sum[static_cast<size_t>(k)];
    // empty column: no mass anywhere, keep the divisor tiny instead of
    // dividing by zero (the numerators in that column are all zero anyway)
    divisor[static_cast<size_t>(k)] = s > 0.0 ? std::sqrt(s) : 1e-12;
  }

  Matrix q(p.rows, p.cols);
  for (int j = 0; j < p.rows; ++j) {
    double row_sum = 0.0;
    std::vector<double> u(static_cast<size_t>(p.cols));
    for (int k = 0; k < p.cols; ++k) {
      u[static_cast<size_t>(k)] =
          static_cast<double>(p.at(j, k)) / divisor[static_cast<size_t>(k)];
      row_sum += u[static_cast<size_t>(k)];
    }
    for (int k = 0; k < p.cols; ++k)
      q.at(j, k) = static_cast<float>(u[static_cast<size_t>(k)] / row_sum);
  }
  return q;
}

struct Centroids {
  Matrix rho;                // (K, F)
  std::vector<bool> empty;   // class had < 1e-12 total refined confidence
};

// rho_k = sum_j q_hat[j][k] * f_j / sum_j q_hat[j][k]
inline Centroids weighted_centroids(const Matrix& features, const Matrix& q_hat) {
  if (features.rows != q_hat.rows)
    throw InvalidInputError("weighted_centroids: row counts differ");
  const int n = features.rows, f_dim = features.cols, k_dim = q_hat.cols;
  std::vector<double> mass(static_cast<size_t>(k_dim), 0.0);
  std::vector<double> acc(static_cast<size_t>(k_dim) * f_dim, 0.0);
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < k_dim; ++k) {
      const double w = q_hat.at(j, k);
      mass[static_cast<size_t>(k)] += w;
      double* row = acc.data() + static_cast<size_t>(k) * f_dim;
      const float* feat = features.row(j).data();
      for (int d = 0; d < f_dim; ++d) row[d] += w * feat[d];
    }

  Centroids c;
  c.rho = Matrix(k_dim, f_dim);
  c.empty.assign(static_cast<size_t>(k_dim), false);
  for (int k = 0; k < k_dim; ++k) {
    if (mass[static_cast<size_t>(k)] < 1e-12) {
      c.empty[static_cast<size_t>(k)] = true;
      continue;
    }
    for (int d = 0; d < f_dim; ++d)
      c.rho.at(k, d) = static_cast<float>(
          acc[static_cast<size_t>(k) * f_dim + d] / mass[static_cast<size_t>(k)]);
  }
  return c;
}

// Nearest centroid by cosine distance; exact ties go to the smallest class.
// Rows with no usable cosine (zero feature norm, or every non-empty centroid
// at the bit-identical distance, as happens when n=1 makes all centroids
// coincide) fall back to the argmax of the sample's q_hat row when provided.
inline std::vector<int> cosine_assign(const Matrix& features,
                                      const Centroids& centroids,
                                      const Matrix* q_hat_fallback = nullptr) {
  const int n = features.rows, k_dim = centroids.rho.rows;
  std::vector<double> cent_norm(static_cast<size_t>(k_dim), 0.0);
  int usable = 0;
  for (int k = 0; k < k_dim; ++k) {
    if (centroids.empty[static_cast<size_t>(k)]) continue;
    double s = 0.0;
    for (int d = 0; d < centroids.rho.cols; ++d) {
      const double v = centroids.rho.at(k, d);
      s += v * v;
    }
    cent_norm[static_cast<size_t>(k)] = std::sqrt(s);
    if (cent_norm[static_cast<size_t>(k)] > 0.0) ++usable;
  }
  if (usable == 0) throw InvalidInputError("cosine_assign: all centroids empty");

  std::vector<int> labels(static_cast<size_t>(n), 0);
  for (int j = 0; j < n; ++j) {
    double feat_norm = 0.0;
    const float* f = features.row(j).data();
    for (int d = 0; d < features.cols; ++d)
      feat_norm += static_cast<double>(f[d]) * f[d];
    feat_norm = std::sqrt(feat_norm);

    const auto fallback = [&]() -> int {
      if (q_hat_fallback != nullptr) return argmax_row(q_hat_fallback->row(j));
      return 0;
    };
    if (feat_norm == 0.0) {
      labels[static_cast<size_t>(j)] = fallback();
      continue;
    }

    int best = -1;
    double best_dist = 0.0;
    bool all_equal = true;
    for (int k = 0; k < k_dim; ++k) {
      if (centroids.empty[static_cast<size_t>(k)] ||
          cent_norm[static_cast<size_t>(k)] == 0.0)
        continue;
      double dot = 0.0;
      for (int d = 0; d < features.cols; ++d)
        dot += static_cast<double>(f[d]) * centroids.rho.at(k, d);
      const double dist = 1.0 - dot / (feat_norm * cent_norm[static_cast<size_t>(k)]);
      if (best < 0) {
        best = k;
        best_dist = dist;
      } else if (dist != best_dist) {
        all_equal = false;
        if (dist < best_dist) {
          best = k;
          best_dist = dist;
        }
      }
    }
    labels[static_cast<size_t>(j)] =
        (all_equal && usable > 1) ? fallback() : best;
  }
  return labels;
}

// softmax -> DEPICT refinement -> confidence-weighted centroids -> cosine
// reassignment, all dataset-wide. `iterations` > 1 repeats the centroid /
// assignment step on the one-hot labels of the previous pass.
inline std::vector<int> pseudo_label_target(const Model& model,
                                            const UnlabeledDataset& target,
                                            int iterations = 1) {
  if (target.images.n < 1)
    throw InvalidInputError("pseudo_label_target: empty target set");
  auto [features, logits] = model.features_and_logits(target.images);
  const Matrix p = softmax_rows(logits);
  const Matrix q_hat = depict_refine(p);
  Centroids cents = weighted_centroids(features, q_hat);
  std::vector<int> labels = cosine_assign(features, cents, &q_hat);
  for (int it = 1; it < iterations; ++it) {
    Matrix onehot(features.rows, q_hat.cols);
    for (int j = 0; j < features.rows; ++j)
      onehot.at(j, labels[static_cast<size_t>(j)]) = 1.0f;
    cents = weighted_centroids(features, onehot);
    labels = cosine_assign(features, cents, &q_hat);
  }
  return labels;
}

}  // namespace sfuda
