#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfuda/common.hpp"
#include "sfuda/dataset.hpp"
#include "sfuda/nn.hpp"
#include "sfuda/rng.hpp"
#include "sfuda/train.hpp"

namespace sfuda {

struct DatConfig {
  int iterations = 5;
  float step_size = 5.0f;  // mu; 0 degenerates to the identity
  int batch_size = 64;
  int backtrack_max = 5;   // halvings tried before a step is skipped
  Seed pairing_seed{0};

  void validate() const {
    if (iterations < 1) throw ConfigError("DAT iterations must be >= 1");
    if (step_size < 0.0f) throw ConfigError("DAT step size must be >= 0");
    if (batch_size < 1) throw ConfigError("DAT batch size must be >= 1");
  }
};

namespace detail {

// feature rows -> per-sample distribution over the feature dimension
inline Matrix feature_distribution(const Matrix& features) {
  Matrix out(features.rows, features.cols);
  for (int j = 0; j < features.rows; ++j)
    softmax_row<float>(features.row(j), out.row(j));
  return out;
}

// mean_j KL(p_j || q_j) with both rows floored at 1e-12
inline double kl_rows(const Matrix& p, const Matrix& q) {
  double total = 0.0;
  for (int j = 0; j < p.rows; ++j)
    for (int k = 0; k < p.cols; ++k) {
      const double pj = std::max(static_cast<double>(p.at(j, k)), kProbFloor);
      const double qj = std::max(static_cast<double>(q.at(j, k)), kProbFloor);
      total += pj * (std::log(pj) - std::log(qj));
    }
  return total / p.rows;
}

}  // namespace detail

// Mean per-pair KL divergence between the feature distributions of two
// equally sized batches; pairing is positional, target is the reference.
inline double feature_kl(const Model& model, const ImageTensor& target_batch,
                         const ImageTensor& third_batch) {
  if (target_batch.n != third_batch.n)
    throw InvalidInputError("feature_kl: batch sizes differ");
  const Matrix p = detail::feature_distribution(model.features(target_batch));
  const Matrix q = detail::feature_distribution(model.features(third_batch));
  return detail::kl_rows(p, q);
}

struct DatBatchStats {
  double kl_before = 0.0;
  double kl_after = 0.0;
};

struct DatResult {
  UnlabeledDataset adversarial;
  std::vector<DatBatchStats> batches;

  double mean_kl_before() const {
    double s = 0.0;
    for (const auto& b : batches) s += b.kl_before;
    return batches.empty() ? 0.0 : s / static_cast<double>(batches.size());
  }
  double mean_kl_after() const {
    double s = 0.0;
    for (const auto& b : batches) s += b.kl_after;
    return batches.empty() ? 0.0 : s / static_cast<double>(batches.size());
  }
  int improved_batches() const {
    int n = 0;
    for (const auto& b : batches)
      if (b.kl_after < b.kl_before) ++n;
    return n;
  }
};

// Gradient descent on the third-party pixels toward the paired target
// batch's feature distribution. Model and target are read-only; the clip
// keeps every iterate in [0, 1]. Each step backtracks (halving the step up
// to backtrack_max times) and is skipped outright if the batch objective
// still would not decrease, so the final KL never exceeds the initial one.
inline DatResult dat_generate(const Model& model, const UnlabeledDataset& target,
                              const UnlabeledDataset& third_party,
                              const DatConfig& cfg) {
  cfg.validate();
  if (third_party.images.n < 1)
    throw InvalidInputError("dat_generate: empty third-party set");
  if (target.images.n < 1)
    throw InvalidInputError("dat_generate: empty target set");
  model.check_input(third_party.images);
  model.check_input(target.images);

  const ImageTensor& third = third_party.images;
  ImageTensor out(third.n, third.w, third.h, third.c);
  DatResult result;
  Rng pairing(cfg.pairing_seed);

  for (int lo = 0; lo < third.n; lo += cfg.batch_size) {
    const int hi = std::min(third.n, lo + cfg.batch_size);
    const int m = hi - lo;

    // one randomly drawn target batch per third-party batch
    ImageTensor target_batch(m, third.w, third.h, third.c);
    {
      const int draw = std::min(m, target.images.n);
      const auto idx = pairing.sample_without_replacement(target.images.n, draw);
      for (int i = 0; i < m; ++i) {
        const auto src = target.images.sample(idx[static_cast<size_t>(i % draw)]);
        std::copy(src.begin(), src.end(), target_batch.sample(i).begin());
      }
    }

    const Matrix ref =
        detail::feature_distribution(model.features(target_batch));
    FeatureKlObjective objective(ref);

    ImageTensor xe = third.slice(lo, hi);
    double kl_cur = detail::kl_rows(ref, detail::feature_distribution(model.features(xe)));
    DatBatchStats stats;
    stats.kl_before = kl_cur;

    for (int t = 0; t < cfg.iterations; ++t) {
      const ImageTensor grad = grad_wrt_input(model, objective, xe);
      float step = cfg.step_size;
      bool accepted = false;
      for (int attempt = 0; attempt <= cfg.backtrack_max; ++attempt) {
        ImageTensor cand = xe;
        for (size_t i = 0; i < cand.data.size(); ++i)
          cand.data[i] -= step * grad.data[i];
        cand.clip01();
        const double kl_new =
            detail::kl_rows(ref, detail::feature_distribution(model.features(cand)));
        if (kl_new <= kl_cur) {
          xe = std::move(cand);
          kl_cur = kl_new;
          accepted = true;
          break;
        }
        step *= 0.5f;
      }
      if (!accepted) break;  // no acceptable step at any scale
    }

    stats.kl_after = kl_cur;
    result.batches.push_back(stats);
    std::copy(xe.data.begin(), xe.data.end(),
              out.data.begin() + static_cast<long>(lo) * static_cast<long>(out.sample_size()));
  }

  result.adversarial = UnlabeledDataset::from_images(std::move(out));
  return result;
}

// Adversarial set shares the dataset directory format; provenance records
// where it came from and under which knobs.
inline void save_adversarial(const std::filesystem::path& dir,
                             const UnlabeledDataset& adversarial,
                             const UnlabeledDataset& origin,
                             const DatConfig& cfg) {
  save_dataset(dir, adversarial, PixelDtype::f32);
  const nlohmann::json prov = {
      {"source_dataset_digest", tensor_digest(origin.images)},
      {"config",
       {{"iterations", cfg.iterations},
        {"step_size", cfg.step_size},
        {"batch_size", cfg.batch_size},
        {"backtrack_max", cfg.backtrack_max}}},
      {"pairing_seed", cfg.pairing_seed.value}};
  const std::string text = prov.dump(2);
  detail::write_file(dir / "provenance.json", text.data(), text.size());
}

}  // namespace sfuda
