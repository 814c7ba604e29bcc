#pragma once

#include <algorithm>
#include <vector>

#include "sfuda/common.hpp"
#include "sfuda/dataset.hpp"
#include "sfuda/nn.hpp"
#include "sfuda/rng.hpp"
#include "sfuda/train.hpp"

namespace sfuda {

// (soft label, membership bit) pairs, balanced by truncating the larger pool.
struct AttackDataset {
  Matrix x;            // (n, K) shadow-model confidences
  std::vector<int> y;  // 1 = in the shadow's training set

  int size() const { return x.rows; }
};

inline AttackDataset build_attack_dataset(const Model& shadow,
                                          const LabeledDataset& member_pool,
                                          const LabeledDataset& nonmember_pool) {
  if (member_pool.images.n == 0 || nonmember_pool.images.n == 0)
    throw InvalidInputError("attack dataset pools must be non-empty");
  const int per_side = std::min(member_pool.images.n, nonmember_pool.images.n);
  const Matrix mem = shadow.confidences(member_pool.images.slice(0, per_side));
  const Matrix non = shadow.confidences(nonmember_pool.images.slice(0, per_side));

  AttackDataset d;
  d.x = Matrix(2 * per_side, shadow.num_classes());
  d.y.assign(static_cast<size_t>(2 * per_side), 0);
  for (int i = 0; i < per_side; ++i) {
    std::copy(mem.row(i).begin(), mem.row(i).end(), d.x.row(i).begin());
    d.y[static_cast<size_t>(i)] = 1;
    std::copy(non.row(i).begin(), non.row(i).end(),
              d.x.row(per_side + i).begin());
  }
  return d;
}

// Confidence rows repackaged as (n, 1, 1, K) inputs; rows of a softmax are
// already inside the legal [0, 1] pixel range.
inline LabeledDataset attack_rows_to_dataset(const Matrix& rows,
                                             const std::vector<int>& y) {
  LabeledDataset d;
  d.images = ImageTensor(rows.rows, 1, 1, rows.cols);
  std::copy(rows.data.begin(), rows.data.end(), d.images.data.begin());
  d.labels.assign(y.begin(), y.end());
  d.num_classes = 2;
  return d;
}

struct AttackTrainResult {
  Model model;
  double held_out_accuracy = 0.0;  // on a 20% split never trained on
};

// 5 affine layers (K -> 128 -> 64 -> 32 -> 16 -> 2) with ReLU between.
inline AttackTrainResult train_attack_model(const AttackDataset& data,
                                            const TrainConfig& cfg) {
  if (data.size() < 2) throw InvalidInputError("attack dataset too small");
  const auto order = shuffled_indices(data.size(), cfg.seed.child(0xA7));
  const int train_n = std::max(1, data.size() * 4 / 5);

  Matrix train_x(train_n, data.x.cols);
  std::vector<int> train_y(static_cast<size_t>(train_n));
  const int held_n = data.size() - train_n;
  Matrix held_x(std::max(held_n, 0), data.x.cols);
  std::vector<int> held_y(static_cast<size_t>(std::max(held_n, 0)));
  for (int i = 0; i < data.size(); ++i) {
    const int src = order[static_cast<size_t>(i)];
    if (i < train_n) {
      std::copy(data.x.row(src).begin(), data.x.row(src).end(),
                train_x.row(i).begin());
      train_y[static_cast<size_t>(i)] = data.y[static_cast<size_t>(src)];
    } else {
      std::copy(data.x.row(src).begin(), data.x.row(src).end(),
                held_x.row(i - train_n).begin());
      held_y[static_cast<size_t>(i - train_n)] = data.y[static_cast<size_t>(src)];
    }
  }

  AttackTrainResult out{
      build_mlp(data.x.cols, {128, 64, 32, 16}, 2, cfg.seed), 0.0};
  const LabeledDataset train = attack_rows_to_dataset(train_x, train_y);
  train_supervised(out.model, train, cfg);

  if (held_n > 0) {
    const LabeledDataset held = attack_rows_to_dataset(held_x, held_y);
    const auto pred = out.model.predict(held.images);
    int correct = 0;
    for (int i = 0; i < held_n; ++i)
      if (pred[static_cast<size_t>(i)] == held.labels[static_cast<size_t>(i)]) ++correct;
    out.held_out_accuracy = 100.0 * correct / held_n;
  }
  return out;
}

// Judgement accuracy of the attack model against a victim whose true
// member/non-member split the evaluator knows. Pools are balanced the same
// way the attack dataset was.
inline double judge(const Model& attack, const Model& victim,
                    const LabeledDataset& member_pool,
                    const LabeledDataset& nonmember_pool) {
  const AttackDataset d = build_attack_dataset(victim, member_pool, nonmember_pool);
  const LabeledDataset as_ds = attack_rows_to_dataset(d.x, d.y);
  const auto pred = attack.predict(as_ds.images);
  int correct = 0;
  for (int i = 0; i < d.size(); ++i)
    if (pred[static_cast<size_t>(i)] == d.y[static_cast<size_t>(i)]) ++correct;
  return 100.0 * correct / d.size();
}

}  // namespace sfuda
