#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "sfuda/common.hpp"
#include "sfuda/nn.hpp"
#include "sfuda/rng.hpp"
#include "sfuda/tensor.hpp"

namespace sfuda {

struct TrainConfig {
  float learning_rate = 1e-3f;
  int batch_size = 64;
  int epochs = 0;
  Seed seed{0};
  float momentum = 0.0f;
  float weight_decay = 0.0f;

  void validate() const {
    if (learning_rate < 0.0f) throw ConfigError("learning_rate must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
  }
};

struct TrainStats {
  std::vector<double> epoch_losses;  // mean cross-entropy per epoch
  double final_loss() const {
    return epoch_losses.empty() ? 0.0 : epoch_losses.back();
  }
};

namespace detail {

// Per-sample gradient slots summed in index order afterwards, so the result
// is identical for any SFUDA_THREADS setting.
class BatchGradients {
 public:
  BatchGradients(int max_batch, size_t param_count)
      : param_count_(param_count),
        slots_(static_cast<size_t>(max_batch) * param_count, 0.0f) {}

  float* slot(int i) { return slots_.data() + static_cast<size_t>(i) * param_count_; }

  void reduce_mean(int n, std::vector<float>& out) {
    out.assign(param_count_, 0.0f);
    std::vector<double> acc(param_count_, 0.0);
    for (int i = 0; i < n; ++i) {
      const float* g = slot(i);
      for (size_t p = 0; p < param_count_; ++p) acc[p] += static_cast<double>(g[p]);
    }
    const double inv = 1.0 / n;
    for (size_t p = 0; p < param_count_; ++p) out[p] = static_cast<float>(acc[p] * inv);
  }

  void clear(int n) {
    std::fill(slots_.begin(), slots_.begin() + static_cast<long>(n) * static_cast<long>(param_count_), 0.0f);
  }

 private:
  size_t param_count_;
  std::vector<float> slots_;
};

}  // namespace detail

// Plain SGD on mean cross-entropy. Pseudo-labels and real labels go through
// the same path; callers that relabel per epoch just call this with epochs=1.
inline TrainStats train_supervised(Model& model, const LabeledDataset& data,
                                   const TrainConfig& cfg) {
  cfg.validate();
  data.validate();
  if (data.num_classes != model.num_classes())
    throw InvalidInputError("dataset num_classes does not match model");
  model.check_input(data.images);

  TrainStats stats;
  const int n = data.images.n;
  if (n == 0 || cfg.epochs == 0) return stats;

  const int bsz = std::min(cfg.batch_size, n);
  detail::BatchGradients grads(bsz, model.param_count());
  std::vector<float> step_grad;
  std::vector<float> velocity;
  if (cfg.momentum != 0.0f) velocity.assign(model.param_count(), 0.0f);
  std::vector<double> sample_loss(static_cast<size_t>(bsz), 0.0);
  long global_step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order =
        shuffled_indices(n, cfg.seed.child(0xE90C + static_cast<std::uint64_t>(epoch)));
    double epoch_loss = 0.0;
    for (int lo = 0; lo < n; lo += bsz) {
      const int hi = std::min(n, lo + bsz);
      const int m = hi - lo;
      grads.clear(m);
      parallel_for(m, [&](int b) {
        const int idx = order[static_cast<size_t>(lo + b)];
        const int label = data.labels[static_cast<size_t>(idx)];
        std::vector<std::vector<float>> acts;
        model.forward_sample<float>(model.params(),
                                    data.images.sample(idx).data(),
                                    model.layer_count(), acts);
        const auto& z = acts.back();
        sample_loss[static_cast<size_t>(b)] = cross_entropy_row(z, label);
        std::vector<float> dz(z.size());
        softmax_row<float>(z, dz);
        dz[static_cast<size_t>(label)] -= 1.0f;
        model.backward_sample(acts, model.layer_count(), dz.data(),
                              grads.slot(b), nullptr);
      });
      double batch_loss = 0.0;
      for (int b = 0; b < m; ++b) batch_loss += sample_loss[static_cast<size_t>(b)];
      epoch_loss += batch_loss;
      batch_loss /= m;
      ++global_step;
      if (!std::isfinite(batch_loss))
        throw TrainingDivergedError(
            "training diverged (non-finite loss) at step " + std::to_string(global_step),
            global_step);

      grads.reduce_mean(m, step_grad);
      auto& params = model.params();
      if (cfg.weight_decay != 0.0f)
        for (size_t p = 0; p < params.size(); ++p)
          step_grad[p] += cfg.weight_decay * params[p];
      if (cfg.momentum != 0.0f) {
        for (size_t p = 0; p < params.size(); ++p) {
          velocity[p] = cfg.momentum * velocity[p] - cfg.learning_rate * step_grad[p];
          params[p] += velocity[p];
        }
      } else {
        for (size_t p = 0; p < params.size(); ++p)
          params[p] -= cfg.learning_rate * step_grad[p];
      }
    }
    stats.epoch_losses.push_back(epoch_loss / n);
  }
  return stats;
}

// --- scalar objectives over model outputs -----------------------------------

// A scalar function of the model's activations at a fixed tap. `value` is
// evaluated in the caller's precision (the finite-difference tests run it in
// double); `grad` is the float path used by backprop.
class InputObjective {
 public:
  enum class Tap { input, features, logits };

  virtual ~InputObjective() = default;
  virtual Tap tap() const = 0;
  virtual bool differentiable() const { return true; }
  virtual double value(const double* rows, int n, int dim) const = 0;
  virtual Matrix grad(const Matrix& rows) const = 0;
};

class SumOfInputsObjective final : public InputObjective {
 public:
  Tap tap() const override { return Tap::input; }
  double value(const double* rows, int n, int dim) const override {
    double s = 0.0;
    for (long i = 0; i < static_cast<long>(n) * dim; ++i) s += rows[i];
    return s;
  }
  Matrix grad(const Matrix& rows) const override {
    Matrix g(rows.rows, rows.cols);
    std::fill(g.data.begin(), g.data.end(), 1.0f);
    return g;
  }
};

class HalfSquaredNormObjective final : public InputObjective {
 public:
  Tap tap() const override { return Tap::input; }
  double value(const double* rows, int n, int dim) const override {
    double s = 0.0;
    for (long i = 0; i < static_cast<long>(n) * dim; ++i) s += rows[i] * rows[i];
    return 0.5 * s;
  }
  Matrix grad(const Matrix& rows) const override { return rows; }
};

inline constexpr double kProbFloor = 1e-12;

// Mean over paired rows of KL(p_ref || softmax(row)). Reference rows are
// probability vectors fixed at construction.
class FeatureKlObjective final : public InputObjective {
 public:
  explicit FeatureKlObjective(Matrix reference_probs)
      : ref_(std::move(reference_probs)) {}

  Tap tap() const override { return Tap::features; }

  double value(const double* rows, int n, int dim) const override {
    if (n != ref_.rows || dim != ref_.cols)
      throw InvalidInputError("feature KL: batch shape mismatch");
    double total = 0.0;
    std::vector<double> q(static_cast<size_t>(dim));
    for (int j = 0; j < n; ++j) {
      const double* z = rows + static_cast<size_t>(j) * dim;
      double m = z[0];
      for (int k = 0; k < dim; ++k) m = std::max(m, z[k]);
      double sum = 0.0;
      for (int k = 0; k < dim; ++k) {
        q[static_cast<size_t>(k)] = std::exp(z[k] - m);
        sum += q[static_cast<size_t>(k)];
      }
      for (int k = 0; k < dim; ++k) {
        const double p = std::max(static_cast<double>(ref_.at(j, k)), kProbFloor);
        const double qk = std::max(q[static_cast<size_t>(k)] / sum, kProbFloor);
        total += p * (std::log(p) - std::log(qk));
      }
    }
    return total / n;
  }

  Matrix grad(const Matrix& rows) const override {
    if (rows.rows != ref_.rows || rows.cols != ref_.cols)
      throw InvalidInputError("feature KL: batch shape mismatch");
    Matrix g(rows.rows, rows.cols);
    const float inv_n = 1.0f / static_cast<float>(rows.rows);
    std::vector<float> q(static_cast<size_t>(rows.cols));
    for (int j = 0; j < rows.rows; ++j) {
      softmax_row<float>(rows.row(j), q);
      for (int k = 0; k < rows.cols; ++k)
        g.at(j, k) = (q[static_cast<size_t>(k)] - ref_.at(j, k)) * inv_n;
    }
    return g;
  }

  const Matrix& reference() const { return ref_; }

 private:
  Matrix ref_;
};

// Mean cross-entropy of logits against fixed integer labels.
class CrossEntropyObjective final : public InputObjective {
 public:
  explicit CrossEntropyObjective(std::vector<int> labels)
      : labels_(std::move(labels)) {}

  Tap tap() const override { return Tap::logits; }

  double value(const double* rows, int n, int dim) const override {
    double total = 0.0;
    for (int j = 0; j < n; ++j) {
      const double* z = rows + static_cast<size_t>(j) * dim;
      double m = z[0];
      for (int k = 0; k < dim; ++k) m = std::max(m, z[k]);
      double sum = 0.0;
      for (int k = 0; k < dim; ++k) sum += std::exp(z[k] - m);
      total += m + std::log(sum) - z[labels_[static_cast<size_t>(j)]];
    }
    return total / n;
  }

  Matrix grad(const Matrix& rows) const override {
    Matrix g = softmax_rows(rows);
    const float inv_n = 1.0f / static_cast<float>(rows.rows);
    for (int j = 0; j < rows.rows; ++j) {
      g.at(j, labels_[static_cast<size_t>(j)]) -= 1.0f;
      for (int k = 0; k < rows.cols; ++k) g.at(j, k) *= inv_n;
    }
    return g;
  }

 private:
  std::vector<int> labels_;
};

// Argmax accuracy; piecewise constant, so no gradient exists.
class AccuracyObjective final : public InputObjective {
 public:
  explicit AccuracyObjective(std::vector<int> labels)
      : labels_(std::move(labels)) {}
  Tap tap() const override { return Tap::logits; }
  bool differentiable() const override { return false; }
  double value(const double* rows, int n, int dim) const override {
    int correct = 0;
    for (int j = 0; j < n; ++j) {
      const double* z = rows + static_cast<size_t>(j) * dim;
      int best = 0;
      for (int k = 1; k < dim; ++k)
        if (z[k] > z[best]) best = k;
      if (best == labels_[static_cast<size_t>(j)]) ++correct;
    }
    return static_cast<double>(correct) / n;
  }
  Matrix grad(const Matrix&) const override {
    throw UnsupportedObjectiveError("accuracy objective is not differentiable");
  }

 private:
  std::vector<int> labels_;
};

namespace detail {

inline int tap_layer(const Model& m, InputObjective::Tap tap) {
  switch (tap) {
    case InputObjective::Tap::input: return 0;
    case InputObjective::Tap::features: return m.extractor_len();
    case InputObjective::Tap::logits: return m.layer_count();
  }
  return 0;
}

}  // namespace detail

// Objective value with inputs (and optionally parameters) supplied in an
// arbitrary precision T. The finite-difference oracles perturb these T
// buffers directly.
template <class T>
double objective_value_t(const Model& m, const InputObjective& obj,
                         std::span<const T> flat_inputs, int n,
                         std::span<const T> params) {
  const int ss = m.input_shape().size();
  const int tap = detail::tap_layer(m, obj.tap());
  const int dim = tap == 0 ? ss : m.layers()[static_cast<size_t>(tap - 1)].out.size();
  std::vector<double> rows(static_cast<size_t>(n) * static_cast<size_t>(dim));
  std::vector<std::vector<T>> acts;
  for (int i = 0; i < n; ++i) {
    m.forward_sample<T>(params, flat_inputs.data() + static_cast<size_t>(i) * ss, tap, acts);
    const auto& r = acts[static_cast<size_t>(tap)];
    for (int d = 0; d < dim; ++d)
      rows[static_cast<size_t>(i) * dim + d] = static_cast<double>(r[static_cast<size_t>(d)]);
  }
  return obj.value(rows.data(), n, dim);
}

template <class T>
double objective_value_t(const Model& m, const InputObjective& obj,
                         std::span<const T> flat_inputs, int n) {
  std::vector<T> params(m.params().begin(), m.params().end());
  return objective_value_t<T>(m, obj, flat_inputs, n, params);
}

inline double objective_value(const Model& m, const InputObjective& obj,
                              const ImageTensor& x) {
  m.check_input(x);
  return objective_value_t<float>(m, obj, std::span<const float>(x.data), x.n,
                                  m.params());
}

// d objective / d input, same shape as x. Matches central finite differences
// to the float32 noise floor; the standing gradient tests pin that down.
inline ImageTensor grad_wrt_input(const Model& m, const InputObjective& obj,
                                  const ImageTensor& x) {
  if (!obj.differentiable())
    throw UnsupportedObjectiveError("objective does not define a gradient");
  m.check_input(x);
  ImageTensor g(x.n, x.w, x.h, x.c);

  if (obj.tap() == InputObjective::Tap::input) {
    Matrix rows(x.n, static_cast<int>(x.sample_size()));
    std::copy(x.data.begin(), x.data.end(), rows.data.begin());
    const Matrix d = obj.grad(rows);
    std::copy(d.data.begin(), d.data.end(), g.data.begin());
    return g;
  }

  const int tap = detail::tap_layer(m, obj.tap());
  const Matrix tap_rows = m.batch_tap(x, tap);
  const Matrix dtap = obj.grad(tap_rows);
  parallel_for(x.n, [&](int i) {
    std::vector<std::vector<float>> acts;
    m.forward_sample<float>(m.params(), x.sample(i).data(), tap, acts);
    m.backward_sample(acts, tap, dtap.row(i).data(), nullptr, g.sample(i).data());
  });
  return g;
}

// d objective / d params for a fixed batch (used by the gradient-fidelity
// tests against parameter-space finite differences).
inline std::vector<float> grad_wrt_params(const Model& m,
                                          const InputObjective& obj,
                                          const ImageTensor& x) {
  if (!obj.differentiable())
    throw UnsupportedObjectiveError("objective does not define a gradient");
  if (obj.tap() == InputObjective::Tap::input)
    return std::vector<float>(m.param_count(), 0.0f);
  m.check_input(x);
  const int tap = detail::tap_layer(m, obj.tap());
  const Matrix tap_rows = m.batch_tap(x, tap);
  const Matrix dtap = obj.grad(tap_rows);
  std::vector<std::vector<float>> slots(static_cast<size_t>(x.n));
  parallel_for(x.n, [&](int i) {
    auto& slot = slots[static_cast<size_t>(i)];
    slot.assign(m.param_count(), 0.0f);
    std::vector<std::vector<float>> acts;
    m.forward_sample<float>(m.params(), x.sample(i).data(), tap, acts);
    m.backward_sample(acts, tap, dtap.row(i).data(), slot.data(), nullptr);
  });
  std::vector<float> out(m.param_count(), 0.0f);
  std::vector<double> acc(m.param_count(), 0.0);
  for (int i = 0; i < x.n; ++i)
    for (size_t p = 0; p < m.param_count(); ++p)
      acc[p] += static_cast<double>(slots[static_cast<size_t>(i)][p]);
  for (size_t p = 0; p < m.param_count(); ++p) out[p] = static_cast<float>(acc[p]);
  return out;
}

}  // namespace sfuda
