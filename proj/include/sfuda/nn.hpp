#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfuda/common.hpp"
#include "sfuda/dataset.hpp"
#include "sfuda/rng.hpp"
#include "sfuda/tensor.hpp"

namespace sfuda {

// per-sample activation shape; dense outputs live as (1, 1, d)
struct Shape3 {
  int w = 0, h = 0, c = 0;
  int size() const { return w * h * c; }
  bool operator==(const Shape3&) const = default;
};

enum class LayerKind { conv, relu, maxpool, flatten, dense };

struct LayerSpec {
  LayerKind kind;
  int kernel = 0;        // conv
  int out_channels = 0;  // conv
  int out_dim = 0;       // dense
  int pool = 2;          // maxpool

  static LayerSpec Conv(int kernel, int out_channels) {
    return {LayerKind::conv, kernel, out_channels, 0, 0};
  }
  static LayerSpec Relu() { return {LayerKind::relu}; }
  static LayerSpec MaxPool(int p = 2) { return {LayerKind::maxpool, 0, 0, 0, p}; }
  static LayerSpec Flatten() { return {LayerKind::flatten}; }
  static LayerSpec Dense(int out_dim) {
    return {LayerKind::dense, 0, 0, out_dim, 0};
  }
};

namespace detail {

struct LayerDims {
  LayerSpec spec;
  Shape3 in, out;
  size_t w_off = 0, b_off = 0;
  int w_count = 0, b_count = 0;
};

// --- forward kernels, templated on compute type -------------------------

template <class T>
void conv_forward(const LayerDims& L, const T* wgt, const T* bias, const T* in,
                  T* out) {
  const int k = L.spec.kernel, cin = L.in.c, cout = L.out.c;
  const int ow = L.out.w, oh = L.out.h, ih = L.in.h;
  for (int f = 0; f < cout; ++f) {
    for (int x = 0; x < ow; ++x) {
      for (int y = 0; y < oh; ++y) {
        T acc = bias[f];
        const T* wf = wgt + static_cast<size_t>(f) * k * k * cin;
        for (int dx = 0; dx < k; ++dx)
          for (int dy = 0; dy < k; ++dy) {
            const T* irow = in + (static_cast<size_t>(x + dx) * ih + (y + dy)) * cin;
            const T* wrow = wf + (static_cast<size_t>(dx) * k + dy) * cin;
            for (int ci = 0; ci < cin; ++ci) acc += wrow[ci] * irow[ci];
          }
        out[(static_cast<size_t>(x) * oh + y) * cout + f] = acc;
      }
    }
  }
}

template <class T>
void dense_forward(const LayerDims& L, const T* wgt, const T* bias, const T* in,
                   T* out) {
  const int in_dim = L.in.size(), out_dim = L.out.c;
  for (int o = 0; o < out_dim; ++o) {
    T acc = bias[o];
    const T* wrow = wgt + static_cast<size_t>(o) * in_dim;
    for (int i = 0; i < in_dim; ++i) acc += wrow[i] * in[i];
    out[o] = acc;
  }
}

template <class T>
void maxpool_forward(const LayerDims& L, const T* in, T* out) {
  const int p = L.spec.pool, c = L.in.c, ih = L.in.h;
  for (int x = 0; x < L.out.w; ++x)
    for (int y = 0; y < L.out.h; ++y)
      for (int ch = 0; ch < c; ++ch) {
        T best = in[(static_cast<size_t>(x * p) * ih + y * p) * c + ch];
        for (int dx = 0; dx < p; ++dx)
          for (int dy = 0; dy < p; ++dy) {
            const T v =
                in[(static_cast<size_t>(x * p + dx) * ih + (y * p + dy)) * c + ch];
            if (v > best) best = v;
          }
        out[(static_cast<size_t>(x) * L.out.h + y) * c + ch] = best;
      }
}

// --- float backward kernels ----------------------------------------------

inline void conv_backward(const LayerDims& L, const float* wgt, const float* in,
                          const float* dout, float* dwgt, float* dbias,
                          float* din) {
  const int k = L.spec.kernel, cin = L.in.c, cout = L.out.c;
  const int ow = L.out.w, oh = L.out.h, ih = L.in.h;
  for (int f = 0; f < cout; ++f) {
    const float* wf = wgt + static_cast<size_t>(f) * k * k * cin;
    float* dwf = dwgt ? dwgt + static_cast<size_t>(f) * k * k * cin : nullptr;
    for (int x = 0; x < ow; ++x) {
      for (int y = 0; y < oh; ++y) {
        const float g = dout[(static_cast<size_t>(x) * oh + y) * cout + f];
        if (dbias) dbias[f] += g;
        for (int dx = 0; dx < k; ++dx)
          for (int dy = 0; dy < k; ++dy) {
            const size_t ipix = (static_cast<size_t>(x + dx) * ih + (y + dy)) * cin;
            const size_t wpix = (static_cast<size_t>(dx) * k + dy) * cin;
            for (int ci = 0; ci < cin; ++ci) {
              if (dwf) dwf[wpix + ci] += g * in[ipix + ci];
              if (din) din[ipix + ci] += g * wf[wpix + ci];
            }
          }
      }
    }
  }
}

inline void dense_backward(const LayerDims& L, const float* wgt, const float* in,
                           const float* dout, float* dwgt, float* dbias,
                           float* din) {
  const int in_dim = L.in.size(), out_dim = L.out.c;
  for (int o = 0; o < out_dim; ++o) {
    const float g = dout[o];
    if (dbias) dbias[o] += g;
    const float* wrow = wgt + static_cast<size_t>(o) * in_dim;
    float* dwrow = dwgt ? dwgt + static_cast<size_t>(o) * in_dim : nullptr;
    for (int i = 0; i < in_dim; ++i) {
      if (dwrow) dwrow[i] += g * in[i];
      if (din) din[i] += g * wrow[i];
    }
  }
}

inline void maxpool_backward(const LayerDims& L, const float* in,
                             const float* dout, float* din) {
  const int p = L.spec.pool, c = L.in.c, ih = L.in.h;
  for (int x = 0; x < L.out.w; ++x)
    for (int y = 0; y < L.out.h; ++y)
      for (int ch = 0; ch < c; ++ch) {
        // first maximum wins, matching the forward pass
        int bx = x * p, by = y * p;
        float best = in[(static_cast<size_t>(bx) * ih + by) * c + ch];
        for (int dx = 0; dx < p; ++dx)
          for (int dy = 0; dy < p; ++dy) {
            const float v =
                in[(static_cast<size_t>(x * p + dx) * ih + (y * p + dy)) * c + ch];
            if (v > best) {
              best = v;
              bx = x * p + dx;
              by = y * p + dy;
            }
          }
        din[(static_cast<size_t>(bx) * ih + by) * c + ch] +=
            dout[(static_cast<size_t>(x) * L.out.h + y) * c + ch];
      }
}

}  // namespace detail

// --- softmax / cross-entropy ----------------------------------------------

// stable softmax of one row; accumulation in double regardless of storage
template <class T>
inline void softmax_row(std::span<const T> z, std::span<T> out) {
  double m = static_cast<double>(z[0]);
  for (const T v : z) m = std::max(m, static_cast<double>(v));
  double sum = 0.0;
  for (size_t k = 0; k < z.size(); ++k) {
    const double e = std::exp(static_cast<double>(z[k]) - m);
    out[k] = static_cast<T>(e);
    sum += e;
  }
  for (size_t k = 0; k < z.size(); ++k)
    out[k] = static_cast<T>(static_cast<double>(out[k]) / sum);
}

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows, logits.cols);
  for (int r = 0; r < logits.rows; ++r)
    softmax_row<float>(logits.row(r), out.row(r));
  return out;
}

// -log softmax(z)[label], computed from the log-sum-exp form
inline double cross_entropy_row(std::span<const float> logits, int label) {
  double m = logits[0];
  for (const float v : logits) m = std::max(m, static_cast<double>(v));
  double sum = 0.0;
  for (const float v : logits) sum += std::exp(static_cast<double>(v) - m);
  return m + std::log(sum) - static_cast<double>(logits[static_cast<size_t>(label)]);
}

// --- the model --------------------------------------------------------------

// Feature extractor followed by a classifier head, both built from the same
// layer vocabulary. `extractor_len` marks the split: features are the
// activations after that many layers.
class Model {
 public:
  Model() = default;

  Model(Shape3 input, const std::vector<LayerSpec>& specs, int extractor_len,
        Seed seed)
      : input_(input), extractor_len_(extractor_len) {
    if (input.w <= 0 || input.h <= 0 || input.c <= 0)
      throw ConfigError("model input shape must be positive");
    if (extractor_len < 0 || extractor_len >= static_cast<int>(specs.size()))
      throw ConfigError("extractor_len must leave a non-empty classifier");
    build_dims(specs);
    init_params(seed);
  }

  Shape3 input_shape() const { return input_; }
  int num_classes() const { return layers_.back().out.c; }
  int feature_dim() const { return feature_shape().size(); }
  int layer_count() const { return static_cast<int>(layers_.size()); }
  int extractor_len() const { return extractor_len_; }
  size_t param_count() const { return params_.size(); }
  std::vector<float>& params() { return params_; }
  const std::vector<float>& params() const { return params_; }

  Shape3 feature_shape() const {
    return extractor_len_ == 0 ? input_ : layers_[static_cast<size_t>(extractor_len_ - 1)].out;
  }

  // ---- forward ----

  template <class T>
  void forward_sample(std::span<const T> params, const T* x, int upto,
                      std::vector<std::vector<T>>& acts) const {
    acts.resize(layers_.size() + 1);
    acts[0].assign(x, x + input_.size());
    for (int l = 0; l < upto; ++l) {
      const auto& L = layers_[static_cast<size_t>(l)];
      auto& out = acts[static_cast<size_t>(l) + 1];
      out.assign(static_cast<size_t>(L.out.size()), T(0));
      const T* in = acts[static_cast<size_t>(l)].data();
      const T* wgt = params.data() + L.w_off;
      const T* bias = params.data() + L.b_off;
      switch (L.spec.kind) {
        case LayerKind::conv:
          detail::conv_forward<T>(L, wgt, bias, in, out.data());
          break;
        case LayerKind::dense:
          detail::dense_forward<T>(L, wgt, bias, in, out.data());
          break;
        case LayerKind::relu:
          for (int i = 0; i < L.out.size(); ++i)
            out[static_cast<size_t>(i)] = std::max(T(0), in[i]);
          break;
        case LayerKind::maxpool:
          detail::maxpool_forward<T>(L, in, out.data());
          break;
        case LayerKind::flatten:
          out.assign(in, in + L.in.size());
          break;
      }
    }
  }

  // gradient at acts[tap] propagated back to params and/or the input
  void backward_sample(const std::vector<std::vector<float>>& acts, int tap,
                       const float* dtap, float* dparams, float* dinput) const {
    std::vector<float> dcur(dtap, dtap + layers_[static_cast<size_t>(tap - 1)].out.size());
    std::vector<float> dprev;
    for (int l = tap - 1; l >= 0; --l) {
      const auto& L = layers_[static_cast<size_t>(l)];
      const bool need_din = l > 0 || dinput != nullptr;
      dprev.assign(static_cast<size_t>(L.in.size()), 0.0f);
      const float* in = acts[static_cast<size_t>(l)].data();
      const float* wgt = params_.data() + L.w_off;
      float* dwgt = dparams ? dparams + L.w_off : nullptr;
      float* dbias = dparams ? dparams + L.b_off : nullptr;
      switch (L.spec.kind) {
        case LayerKind::conv:
          detail::conv_backward(L, wgt, in, dcur.data(), dwgt, dbias,
                                need_din ? dprev.data() : nullptr);
          break;
        case LayerKind::dense:
          detail::dense_backward(L, wgt, in, dcur.data(), dwgt, dbias,
                                 need_din ? dprev.data() : nullptr);
          break;
        case LayerKind::relu:
          if (need_din)
            for (int i = 0; i < L.in.size(); ++i)
              dprev[static_cast<size_t>(i)] =
                  in[i] > 0.0f ? dcur[static_cast<size_t>(i)] : 0.0f;
          break;
        case LayerKind::maxpool:
          if (need_din) detail::maxpool_backward(L, in, dcur.data(), dprev.data());
          break;
        case LayerKind::flatten:
          if (need_din) dprev = dcur;
          break;
      }
      dcur.swap(dprev);
    }
    if (dinput != nullptr)
      for (int i = 0; i < input_.size(); ++i) dinput[i] += dcur[static_cast<size_t>(i)];
  }

  Matrix batch_tap(const ImageTensor& x, int upto) const {
    check_input(x);
    const int dim = upto == 0 ? input_.size() : layers_[static_cast<size_t>(upto - 1)].out.size();
    Matrix out(x.n, dim);
    parallel_for(x.n, [&](int i) {
      std::vector<std::vector<float>> acts;
      forward_sample<float>(params_, x.sample(i).data(), upto, acts);
      const auto& row = acts[static_cast<size_t>(upto)];
      std::copy(row.begin(), row.end(), out.row(i).begin());
    });
    return out;
  }

  Matrix logits(const ImageTensor& x) const { return batch_tap(x, layer_count()); }
  Matrix features(const ImageTensor& x) const { return batch_tap(x, extractor_len_); }
  Matrix confidences(const ImageTensor& x) const { return softmax_rows(logits(x)); }

  std::pair<Matrix, Matrix> features_and_logits(const ImageTensor& x) const {
    check_input(x);
    Matrix feat(x.n, feature_dim());
    Matrix lg(x.n, num_classes());
    parallel_for(x.n, [&](int i) {
      std::vector<std::vector<float>> acts;
      forward_sample<float>(params_, x.sample(i).data(), layer_count(), acts);
      const auto& f = acts[static_cast<size_t>(extractor_len_)];
      std::copy(f.begin(), f.end(), feat.row(i).begin());
      const auto& z = acts.back();
      std::copy(z.begin(), z.end(), lg.row(i).begin());
    });
    return {std::move(feat), std::move(lg)};
  }

  std::vector<int> predict(const ImageTensor& x) const {
    const Matrix z = logits(x);
    std::vector<int> out(static_cast<size_t>(x.n));
    for (int i = 0; i < x.n; ++i) out[static_cast<size_t>(i)] = argmax_row(z.row(i));
    return out;
  }

  void check_input(const ImageTensor& x) const {
    if (x.w != input_.w || x.h != input_.h || x.c != input_.c)
      throw InvalidInputError("input shape does not match model");
  }

  // ---- checkpointing ----

  nlohmann::json arch_json() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& L : layers_) {
      nlohmann::json j;
      switch (L.spec.kind) {
        case LayerKind::conv:
          j = {{"kind", "conv"}, {"kernel", L.spec.kernel}, {"out_channels", L.spec.out_channels}};
          break;
        case LayerKind::relu: j = {{"kind", "relu"}}; break;
        case LayerKind::maxpool: j = {{"kind", "maxpool"}, {"pool", L.spec.pool}}; break;
        case LayerKind::flatten: j = {{"kind", "flatten"}}; break;
        case LayerKind::dense: j = {{"kind", "dense"}, {"out_dim", L.spec.out_dim}}; break;
      }
      layers.push_back(std::move(j));
    }
    return {{"input", {input_.w, input_.h, input_.c}},
            {"layers", layers},
            {"extractor_len", extractor_len_}};
  }

  void save(const std::filesystem::path& json_path,
            const std::filesystem::path& bin_path) const {
    const std::string arch = arch_json().dump(2);
    detail::write_file(json_path, arch.data(), arch.size());

    nlohmann::json tensors = nlohmann::json::array();
    for (size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      if (L.w_count == 0) continue;
      const std::string base = "layer" + std::to_string(l);
      nlohmann::json wshape;
      if (L.spec.kind == LayerKind::conv)
        wshape = {L.out.c, L.spec.kernel, L.spec.kernel, L.in.c};
      else
        wshape = {L.out.c, L.in.size()};
      tensors.push_back({{"name", base + ".weight"}, {"shape", wshape}});
      tensors.push_back({{"name", base + ".bias"}, {"shape", {L.b_count}}});
    }
    const std::string header = nlohmann::json{{"tensors", tensors}}.dump();
    std::vector<char> blob;
    const std::uint32_t hlen = static_cast<std::uint32_t>(header.size());
    blob.resize(4 + header.size() + params_.size() * sizeof(float));
    std::memcpy(blob.data(), &hlen, 4);
    std::memcpy(blob.data() + 4, header.data(), header.size());
    std::memcpy(blob.data() + 4 + header.size(), params_.data(),
                params_.size() * sizeof(float));
    detail::write_file(bin_path, blob.data(), blob.size());
  }

  static Model load(const std::filesystem::path& json_path,
                    const std::filesystem::path& bin_path) {
    const auto arch_buf = detail::read_file(json_path);
    nlohmann::json arch;
    try {
      arch = nlohmann::json::parse(arch_buf.begin(), arch_buf.end());
    } catch (const nlohmann::json::exception& e) {
      throw CorruptionError("bad model json: " + std::string(e.what()));
    }
    Shape3 input{arch.at("input").at(0).get<int>(), arch.at("input").at(1).get<int>(),
                 arch.at("input").at(2).get<int>()};
    std::vector<LayerSpec> specs;
    for (const auto& j : arch.at("layers")) {
      const std::string kind = j.at("kind").get<std::string>();
      if (kind == "conv")
        specs.push_back(LayerSpec::Conv(j.at("kernel").get<int>(),
                                        j.at("out_channels").get<int>()));
      else if (kind == "relu") specs.push_back(LayerSpec::Relu());
      else if (kind == "maxpool") specs.push_back(LayerSpec::MaxPool(j.at("pool").get<int>()));
      else if (kind == "flatten") specs.push_back(LayerSpec::Flatten());
      else if (kind == "dense") specs.push_back(LayerSpec::Dense(j.at("out_dim").get<int>()));
      else throw CorruptionError("unknown layer kind: " + kind);
    }
    Model m;
    m.input_ = input;
    m.extractor_len_ = arch.at("extractor_len").get<int>();
    m.build_dims(specs);

    const auto blob = detail::read_file(bin_path);
    if (blob.size() < 4) throw CorruptionError("model.bin truncated");
    std::uint32_t hlen;
    std::memcpy(&hlen, blob.data(), 4);
    if (blob.size() < 4 + static_cast<size_t>(hlen))
      throw CorruptionError("model.bin header truncated");
    const size_t payload = blob.size() - 4 - hlen;
    if (payload != m.params_.size() * sizeof(float))
      throw CorruptionError("model.bin parameter payload size mismatch");
    std::memcpy(m.params_.data(), blob.data() + 4 + hlen, payload);
    return m;
  }

  std::string digest() const {
    Sha256 h;
    const std::string arch = arch_json().dump();
    h.update(arch.data(), arch.size());
    h.update(params_.data(), params_.size() * sizeof(float));
    return to_hex(h.finish());
  }

 private:
  void build_dims(const std::vector<LayerSpec>& specs) {
    Shape3 cur = input_;
    size_t off = 0;
    for (const auto& spec : specs) {
      detail::LayerDims L;
      L.spec = spec;
      L.in = cur;
      switch (spec.kind) {
        case LayerKind::conv: {
          L.out = {cur.w - spec.kernel + 1, cur.h - spec.kernel + 1, spec.out_channels};
          if (L.out.w <= 0 || L.out.h <= 0 || spec.out_channels <= 0 || spec.kernel <= 0)
            throw ConfigError("conv layer shrinks input below 1x1");
          L.w_count = spec.out_channels * spec.kernel * spec.kernel * cur.c;
          L.b_count = spec.out_channels;
          break;
        }
        case LayerKind::relu: L.out = cur; break;
        case LayerKind::maxpool: {
          L.out = {cur.w / spec.pool, cur.h / spec.pool, cur.c};
          if (L.out.w <= 0 || L.out.h <= 0)
            throw ConfigError("maxpool shrinks input below 1x1");
          break;
        }
        case LayerKind::flatten: L.out = {1, 1, cur.size()}; break;
        case LayerKind::dense: {
          if (spec.out_dim <= 0) throw ConfigError("dense out_dim must be positive");
          L.out = {1, 1, spec.out_dim};
          L.w_count = spec.out_dim * cur.size();
          L.b_count = spec.out_dim;
          break;
        }
      }
      L.w_off = off;
      off += static_cast<size_t>(L.w_count);
      L.b_off = off;
      off += static_cast<size_t>(L.b_count);
      layers_.push_back(L);
      cur = L.out;
    }
    params_.assign(off, 0.0f);
  }

  // He-scaled normal init for hidden layers; the classifier head starts at
  // zero so class identity enters only through the labels seen in training.
  void init_params(Seed seed) {
    Rng rng(seed.child(0xA11));
    for (size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      if (L.w_count == 0) continue;
      const bool is_head = static_cast<int>(l) == layer_count() - 1;
      if (is_head) continue;  // stays zero
      int fan_in = 0;
      if (L.spec.kind == LayerKind::conv)
        fan_in = L.spec.kernel * L.spec.kernel * L.in.c;
      else
        fan_in = L.in.size();
      const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (int i = 0; i < L.w_count; ++i)
        params_[L.w_off + static_cast<size_t>(i)] = static_cast<float>(rng.normal() * std);
    }
  }

  Shape3 input_{};
  int extractor_len_ = 0;
  std::vector<detail::LayerDims> layers_;
  std::vector<float> params_;

 public:
  const std::vector<detail::LayerDims>& layers() const { return layers_; }
};

// Conv-block CNN: extractor closes with a dense projection to
// `feature_dim`, classifier is a single affine layer. The second block is
// dropped when the input is too small to carry it.
inline Model build_small_cnn(Shape3 input, int num_classes, Seed seed,
                             int feature_dim = 128) {
  if (num_classes < 2) throw ConfigError("need at least 2 classes");
  std::vector<LayerSpec> specs = {LayerSpec::Conv(3, 8), LayerSpec::Relu(),
                                  LayerSpec::MaxPool(2)};
  const int after1_w = (input.w - 2) / 2, after1_h = (input.h - 2) / 2;
  if (after1_w >= 4 && after1_h >= 4) {
    specs.push_back(LayerSpec::Conv(3, 16));
    specs.push_back(LayerSpec::Relu());
    specs.push_back(LayerSpec::MaxPool(2));
  }
  specs.push_back(LayerSpec::Flatten());
  specs.push_back(LayerSpec::Dense(feature_dim));
  specs.push_back(LayerSpec::Relu());
  const int extractor_len = static_cast<int>(specs.size());
  specs.push_back(LayerSpec::Dense(num_classes));
  return Model(input, specs, extractor_len, seed);
}

// Fully connected stack over a flat input; with no hidden layers the
// extractor reduces to flatten, i.e. features == inputs.
inline Model build_mlp(int input_dim, const std::vector<int>& hidden,
                       int num_classes, Seed seed) {
  if (num_classes < 2) throw ConfigError("need at least 2 classes");
  std::vector<LayerSpec> specs = {LayerSpec::Flatten()};
  for (const int hdim : hidden) {
    specs.push_back(LayerSpec::Dense(hdim));
    specs.push_back(LayerSpec::Relu());
  }
  const int extractor_len = static_cast<int>(specs.size());
  specs.push_back(LayerSpec::Dense(num_classes));
  return Model(Shape3{1, 1, input_dim}, specs, extractor_len, seed);
}

inline void save_checkpoint(const Model& m, const std::filesystem::path& dir,
                            const std::string& stem) {
  std::filesystem::create_directories(dir);
  m.save(dir / (stem + ".json"), dir / (stem + ".bin"));
}

inline Model load_checkpoint(const std::filesystem::path& dir,
                             const std::string& stem) {
  return Model::load(dir / (stem + ".json"), dir / (stem + ".bin"));
}

}  // namespace sfuda
