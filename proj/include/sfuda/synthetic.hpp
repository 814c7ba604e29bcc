#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfuda/common.hpp"
#include "sfuda/dataset.hpp"
#include "sfuda/rng.hpp"
#include "sfuda/tensor.hpp"

namespace sfuda {

// Deterministic per-domain corruption. Zero-strength values make the
// transform the identity, so two domains with zero-strength shifts sample
// the same distribution.
struct DomainShift {
  float rotation_deg = 0.0f;
  float intensity_scale = 1.0f;
  float intensity_shift = 0.0f;
  float noise_sigma = 0.0f;
};

struct SyntheticConfig {
  int num_classes = 10;
  int width = 16, height = 16, channels = 1;
  int samples_per_domain = 2000;
  int third_party_samples = 2000;

  std::vector<DomainShift> sources = {{0.0f, 1.0f, 0.0f, 0.02f},
                                      {12.0f, 0.95f, 0.03f, 0.02f}};
  DomainShift target{30.0f, 0.8f, -0.05f, 0.02f};

  // shared class-generating process (applies in every domain)
  float class_jitter_deg = 6.0f;
  float jitter_translate = 1.5f;
  float base_noise = 0.04f;

  // third-party process: its own prototypes, drawn from a different texture
  // family (shifted frequency band plus a checker component), with wider
  // per-sample variation
  int third_party_prototypes = 30;
  float third_party_jitter_deg = 30.0f;
  float third_party_translate = 3.0f;
  float third_party_noise = 0.06f;
  float third_party_freq_lo = 0.8f;
  float third_party_freq_hi = 3.0f;
  bool third_party_checker = true;

  // test hook: draw the third-party set from the first source's process
  // instead of its own (still unlabeled)
  bool third_party_like_source0 = false;
};

inline void to_json(nlohmann::json& j, const DomainShift& s) {
  j = {{"rotation_deg", s.rotation_deg},
       {"intensity_scale", s.intensity_scale},
       {"intensity_shift", s.intensity_shift},
       {"noise_sigma", s.noise_sigma}};
}

inline void from_json(const nlohmann::json& j, DomainShift& s) {
  s.rotation_deg = j.value("rotation_deg", 0.0f);
  s.intensity_scale = j.value("intensity_scale", 1.0f);
  s.intensity_shift = j.value("intensity_shift", 0.0f);
  s.noise_sigma = j.value("noise_sigma", 0.0f);
}

inline void to_json(nlohmann::json& j, const SyntheticConfig& c) {
  j = {{"num_classes", c.num_classes},
       {"width", c.width},
       {"height", c.height},
       {"channels", c.channels},
       {"samples_per_domain", c.samples_per_domain},
       {"third_party_samples", c.third_party_samples},
       {"sources", c.sources},
       {"target", c.target},
       {"class_jitter_deg", c.class_jitter_deg},
       {"jitter_translate", c.jitter_translate},
       {"base_noise", c.base_noise},
       {"third_party_prototypes", c.third_party_prototypes},
       {"third_party_jitter_deg", c.third_party_jitter_deg},
       {"third_party_translate", c.third_party_translate},
       {"third_party_noise", c.third_party_noise},
       {"third_party_freq_lo", c.third_party_freq_lo},
       {"third_party_freq_hi", c.third_party_freq_hi},
       {"third_party_checker", c.third_party_checker},
       {"third_party_like_source0", c.third_party_like_source0}};
}

inline void from_json(const nlohmann::json& j, SyntheticConfig& c) {
  const SyntheticConfig defaults;
  c.num_classes = j.value("num_classes", defaults.num_classes);
  c.width = j.value("width", defaults.width);
  c.height = j.value("height", defaults.height);
  c.channels = j.value("channels", defaults.channels);
  c.samples_per_domain =
      j.value("samples_per_domain", defaults.samples_per_domain);
  c.third_party_samples =
      j.value("third_party_samples", defaults.third_party_samples);
  if (j.contains("sources"))
    c.sources = j.at("sources").get<std::vector<DomainShift>>();
  if (j.contains("target")) c.target = j.at("target").get<DomainShift>();
  c.class_jitter_deg = j.value("class_jitter_deg", defaults.class_jitter_deg);
  c.jitter_translate = j.value("jitter_translate", defaults.jitter_translate);
  c.base_noise = j.value("base_noise", defaults.base_noise);
  c.third_party_prototypes =
      j.value("third_party_prototypes", defaults.third_party_prototypes);
  c.third_party_jitter_deg =
      j.value("third_party_jitter_deg", defaults.third_party_jitter_deg);
  c.third_party_translate =
      j.value("third_party_translate", defaults.third_party_translate);
  c.third_party_noise = j.value("third_party_noise", defaults.third_party_noise);
  c.third_party_freq_lo = j.value("third_party_freq_lo", defaults.third_party_freq_lo);
  c.third_party_freq_hi = j.value("third_party_freq_hi", defaults.third_party_freq_hi);
  c.third_party_checker = j.value("third_party_checker", defaults.third_party_checker);
  c.third_party_like_source0 =
      j.value("third_party_like_source0", defaults.third_party_like_source0);
}

struct SyntheticSuite {
  std::vector<LabeledDataset> sources;
  LabeledDataset target;
  UnlabeledDataset third_party;
};

namespace detail {

// Single-channel pattern image in [lo, hi], stored as w*h floats.
class Pattern {
 public:
  Pattern(int w, int h) : w_(w), h_(h), px_(static_cast<size_t>(w) * h, 0.0f) {}

  float& at(int x, int y) { return px_[static_cast<size_t>(x) * h_ + y]; }
  float at(int x, int y) const { return px_[static_cast<size_t>(x) * h_ + y]; }

  // border-clamped bilinear lookup at continuous coordinates
  float sample(float fx, float fy) const {
    fx = std::min(static_cast<float>(w_ - 1), std::max(0.0f, fx));
    fy = std::min(static_cast<float>(h_ - 1), std::max(0.0f, fy));
    const int x0 = static_cast<int>(fx);
    const int y0 = static_cast<int>(fy);
    const int x1 = std::min(w_ - 1, x0 + 1);
    const int y1 = std::min(h_ - 1, y0 + 1);
    const float ax = fx - static_cast<float>(x0);
    const float ay = fy - static_cast<float>(y0);
    const float top = at(x0, y0) * (1 - ax) + at(x1, y0) * ax;
    const float bot = at(x0, y1) * (1 - ax) + at(x1, y1) * ax;
    return top * (1 - ay) + bot * ay;
  }

  void normalize(float lo, float hi) {
    float mn = px_[0], mx = px_[0];
    for (const float v : px_) {
      mn = std::min(mn, v);
      mx = std::max(mx, v);
    }
    const float span = (mx - mn) > 1e-9f ? (mx - mn) : 1.0f;
    for (float& v : px_) v = lo + (hi - lo) * (v - mn) / span;
  }

  int w() const { return w_; }
  int h() const { return h_; }

 private:
  int w_, h_;
  std::vector<float> px_;
};

// freq_lo/freq_hi in cycles per image width. Low frequencies give smooth
// blob-like classes; the third-party family uses a higher band plus a
// checker component so the two processes are visibly different.
inline Pattern make_prototype(int w, int h, Rng& rng, float freq_lo,
                              float freq_hi, bool checker) {
  Pattern p(w, h);
  const int gratings = 3;
  for (int g = 0; g < gratings; ++g) {
    const double freq = rng.uniform(freq_lo, freq_hi);
    const double theta = rng.uniform(0.0, 3.141592653589793);
    const double phase = rng.uniform(0.0, 6.283185307179586);
    const double amp = rng.uniform(0.5, 1.0);
    const double kx = std::cos(theta) * freq * 2.0 * 3.141592653589793 / w;
    const double ky = std::sin(theta) * freq * 2.0 * 3.141592653589793 / h;
    for (int x = 0; x < w; ++x)
      for (int y = 0; y < h; ++y)
        p.at(x, y) +=
            static_cast<float>(amp * std::cos(kx * x + ky * y + phase));
  }
  const int bumps = 2;
  for (int b = 0; b < bumps; ++b) {
    const double cx = rng.uniform(0.2, 0.8) * w;
    const double cy = rng.uniform(0.2, 0.8) * h;
    const double sigma = rng.uniform(0.12, 0.25) * w;
    const double amp = rng.uniform(0.8, 1.6) * (rng.uniform() < 0.5 ? -1 : 1);
    for (int x = 0; x < w; ++x)
      for (int y = 0; y < h; ++y) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        p.at(x, y) +=
            static_cast<float>(amp * std::exp(-d2 / (2.0 * sigma * sigma)));
      }
  }
  if (checker) {
    const int cell = rng.uniform_int(2, 3);
    const double amp = rng.uniform(0.4, 0.8);
    for (int x = 0; x < w; ++x)
      for (int y = 0; y < h; ++y)
        p.at(x, y) += static_cast<float>(
            ((x / cell + y / cell) % 2 == 0 ? amp : -amp));
  }
  p.normalize(0.15f, 0.85f);
  return p;
}

struct SampleProcess {
  float jitter_deg;
  float translate;
  float base_noise;
  DomainShift shift;
};

// One sample: rotate by (domain angle + per-sample jitter) about the image
// center, translate, apply intensity scale/shift, add noise, clip.
inline void render_sample(const Pattern& proto, const SampleProcess& sp,
                          Rng& rng, ImageTensor& out, int i) {
  const int w = out.w, h = out.h, c = out.c;
  const double angle = (sp.shift.rotation_deg + rng.normal() * sp.jitter_deg) *
                       3.141592653589793 / 180.0;
  const double dx = rng.uniform(-sp.translate, sp.translate);
  const double dy = rng.uniform(-sp.translate, sp.translate);
  const double cosv = std::cos(angle), sinv = std::sin(angle);
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) {
      // inverse map: output pixel -> source coordinates
      const double rx = x - cx - dx, ry = y - cy - dy;
      const double sx = cosv * rx + sinv * ry + cx;
      const double sy = -sinv * rx + cosv * ry + cy;
      const float base = proto.sample(static_cast<float>(sx),
                                      static_cast<float>(sy));
      for (int ch = 0; ch < c; ++ch) {
        double v = base * sp.shift.intensity_scale + sp.shift.intensity_shift;
        v += rng.normal() * sp.base_noise;
        v += rng.normal() * sp.shift.noise_sigma;
        out.at(i, x, y, ch) =
            static_cast<float>(std::min(1.0, std::max(0.0, v)));
      }
    }
  }
}

inline LabeledDataset generate_domain(const std::vector<Pattern>& protos,
                                      const SampleProcess& sp, int n, Seed seed,
                                      int w, int h, int c) {
  LabeledDataset d;
  d.num_classes = static_cast<int>(protos.size());
  d.images = ImageTensor(n, w, h, c);
  d.labels.resize(static_cast<size_t>(n));
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    const int k = i % d.num_classes;  // interleaved so any prefix is balanced
    d.labels[static_cast<size_t>(i)] = k;
    render_sample(protos[static_cast<size_t>(k)], sp, rng, d.images, i);
  }
  return d;
}

}  // namespace detail

// Shared class prototypes with per-domain corruption for sources/target;
// a separate prototype family for the third-party set.
inline SyntheticSuite make_synthetic_shift_suite(Seed seed,
                                                 const SyntheticConfig& cfg) {
  if (cfg.num_classes < 2)
    throw ConfigError("synthetic suite requires at least 2 classes");
  if (cfg.sources.empty())
    throw ConfigError("synthetic suite requires at least 1 source domain");
  if (cfg.samples_per_domain < 1 || cfg.third_party_samples < 1)
    throw ConfigError("synthetic suite requires positive sample counts");

  const int w = cfg.width, h = cfg.height, c = cfg.channels;

  std::vector<detail::Pattern> class_protos;
  for (int k = 0; k < cfg.num_classes; ++k) {
    Rng rng(seed.child(0x100 + static_cast<std::uint64_t>(k)));
    class_protos.push_back(detail::make_prototype(w, h, rng, 0.5f, 2.2f, false));
  }

  SyntheticSuite suite;
  for (size_t s = 0; s < cfg.sources.size(); ++s) {
    const detail::SampleProcess sp{cfg.class_jitter_deg, cfg.jitter_translate,
                                   cfg.base_noise, cfg.sources[s]};
    suite.sources.push_back(detail::generate_domain(
        class_protos, sp, cfg.samples_per_domain,
        seed.child(0x200 + static_cast<std::uint64_t>(s)), w, h, c));
  }
  {
    const detail::SampleProcess sp{cfg.class_jitter_deg, cfg.jitter_translate,
                                   cfg.base_noise, cfg.target};
    suite.target = detail::generate_domain(class_protos, sp,
                                           cfg.samples_per_domain,
                                           seed.child(0x300), w, h, c);
  }

  if (cfg.third_party_like_source0) {
    const detail::SampleProcess sp{cfg.class_jitter_deg, cfg.jitter_translate,
                                   cfg.base_noise, cfg.sources[0]};
    LabeledDataset mirrored = detail::generate_domain(
        class_protos, sp, cfg.third_party_samples, seed.child(0x400), w, h, c);
    suite.third_party = strip_labels(mirrored);
  } else {
    std::vector<detail::Pattern> tp_protos;
    for (int k = 0; k < cfg.third_party_prototypes; ++k) {
      Rng rng(seed.child(0x500 + static_cast<std::uint64_t>(k)));
      tp_protos.push_back(detail::make_prototype(w, h, rng,
                                                 cfg.third_party_freq_lo,
                                                 cfg.third_party_freq_hi,
                                                 cfg.third_party_checker));
    }
    const detail::SampleProcess sp{cfg.third_party_jitter_deg,
                                   cfg.third_party_translate,
                                   cfg.third_party_noise,
                                   DomainShift{}};
    LabeledDataset tp = detail::generate_domain(
        tp_protos, sp, cfg.third_party_samples, seed.child(0x400), w, h, c);
    suite.third_party = strip_labels(tp);
  }
  return suite;
}

}  // namespace sfuda
