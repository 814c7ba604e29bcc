#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfuda/common.hpp"
#include "sfuda/tensor.hpp"

namespace sfuda {

struct LabeledDataset {
  ImageTensor images;
  std::vector<std::int32_t> labels;
  int num_classes = 0;

  void validate() const {
    if (static_cast<int>(labels.size()) != images.n)
      throw InvalidInputError("LabeledDataset: labels length != image count");
    for (const std::int32_t y : labels)
      if (y < 0 || y >= num_classes)
        throw InvalidInputError("LabeledDataset: label out of range");
  }
};

// sample_id = "<sha256 of the sample's raw float32 bytes>:<index>". The
// digest half is what the oracle boundary guard matches on; the index makes
// ids unique in the presence of duplicate images.
struct UnlabeledDataset {
  ImageTensor images;
  std::vector<std::string> sample_ids;

  static UnlabeledDataset from_images(ImageTensor imgs) {
    UnlabeledDataset d;
    d.sample_ids.reserve(static_cast<size_t>(imgs.n));
    for (int i = 0; i < imgs.n; ++i)
      d.sample_ids.push_back(content_digest(imgs, i) + ":" + std::to_string(i));
    d.images = std::move(imgs);
    return d;
  }

  std::string content_digest_of(int i) const {
    const std::string& id = sample_ids[static_cast<size_t>(i)];
    return id.substr(0, id.find(':'));
  }
};

inline UnlabeledDataset strip_labels(const LabeledDataset& d) {
  return UnlabeledDataset::from_images(d.images);
}

enum class PixelDtype { u8, f32 };

namespace detail {

inline void write_file(const std::filesystem::path& p, const void* data,
                       size_t len) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + p.string());
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
  if (!f) throw IoError("write failed: " + p.string());
}

inline std::vector<char> read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("missing file: " + p.string());
  const std::streamsize len = f.tellg();
  f.seekg(0);
  std::vector<char> buf(static_cast<size_t>(len));
  if (len > 0) f.read(buf.data(), len);
  if (!f) throw IoError("read failed: " + p.string());
  return buf;
}

inline void save_images(const std::filesystem::path& dir,
                        const ImageTensor& images, PixelDtype dtype,
                        bool labeled, int num_classes) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json meta = {{"n", images.n},
                         {"w", images.w},
                         {"h", images.h},
                         {"c", images.c},
                         {"dtype", dtype == PixelDtype::u8 ? "u8" : "f32"},
                         {"labeled", labeled}};
  if (labeled) meta["num_classes"] = num_classes;
  const std::string meta_str = meta.dump(2);
  write_file(dir / "meta.json", meta_str.data(), meta_str.size());

  if (dtype == PixelDtype::u8) {
    std::vector<std::uint8_t> bytes(images.size());
    for (size_t i = 0; i < images.size(); ++i) {
      const float v = std::min(1.0f, std::max(0.0f, images.data[i]));
      bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    write_file(dir / "images.bin", bytes.data(), bytes.size());
  } else {
    write_file(dir / "images.bin", images.data.data(),
               images.size() * sizeof(float));
  }
}

}  // namespace detail

inline void save_dataset(const std::filesystem::path& dir,
                         const LabeledDataset& d,
                         PixelDtype dtype = PixelDtype::f32) {
  d.validate();
  detail::save_images(dir, d.images, dtype, true, d.num_classes);
  detail::write_file(dir / "labels.bin", d.labels.data(),
                     d.labels.size() * sizeof(std::int32_t));
}

inline void save_dataset(const std::filesystem::path& dir,
                         const UnlabeledDataset& d,
                         PixelDtype dtype = PixelDtype::f32) {
  detail::save_images(dir, d.images, dtype, false, 0);
}

using AnyDataset = std::variant<LabeledDataset, UnlabeledDataset>;

inline AnyDataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const auto meta_buf = detail::read_file(dir / "meta.json");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_buf.begin(), meta_buf.end());
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError("bad meta.json: " + std::string(e.what()));
  }

  int n, w, h, c;
  std::string dtype;
  bool labeled;
  try {
    n = meta.at("n").get<int>();
    w = meta.at("w").get<int>();
    h = meta.at("h").get<int>();
    c = meta.at("c").get<int>();
    dtype = meta.at("dtype").get<std::string>();
    labeled = meta.at("labeled").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError("meta.json missing field: " + std::string(e.what()));
  }
  if (n < 0 || w <= 0 || h <= 0 || c <= 0)
    throw CorruptionError("meta.json declares a non-positive shape");
  if (dtype != "u8" && dtype != "f32")
    throw CorruptionError("meta.json dtype must be u8 or f32");

  ImageTensor images(n, w, h, c);
  const auto raw = detail::read_file(dir / "images.bin");
  const size_t elems = images.size();
  if (dtype == "u8") {
    if (raw.size() != elems)
      throw CorruptionError("images.bin size mismatch: expected " +
                            std::to_string(elems) + " bytes, got " +
                            std::to_string(raw.size()));
    for (size_t i = 0; i < elems; ++i)
      images.data[i] =
          static_cast<float>(static_cast<std::uint8_t>(raw[i])) / 255.0f;
  } else {
    if (raw.size() != elems * sizeof(float))
      throw CorruptionError("images.bin size mismatch: expected " +
                            std::to_string(elems * sizeof(float)) +
                            " bytes, got " + std::to_string(raw.size()));
    std::memcpy(images.data.data(), raw.data(), raw.size());
  }

  if (!labeled) return UnlabeledDataset::from_images(std::move(images));

  LabeledDataset d;
  d.num_classes = meta.value("num_classes", 0);
  if (d.num_classes < 1)
    throw CorruptionError("labeled dataset without a valid num_classes");
  const auto lraw = detail::read_file(dir / "labels.bin");
  if (lraw.size() != static_cast<size_t>(n) * sizeof(std::int32_t))
    throw CorruptionError("labels.bin size mismatch");
  d.labels.resize(static_cast<size_t>(n));
  std::memcpy(d.labels.data(), lraw.data(), lraw.size());
  d.images = std::move(images);
  d.validate();
  return d;
}

inline LabeledDataset load_labeled(const std::filesystem::path& dir) {
  auto any = load_dataset(dir);
  if (auto* d = std::get_if<LabeledDataset>(&any)) return std::move(*d);
  throw InvalidInputError("dataset at " + dir.string() + " is unlabeled");
}

inline UnlabeledDataset load_unlabeled(const std::filesystem::path& dir) {
  auto any = load_dataset(dir);
  if (auto* d = std::get_if<UnlabeledDataset>(&any)) return std::move(*d);
  // A labeled dataset can always be used as a query set.
  return strip_labels(std::get<LabeledDataset>(any));
}

// Deterministic prefix/suffix split. Suite generation interleaves classes,
// so both halves stay balanced.
inline std::pair<LabeledDataset, LabeledDataset> split_labeled(
    const LabeledDataset& d, double first_fraction) {
  const int cut = static_cast<int>(d.images.n * first_fraction);
  LabeledDataset a, b;
  a.num_classes = b.num_classes = d.num_classes;
  a.images = d.images.slice(0, cut);
  b.images = d.images.slice(cut, d.images.n);
  a.labels.assign(d.labels.begin(), d.labels.begin() + cut);
  b.labels.assign(d.labels.begin() + cut, d.labels.end());
  return {std::move(a), std::move(b)};
}

}  // namespace sfuda
