#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hcmamba/errors.hpp"
#include "hcmamba/netpbm.hpp"
#include "hcmamba/rng.hpp"
#include "hcmamba/tensor.hpp"

namespace hcm {

struct SyntheticSpec {
  int64_t image_size = 64;   // square side, must be a multiple of 32
  int64_t num_images = 200;
  int64_t num_classes = 2;   // background plus 1 or 2 foreground classes
  double noise_amplitude = 0.08;
  uint64_t seed = 7;
};

namespace detail {

struct Blob {
  bool is_ellipse = true;
  int64_t class_id = 1;
  double color[3] = {0, 0, 0};
  // Ellipse: center, semi-axes, rotation.
  double cy = 0, cx = 0, ay = 0, ax = 0, rot = 0;
  // Polygon: star-shaped vertex loop around the center.
  std::vector<double> vy, vx;

  bool contains(double y, double x) const {
    if (is_ellipse) {
      double dy = y - cy, dx = x - cx;
      double c = std::cos(rot), s = std::sin(rot);
      double u = c * dx + s * dy;
      double v = -s * dx + c * dy;
      return (u * u) / (ax * ax) + (v * v) / (ay * ay) <= 1.0;
    }
    // Crossing-number test; vertices are angle-sorted so the loop is simple.
    bool inside = false;
    size_t n = vy.size();
    for (size_t i = 0, j = n - 1; i < n; j = i++) {
      if ((vy[i] > y) != (vy[j] > y)) {
        double t = (y - vy[i]) / (vy[j] - vy[i]);
        if (x < vx[i] + t * (vx[j] - vx[i])) inside = !inside;
      }
    }
    return inside;
  }
};

inline Blob random_blob(SplitMix64& rng, int64_t size, int64_t num_classes) {
  Blob b;
  b.is_ellipse = rng.uniform() < 0.6;
  b.class_id = num_classes == 2 ? 1 : 1 + static_cast<int64_t>(rng.below(2));
  double s = static_cast<double>(size);
  b.cy = rng.uniform(0.2, 0.8) * s;
  b.cx = rng.uniform(0.2, 0.8) * s;
  if (b.is_ellipse) {
    b.ay = rng.uniform(0.08, 0.28) * s;
    b.ax = rng.uniform(0.08, 0.28) * s;
    b.rot = rng.uniform(0.0, 3.14159265358979323846);
  } else {
    int64_t k = 5 + static_cast<int64_t>(rng.below(5));
    double step = 2.0 * 3.14159265358979323846 / static_cast<double>(k);
    for (int64_t i = 0; i < k; ++i) {
      double angle = step * static_cast<double>(i) + rng.uniform(-0.3, 0.3) * step;
      double radius = rng.uniform(0.10, 0.26) * s;
      b.vy.push_back(b.cy + radius * std::sin(angle));
      b.vx.push_back(b.cx + radius * std::cos(angle));
    }
  }
  double base[2][3] = {{0.75, 0.35, 0.30}, {0.30, 0.45, 0.75}};
  for (int c = 0; c < 3; ++c)
    b.color[c] = base[b.class_id - 1][c] + rng.uniform(-0.08, 0.08);
  return b;
}

// 4x4 supersampled coverage of one pixel by one blob.
inline double blob_coverage(const Blob& b, int64_t row, int64_t col) {
  int hits = 0;
  for (int sy = 0; sy < 4; ++sy)
    for (int sx = 0; sx < 4; ++sx) {
      double y = static_cast<double>(row) + (static_cast<double>(sy) + 0.5) / 4.0;
      double x = static_cast<double>(col) + (static_cast<double>(sx) + 0.5) / 4.0;
      hits += b.contains(y, x);
    }
  return static_cast<double>(hits) / 16.0;
}

inline uint8_t quantize(double v) {
  v = std::min(1.0, std::max(0.0, v));
  return static_cast<uint8_t>(std::lround(v * 255.0));
}

struct RenderedSample {
  std::vector<uint8_t> rgb;
  std::vector<uint8_t> mask;
  double fg_fraction = 0;
};

inline RenderedSample render_sample(SplitMix64& rng, const SyntheticSpec& spec) {
  int64_t s = spec.image_size;
  RenderedSample out;
  out.rgb.resize(static_cast<size_t>(s * s * 3));
  out.mask.assign(static_cast<size_t>(s * s), 0);

  int64_t num_blobs = 1 + static_cast<int64_t>(rng.below(3));
  std::vector<Blob> blobs;
  for (int64_t i = 0; i < num_blobs; ++i) blobs.push_back(random_blob(rng, s, spec.num_classes));
  double bg = 0.35 + rng.uniform(-0.05, 0.05);

  int64_t fg = 0;
  std::vector<double> pixel(3);
  for (int64_t r = 0; r < s; ++r)
    for (int64_t c = 0; c < s; ++c) {
      pixel[0] = pixel[1] = pixel[2] = bg;
      for (const Blob& b : blobs) {
        double cov = blob_coverage(b, r, c);
        if (cov == 0.0) continue;
        for (int ch = 0; ch < 3; ++ch)
          pixel[ch] = (1.0 - cov) * pixel[ch] + cov * b.color[ch];
        if (cov >= 0.5) out.mask[static_cast<size_t>(r * s + c)] =
            static_cast<uint8_t>(b.class_id);
      }
      fg += out.mask[static_cast<size_t>(r * s + c)] != 0;
      for (int ch = 0; ch < 3; ++ch) {
        double noisy = pixel[ch] + rng.uniform(-spec.noise_amplitude, spec.noise_amplitude);
        out.rgb[static_cast<size_t>((r * s + c) * 3 + ch)] = quantize(noisy);
      }
    }
  out.fg_fraction = static_cast<double>(fg) / static_cast<double>(s * s);
  return out;
}

inline const char* split_of_index(int64_t index) {
  int64_t slot = index % 10;
  return slot < 8 ? "train" : (slot == 8 ? "val" : "test");
}

}  // namespace detail

inline void validate_spec(const SyntheticSpec& spec) {
  if (spec.image_size < 32 || spec.image_size % 32 != 0)
    throw ContractError("image_size must be a positive multiple of 32, got " +
                        std::to_string(spec.image_size));
  if (spec.num_images < 1)
    throw ContractError("num_images must be positive, got " + std::to_string(spec.num_images));
  if (spec.num_classes != 2 && spec.num_classes != 3)
    throw ContractError("num_classes must be 2 or 3, got " + std::to_string(spec.num_classes));
  if (spec.noise_amplitude < 0 || spec.noise_amplitude > 0.5)
    throw ContractError("noise_amplitude must lie in [0, 0.5], got " +
                        std::to_string(spec.noise_amplitude));
}

// Renders the full dataset under out_dir (images/, masks/, manifest.tsv) and
// returns the manifest path. Byte-identical for identical specs.
inline std::string generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir) {
  validate_spec(spec);
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  fs::create_directories(fs::path(out_dir) / "masks", ec);
  if (ec) throw IoError("cannot create output directories under '" + out_dir + "'");

  std::string manifest_path = (fs::path(out_dir) / "manifest.tsv").string();
  std::ofstream manifest(manifest_path, std::ios::trunc);
  if (!manifest) throw IoError("cannot open '" + manifest_path + "' for writing");

  for (int64_t i = 0; i < spec.num_images; ++i) {
    SplitMix64 rng(mix_seed(spec.seed, static_cast<uint64_t>(i)));
    detail::RenderedSample sample;
    int attempt = 0;
    do {
      sample = detail::render_sample(rng, spec);
      if (++attempt > 1000)
        throw DataError("foreground fraction never reached [0.05, 0.6] for image " +
                        std::to_string(i));
    } while (sample.fg_fraction < 0.05 || sample.fg_fraction > 0.6);

    char img_rel[32], msk_rel[32];
    std::snprintf(img_rel, sizeof img_rel, "images/%05d.ppm", static_cast<int>(i));
    std::snprintf(msk_rel, sizeof msk_rel, "masks/%05d.pgm", static_cast<int>(i));
    write_ppm((fs::path(out_dir) / img_rel).string(), sample.rgb, spec.image_size,
              spec.image_size);
    write_pgm((fs::path(out_dir) / msk_rel).string(), sample.mask, spec.image_size,
              spec.image_size);
    manifest << i << "\t" << img_rel << "\t" << msk_rel << "\t" << detail::split_of_index(i)
             << "\n";
  }
  manifest.close();
  if (!manifest) throw IoError("write failed for '" + manifest_path + "'");
  return manifest_path;
}

// Image as [H,W,3] in [0,1]; mask as [H,W] int32 class ids, checked against
// num_classes with the offending pixel named on failure.
template <typename T>
std::pair<Tensor<T>, Tensor<int32_t>> load_pair(const std::string& image_path,
                                                const std::string& mask_path,
                                                int64_t num_classes) {
  PnmImage img = read_ppm(image_path);
  PnmImage msk = read_pgm(mask_path);
  if (img.height != msk.height || img.width != msk.width)
    throw DataError("image '" + image_path + "' is " + std::to_string(img.height) + "x" +
                    std::to_string(img.width) + " but mask '" + mask_path + "' is " +
                    std::to_string(msk.height) + "x" + std::to_string(msk.width));
  Tensor<T> image = Tensor<T>::zeros({img.height, img.width, 3});
  for (int64_t p = 0; p < img.height * img.width * 3; ++p)
    image.mutable_data()[p] = static_cast<T>(img.bytes[static_cast<size_t>(p)]) / T(255);
  Tensor<int32_t> mask = Tensor<int32_t>::zeros({msk.height, msk.width});
  for (int64_t p = 0; p < msk.height * msk.width; ++p) {
    int32_t v = msk.bytes[static_cast<size_t>(p)];
    if (v >= num_classes)
      throw DataError("mask '" + mask_path + "' has class " + std::to_string(v) +
                      " >= num_classes " + std::to_string(num_classes) + " at pixel (" +
                      std::to_string(p / msk.width) + ", " + std::to_string(p % msk.width) +
                      ")");
    mask.mutable_data()[p] = v;
  }
  return {std::move(image), std::move(mask)};
}

struct ManifestEntry {
  int64_t index = 0;
  std::string image_path;  // resolved against the manifest directory
  std::string mask_path;
  std::string split;
};

inline std::vector<ManifestEntry> read_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest '" + manifest_path + "'");
  std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
  std::vector<ManifestEntry> entries;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 4)
      throw FormatError("manifest '" + manifest_path + "' line " + std::to_string(lineno) +
                        ": expected 4 tab-separated fields, got " +
                        std::to_string(fields.size()));
    ManifestEntry entry;
    try {
      entry.index = std::stoll(fields[0]);
    } catch (const std::exception&) {
      throw FormatError("manifest '" + manifest_path + "' line " + std::to_string(lineno) +
                        ": bad index '" + fields[0] + "'");
    }
    entry.image_path = (base / fields[1]).string();
    entry.mask_path = (base / fields[2]).string();
    entry.split = fields[3];
    if (entry.split != "train" && entry.split != "val" && entry.split != "test")
      throw FormatError("manifest '" + manifest_path + "' line " + std::to_string(lineno) +
                        ": unknown split '" + entry.split + "'");
    entries.push_back(std::move(entry));
  }
  return entries;
}

// Eagerly loaded segmentation dataset, optionally filtered to one split.
template <typename T>
class Dataset {
 public:
  static Dataset load(const std::string& manifest_path, int64_t num_classes,
                      const std::string& split = "") {
    Dataset ds;
    ds.num_classes_ = num_classes;
    for (const ManifestEntry& entry : read_manifest(manifest_path)) {
      if (!split.empty() && entry.split != split) continue;
      auto [image, mask] = load_pair<T>(entry.image_path, entry.mask_path, num_classes);
      if (!ds.images_.empty() && image.shape() != ds.images_.front().shape())
        throw DataError("image '" + entry.image_path + "' shape " +
                        shape_str(image.shape()) + " differs from first image " +
                        shape_str(ds.images_.front().shape()));
      ds.images_.push_back(std::move(image));
      ds.masks_.push_back(std::move(mask));
      ds.indices_.push_back(entry.index);
    }
    return ds;
  }

  size_t size() const { return images_.size(); }
  const Tensor<T>& image(size_t i) const { return images_.at(i); }
  const Tensor<int32_t>& mask(size_t i) const { return masks_.at(i); }
  int64_t index_of(size_t i) const { return indices_.at(i); }
  int64_t num_classes() const { return num_classes_; }
  int64_t height() const { return images_.empty() ? 0 : images_.front().shape()[0]; }
  int64_t width() const { return images_.empty() ? 0 : images_.front().shape()[1]; }

 private:
  std::vector<Tensor<T>> images_;
  std::vector<Tensor<int32_t>> masks_;
  std::vector<int64_t> indices_;
  int64_t num_classes_ = 0;
};

// Seeded epoch permutation chunked into batches; the last short batch is kept.
inline std::vector<std::vector<size_t>> make_batches(size_t n, int64_t batch_size,
                                                     uint64_t seed, int64_t epoch) {
  if (n == 0) throw ContractError("make_batches: dataset is empty");
  if (batch_size < 1)
    throw ContractError("make_batches: batch_size must be positive, got " +
                        std::to_string(batch_size));
  std::vector<size_t> perm(n);
  for (size_t i = 0; i < n; ++i) perm[i] = i;
  SplitMix64 rng(mix_seed(seed, static_cast<uint64_t>(epoch)));
  for (size_t i = n - 1; i > 0; --i) {
    size_t j = static_cast<size_t>(rng.below(static_cast<uint64_t>(i + 1)));
    std::swap(perm[i], perm[j]);
  }
  std::vector<std::vector<size_t>> batches;
  for (size_t at = 0; at < n; at += static_cast<size_t>(batch_size)) {
    size_t end = std::min(n, at + static_cast<size_t>(batch_size));
    batches.emplace_back(perm.begin() + static_cast<int64_t>(at),
                         perm.begin() + static_cast<int64_t>(end));
  }
  return batches;
}

// Horizontal-flip augmentation decision, keyed by (seed, epoch, dataset index)
// so a resumed run re-derives identical augmentations.
inline bool should_flip(uint64_t seed, int64_t epoch, int64_t dataset_index) {
  SplitMix64 rng(mix_seed(mix_seed(seed, static_cast<uint64_t>(epoch)),
                          static_cast<uint64_t>(dataset_index)));
  return rng.uniform() < 0.5;
}

template <typename T>
struct SegmentationBatch {
  Tensor<T> images;        // [B,H,W,3]
  Tensor<int32_t> masks;   // [B,H,W]
  std::vector<size_t> ids; // dataset positions in batch order
};

template <typename T>
SegmentationBatch<T> assemble_batch(const Dataset<T>& dataset,
                                    const std::vector<size_t>& ids, bool augment,
                                    uint64_t seed, int64_t epoch) {
  if (ids.empty()) throw ContractError("assemble_batch: empty id list");
  int64_t h = dataset.height(), w = dataset.width();
  int64_t b = static_cast<int64_t>(ids.size());
  SegmentationBatch<T> batch;
  batch.images = Tensor<T>::zeros({b, h, w, 3});
  batch.masks = Tensor<int32_t>::zeros({b, h, w});
  batch.ids = ids;
  for (int64_t slot = 0; slot < b; ++slot) {
    const Tensor<T>& img = dataset.image(ids[static_cast<size_t>(slot)]);
    const Tensor<int32_t>& msk = dataset.mask(ids[static_cast<size_t>(slot)]);
    bool flip =
        augment && should_flip(seed, epoch, dataset.index_of(ids[static_cast<size_t>(slot)]));
    T* ip = batch.images.mutable_data() + slot * h * w * 3;
    int32_t* mp = batch.masks.mutable_data() + slot * h * w;
    for (int64_t r = 0; r < h; ++r)
      for (int64_t c = 0; c < w; ++c) {
        int64_t src_c = flip ? w - 1 - c : c;
        for (int64_t ch = 0; ch < 3; ++ch)
          ip[(r * w + c) * 3 + ch] = img.data()[(r * w + src_c) * 3 + ch];
        mp[r * w + c] = msk.data()[r * w + src_c];
      }
  }
  return batch;
}

}  // namespace hcm
