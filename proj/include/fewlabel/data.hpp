#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fewlabel/graph.hpp"
#include "fewlabel/image_io.hpp"
#include "fewlabel/rng.hpp"
#include "fewlabel/tensor.hpp"

namespace fewlabel {

constexpr int kAbsentLabel = -1;

// Image collection with optional per-example labels. Pixels live in [-1,1],
// matching the generator's tanh output range.
struct LabeledDataset {
  std::string id;  // subsampling streams are derived from (id, k, seed)
  int num_classes = 0;
  Tensor<float> images;    // [N, H, W, C]
  std::vector<int> labels;  // kAbsentLabel where unknown

  int size() const { return images.rank() == 4 ? images.dim(0) : 0; }
  int height() const { return images.dim(1); }
  int width() const { return images.dim(2); }
  int channels() const { return images.dim(3); }

  bool fully_labeled() const {
    return std::none_of(labels.begin(), labels.end(), [](int l) { return l == kAbsentLabel; });
  }

  std::vector<int> labeled_indices() const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i) {
      if (labels[i] != kAbsentLabel) out.push_back(i);
    }
    return out;
  }

  double labeled_fraction() const {
    return size() == 0 ? 0.0
                       : static_cast<double>(labeled_indices().size()) / static_cast<double>(size());
  }

  Tensor<float> image(int i) const {
    const std::int64_t stride = images.numel() / size();
    Tensor<float> out(Shape{height(), width(), channels()});
    std::copy(images.data.begin() + i * stride, images.data.begin() + (i + 1) * stride,
              out.data.begin());
    return out;
  }

  Tensor<float> gather_images(const std::vector<int>& idx) const {
    const std::int64_t stride = images.numel() / size();
    Tensor<float> out(Shape{static_cast<int>(idx.size()), height(), width(), channels()});
    for (std::size_t n = 0; n < idx.size(); ++n) {
      std::copy(images.data.begin() + idx[n] * stride, images.data.begin() + (idx[n] + 1) * stride,
                out.data.begin() + static_cast<std::int64_t>(n) * stride);
    }
    return out;
  }

  void validate() const {
    if (static_cast<int>(labels.size()) != size()) {
      throw ArgumentError("dataset: label count does not match image count");
    }
    for (int l : labels) {
      if (l != kAbsentLabel && (l < 0 || l >= num_classes)) {
        throw ArgumentError("dataset: label out of range");
      }
    }
    if (size() > 0 && (images.min_value() < -1.0f - 1e-6f || images.max_value() > 1.0f + 1e-6f)) {
      throw ArgumentError("dataset: pixel values outside [-1, 1]");
    }
  }
};

// ---------------------------------------------------------------------------
// Rotation
// ---------------------------------------------------------------------------

// Exact 90*r degree counter-clockwise pixel permutation of a square [H,W,C]
// image. No interpolation.
template <typename T>
Tensor<T> rotate(const Tensor<T>& image, int r) {
  if (image.rank() != 3) throw ArgumentError("rotate: expected [H,W,C]");
  Shape batched{1, image.dim(0), image.dim(1), image.dim(2)};
  return Graph<T>::rotate_image_batch(image.reshaped(batched), r).reshaped(image.shape);
}

// A batch of 4B images: all inputs at 0 degrees, then 90, 180, 270, with
// rotation_targets[i] = i div B.
struct RotationBatch {
  Tensor<float> images;             // [4B, H, W, C]
  std::vector<int> rotation_targets;  // in {0,1,2,3}
};

inline RotationBatch make_rotation_batch(const Tensor<float>& images) {
  if (images.rank() != 4) throw ArgumentError("rotation batch: expected [N,H,W,C]");
  const int B = images.dim(0);
  RotationBatch out;
  Shape s = images.shape;
  s[0] = 4 * B;
  out.images = Tensor<float>(std::move(s));
  const std::int64_t stride = images.numel();
  for (int r = 0; r < 4; ++r) {
    const Tensor<float> rotated = Graph<float>::rotate_image_batch(images, r);
    std::copy(rotated.data.begin(), rotated.data.end(), out.images.data.begin() + r * stride);
  }
  out.rotation_targets.resize(static_cast<std::size_t>(4) * B);
  for (int i = 0; i < 4 * B; ++i) out.rotation_targets[i] = i / B;
  return out;
}

// ---------------------------------------------------------------------------
// Label subsampling
// ---------------------------------------------------------------------------

// Retains floor(k% * count) labels per class (at least 1; a clamp emits a
// warning record), chosen by a seeded shuffle of each class's index list
// followed by a prefix take. Image order is unchanged; all other labels
// become absent. Deterministic in (dataset id, k_percent, seed).
inline LabeledDataset subsample_labels(const LabeledDataset& dataset, double k_percent,
                                       std::uint64_t seed) {
  if (!(k_percent > 0.0) || k_percent > 100.0) {
    throw ArgumentError("subsample_labels: k_percent must be in (0, 100]");
  }
  if (!dataset.fully_labeled()) {
    throw ArgumentError("subsample_labels: dataset must be fully labeled");
  }
  LabeledDataset out = dataset;
  if (k_percent == 100.0) return out;

  std::uint64_t k_bits;
  static_assert(sizeof(k_bits) == sizeof(k_percent));
  std::memcpy(&k_bits, &k_percent, sizeof(k_bits));
  Rng rng = Rng::derive(fnv1a(dataset.id), k_bits, seed);

  std::vector<std::vector<int>> per_class(static_cast<std::size_t>(dataset.num_classes));
  for (int i = 0; i < dataset.size(); ++i) per_class[dataset.labels[i]].push_back(i);

  std::fill(out.labels.begin(), out.labels.end(), kAbsentLabel);
  for (int c = 0; c < dataset.num_classes; ++c) {
    auto& idx = per_class[c];
    if (idx.empty()) {
      throw ArgumentError("subsample_labels: class " + std::to_string(c) + " has no examples");
    }
    int keep = static_cast<int>(std::floor(k_percent / 100.0 * static_cast<double>(idx.size())));
    if (keep == 0) {
      keep = 1;
      emit_warning("subsample_labels: class " + std::to_string(c) +
                   " clamped to 1 retained label (floor gave 0)");
    }
    rng.shuffle(idx);
    for (int j = 0; j < keep; ++j) out.labels[idx[j]] = c;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mixed batch assembly
// ---------------------------------------------------------------------------

struct MixedBatch {
  Tensor<float> unlabeled_images;  // [B, H, W, C] drawn from all examples
  std::vector<int> unlabeled_indices;
  Tensor<float> labeled_images;  // [batch-B, H, W, C] drawn from labeled pool
  std::vector<int> labeled_indices;
  std::vector<int> labels;  // labels of the labeled part
};

// Draws B examples uniformly from the whole dataset (labels masked) and
// batch_size - B uniformly from the labeled pool. Deterministic in
// (seed, step).
inline MixedBatch make_mixed_batch(const LabeledDataset& dataset, int batch_size,
                                   int num_unlabeled, std::uint64_t seed, std::uint64_t step) {
  if (num_unlabeled < 0 || num_unlabeled > batch_size) {
    throw ArgumentError("make_mixed_batch: need 0 <= B <= batch_size");
  }
  const std::vector<int> labeled = dataset.labeled_indices();
  if (num_unlabeled < batch_size && labeled.empty()) {
    throw StateError("make_mixed_batch: no labeled examples available");
  }
  Rng rng = Rng::derive(seed, step, 0xba7c4ull);
  MixedBatch out;
  out.unlabeled_indices.resize(static_cast<std::size_t>(num_unlabeled));
  for (int i = 0; i < num_unlabeled; ++i) {
    out.unlabeled_indices[i] = static_cast<int>(rng.uniform_int(dataset.size()));
  }
  const int num_labeled = batch_size - num_unlabeled;
  out.labeled_indices.resize(static_cast<std::size_t>(num_labeled));
  out.labels.resize(static_cast<std::size_t>(num_labeled));
  for (int i = 0; i < num_labeled; ++i) {
    const int idx = labeled[rng.uniform_int(labeled.size())];
    out.labeled_indices[i] = idx;
    out.labels[i] = dataset.labels[idx];
  }
  out.unlabeled_images = dataset.gather_images(out.unlabeled_indices);
  out.labeled_images = dataset.gather_images(out.labeled_indices);
  return out;
}

// Seeded shuffle split into (rest, holdout) with ceil(fraction * N)
// examples held out.
inline std::pair<LabeledDataset, LabeledDataset> split_holdout(const LabeledDataset& ds,
                                                               double fraction,
                                                               std::uint64_t seed) {
  if (!(fraction > 0.0) || fraction >= 1.0) {
    throw ArgumentError("split_holdout: fraction must be in (0, 1)");
  }
  std::vector<int> order(static_cast<std::size_t>(ds.size()));
  for (int i = 0; i < ds.size(); ++i) order[i] = i;
  Rng rng = Rng::derive(seed, 0x5b117ull);
  rng.shuffle(order);
  const int held = std::max(1, static_cast<int>(std::ceil(fraction * ds.size())));
  std::vector<int> hold_idx(order.begin(), order.begin() + held);
  std::vector<int> rest_idx(order.begin() + held, order.end());
  std::sort(hold_idx.begin(), hold_idx.end());
  std::sort(rest_idx.begin(), rest_idx.end());
  auto take = [&](const std::vector<int>& idx, const char* tag) {
    LabeledDataset out;
    out.id = ds.id + tag;
    out.num_classes = ds.num_classes;
    out.images = ds.gather_images(idx);
    for (int i : idx) out.labels.push_back(ds.labels[i]);
    return out;
  };
  return {take(rest_idx, ":train"), take(hold_idx, ":holdout")};
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  int count = 1024;
  int num_classes = 4;
  int image_size = 32;
  std::uint64_t seed = 1;
};

// Class-coded blobs/shapes at image_size x image_size: each class has a
// distinct base color and shape; every image carries an off-center
// orientation marker so the rotation task has signal; positions and sizes
// are jittered and pixel noise added.
inline LabeledDataset make_synthetic_dataset(const SyntheticSpec& spec) {
  static const float kPalette[8][3] = {
      {0.9f, -0.6f, -0.6f}, {-0.6f, 0.9f, -0.6f}, {-0.6f, -0.6f, 0.9f}, {0.9f, 0.9f, -0.6f},
      {0.9f, -0.6f, 0.9f},  {-0.6f, 0.9f, 0.9f},  {0.9f, 0.4f, -0.2f},  {-0.2f, 0.4f, 0.9f}};
  const int S = spec.image_size;
  LabeledDataset ds;
  ds.id = "synthetic:" + std::to_string(spec.count) + "x" + std::to_string(spec.num_classes) +
          "@" + std::to_string(S) + ":seed" + std::to_string(spec.seed);
  ds.num_classes = spec.num_classes;
  ds.images = Tensor<float>(Shape{spec.count, S, S, 3});
  ds.labels.resize(static_cast<std::size_t>(spec.count));
  Rng rng = Rng::derive(spec.seed, 0x5e70ull);
  for (int n = 0; n < spec.count; ++n) {
    const int cls = n % spec.num_classes;
    ds.labels[n] = cls;
    const float* base = kPalette[cls % 8];
    const int cx = S / 2 + static_cast<int>(rng.uniform_int(9)) - 4;
    const int cy = S / 2 + static_cast<int>(rng.uniform_int(9)) - 4;
    const int half = S / 5 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(S / 8)));
    auto px = [&](int y, int x) -> float* {
      return ds.images.data.data() + ((static_cast<std::int64_t>(n) * S + y) * S + x) * 3;
    };
    for (int y = 0; y < S; ++y) {
      for (int x = 0; x < S; ++x) {
        float* p = px(y, x);
        bool inside = false;
        const int dx = x - cx, dy = y - cy;
        switch (cls % 4) {
          case 0:  // disk
            inside = dx * dx + dy * dy <= half * half;
            break;
          case 1:  // square
            inside = std::abs(dx) <= half && std::abs(dy) <= half;
            break;
          case 2:  // vertical bars
            inside = std::abs(dx) <= half && std::abs(dy) <= half && ((x / 3) % 2 == 0);
            break;
          default:  // diagonal stripe
            inside = std::abs(dx - dy) <= half / 2 + 1;
            break;
        }
        for (int c = 0; c < 3; ++c) {
          const float bgv = -0.85f;
          float v = inside ? base[c] : bgv;
          v += static_cast<float>(rng.normal()) * 0.05f;
          p[c] = std::min(1.0f, std::max(-1.0f, v));
        }
      }
    }
    // Orientation marker: a bright horizontal bar in the top-left quadrant.
    const int my = 2 + static_cast<int>(rng.uniform_int(3));
    const int mx = 2 + static_cast<int>(rng.uniform_int(3));
    for (int y = my; y < my + 2; ++y) {
      for (int x = mx; x < mx + 7 && x < S; ++x) {
        float* p = px(y, x);
        p[0] = p[1] = p[2] = 1.0f;
      }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Directory + manifest loading
// ---------------------------------------------------------------------------

// Manifest: one line per file, "<relative_path> <class_index>", class index
// -1 for unlabeled. num_classes is 1 + max label unless given explicitly.
inline LabeledDataset load_dataset(const std::string& manifest_path, int num_classes = 0) {
  std::ifstream in(manifest_path);
  if (!in) throw ConfigError("cannot open dataset manifest: " + manifest_path);
  const std::filesystem::path root = std::filesystem::path(manifest_path).parent_path();
  std::vector<std::string> paths;
  std::vector<int> labels;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string rel;
    int label;
    if (!(ss >> rel >> label)) throw ConfigError("bad manifest line: " + line);
    paths.push_back((root / rel).string());
    labels.push_back(label);
  }
  if (paths.empty()) throw ConfigError("empty dataset manifest: " + manifest_path);
  LabeledDataset ds;
  ds.id = "manifest:" + manifest_path;
  ds.labels = labels;
  for (int l : labels) num_classes = std::max(num_classes, l + 1);
  ds.num_classes = num_classes;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const Tensor<float> t = image_to_tensor(read_image(paths[i]));
    if (i == 0) {
      ds.images = Tensor<float>(Shape{static_cast<int>(paths.size()), t.dim(0), t.dim(1), t.dim(2)});
    }
    if (t.shape != Shape{ds.height(), ds.width(), ds.channels()}) {
      throw ConfigError("image size mismatch: " + paths[i]);
    }
    std::copy(t.data.begin(), t.data.end(), ds.images.data.begin() + static_cast<std::int64_t>(i) * t.numel());
  }
  ds.validate();
  return ds;
}

// Writes labels in the manifest format the loader reads.
inline void write_label_manifest(const std::string& path, const std::vector<std::string>& names,
                                 const std::vector<int>& labels) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (std::size_t i = 0; i < names.size(); ++i) {
    out << names[i] << " " << labels[i] << "\n";
  }
}

}  // namespace fewlabel
