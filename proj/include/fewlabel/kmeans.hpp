#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "fewlabel/rng.hpp"
#include "fewlabel/tensor.hpp"

namespace fewlabel {

struct ClusterModel {
  Tensor<double> centroids;          // [n_clusters, d]
  std::vector<std::int64_t> counts;  // per-centroid update counts

  int n_clusters() const { return centroids.rank() == 2 ? centroids.dim(0) : 0; }
  int dim() const { return centroids.rank() == 2 ? centroids.dim(1) : 0; }
};

inline double squared_distance(const double* a, const double* b, int d) {
  double acc = 0.0;
  for (int i = 0; i < d; ++i) {
    const double diff = a[i] - b[i];
    acc += diff * diff;
  }
  return acc;
}

// Nearest centroid by squared Euclidean distance; ties break to the lowest
// index.
inline int assign_cluster(const ClusterModel& model, const Tensor<double>& feature) {
  if (model.n_clusters() == 0) throw StateError("assign_cluster: model not fitted");
  if (feature.numel() != model.dim()) throw ArgumentError("assign_cluster: dimension mismatch");
  int best = 0;
  double best_d = squared_distance(model.centroids.data.data(), feature.data.data(), model.dim());
  for (int c = 1; c < model.n_clusters(); ++c) {
    const double d = squared_distance(
        model.centroids.data.data() + static_cast<std::size_t>(c) * model.dim(),
        feature.data.data(), model.dim());
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

// Mini-batch k-means with per-centroid learning rates 1/count: centroids are
// initialized by seeded sampling of distinct points, then `iterations`
// mini-batches are drawn; each batch caches its nearest-centroid assignments
// and applies the sequential per-example update c += (x - c) / count.
// Centroids that never win a point keep their initial position.
inline ClusterModel fit_clusters(const Tensor<double>& features, int n_clusters, int batch_size,
                                 int iterations, std::uint64_t seed) {
  if (features.rank() != 2) throw ArgumentError("fit_clusters: features must be [N, d]");
  const int n = features.dim(0), d = features.dim(1);
  if (n < n_clusters) throw ArgumentError("fit_clusters: need at least n_clusters points");
  if (n_clusters < 1 || batch_size < 1 || iterations < 0) {
    throw ArgumentError("fit_clusters: bad arguments");
  }

  ClusterModel model;
  model.centroids = Tensor<double>(Shape{n_clusters, d});
  model.counts.assign(static_cast<std::size_t>(n_clusters), 0);

  Rng init_rng = Rng::derive(seed, 0xc1057ull);
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[i] = i;
  init_rng.shuffle(order);
  for (int c = 0; c < n_clusters; ++c) {
    std::copy(features.data.begin() + static_cast<std::size_t>(order[c]) * d,
              features.data.begin() + (static_cast<std::size_t>(order[c]) + 1) * d,
              model.centroids.data.begin() + static_cast<std::size_t>(c) * d);
  }

  std::vector<int> batch(static_cast<std::size_t>(batch_size));
  std::vector<int> nearest(static_cast<std::size_t>(batch_size));
  Tensor<double> feat(Shape{d});
  for (int it = 0; it < iterations; ++it) {
    Rng rng = Rng::derive(seed, 0x6ba7ull, static_cast<std::uint64_t>(it));
    for (int b = 0; b < batch_size; ++b) batch[b] = static_cast<int>(rng.uniform_int(n));
    for (int b = 0; b < batch_size; ++b) {  // cache assignments first
      std::copy(features.data.begin() + static_cast<std::size_t>(batch[b]) * d,
                features.data.begin() + (static_cast<std::size_t>(batch[b]) + 1) * d,
                feat.data.begin());
      nearest[b] = assign_cluster(model, feat);
    }
    for (int b = 0; b < batch_size; ++b) {  // sequential gradient steps
      const int c = nearest[b];
      model.counts[c] += 1;
      const double eta = 1.0 / static_cast<double>(model.counts[c]);
      double* centroid = model.centroids.data.data() + static_cast<std::size_t>(c) * d;
      const double* x = features.data.data() + static_cast<std::size_t>(batch[b]) * d;
      for (int i = 0; i < d; ++i) centroid[i] += eta * (x[i] - centroid[i]);
    }
  }
  return model;
}

// Assignments for a feature matrix [N, d].
inline std::vector<int> assign_clusters(const ClusterModel& model, const Tensor<double>& features) {
  const int n = features.dim(0), d = features.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  Tensor<double> feat(Shape{d});
  for (int i = 0; i < n; ++i) {
    std::copy(features.data.begin() + static_cast<std::size_t>(i) * d,
              features.data.begin() + (static_cast<std::size_t>(i) + 1) * d, feat.data.begin());
    out[i] = assign_cluster(model, feat);
  }
  return out;
}

// Normalized histogram of labels; sums to 1.
inline std::vector<double> empirical_prior(const std::vector<int>& labels, int num_classes) {
  if (labels.empty()) throw ArgumentError("empirical_prior: empty label list");
  std::vector<double> prior(static_cast<std::size_t>(num_classes), 0.0);
  for (int l : labels) {
    if (l < 0 || l >= num_classes) throw ArgumentError("empirical_prior: label out of range");
    prior[static_cast<std::size_t>(l)] += 1.0;
  }
  for (auto& p : prior) p /= static_cast<double>(labels.size());
  return prior;
}

}  // namespace fewlabel
