#pragma once

#include <memory>
#include <string>
#include <vector>

#include "fewlabel/checkpoint.hpp"
#include "fewlabel/features.hpp"
#include "fewlabel/kmeans.hpp"
#include "fewlabel/models.hpp"

namespace fewlabel {

enum class ProviderKind { GroundTruth, Single, Random, Cluster, S2L, Cotrain };
enum class LabelMode { Hard, Soft };

inline std::string provider_kind_name(ProviderKind k) {
  switch (k) {
    case ProviderKind::GroundTruth: return "GROUND_TRUTH";
    case ProviderKind::Single: return "SINGLE";
    case ProviderKind::Random: return "RANDOM";
    case ProviderKind::Cluster: return "CLUSTER";
    case ProviderKind::S2L: return "S2L";
    case ProviderKind::Cotrain: return "COTRAIN";
  }
  return "?";
}

inline ProviderKind provider_kind_from_name(const std::string& s) {
  for (ProviderKind k : {ProviderKind::GroundTruth, ProviderKind::Single, ProviderKind::Random,
                         ProviderKind::Cluster, ProviderKind::S2L, ProviderKind::Cotrain}) {
    if (provider_kind_name(k) == s) return k;
  }
  throw ConfigError("unknown provider kind: " + s);
}

// A closed-over map from real images to labels (hard indices or soft
// distributions) plus the prior used to sample labels for fakes. The
// co-training variant carries only metadata: its labels come from the
// discriminator's own classifier head during GAN training.
struct LabelProvider {
  ProviderKind kind = ProviderKind::Single;
  LabelMode mode = LabelMode::Hard;
  int num_classes_effective = 1;
  std::vector<double> prior;  // sums to 1 within 1e-6
  std::shared_ptr<FeatureExtractor<float>> extractor;  // Cluster / S2L
  ClusterModel clusters;                               // Cluster
  double heldout_accuracy = -1.0;                      // S2L bookkeeping

  void validate() const {
    if (static_cast<int>(prior.size()) != num_classes_effective) {
      throw StateError("label provider: prior size mismatch");
    }
    double sum = 0.0;
    for (double p : prior) {
      if (p < 0.0) throw StateError("label provider: negative prior mass");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw StateError("label provider: prior must sum to 1");
    if ((kind == ProviderKind::Cluster || kind == ProviderKind::S2L) && !extractor) {
      throw StateError("label provider: extractor missing");
    }
    if (kind == ProviderKind::Cluster && clusters.n_clusters() != num_classes_effective) {
      throw StateError("label provider: cluster model missing");
    }
  }
};

inline std::vector<double> uniform_prior(int k) {
  return std::vector<double>(static_cast<std::size_t>(k), 1.0 / static_cast<double>(k));
}

inline LabelProvider make_single_label_provider() {
  LabelProvider p;
  p.kind = ProviderKind::Single;
  p.num_classes_effective = 1;
  p.prior = {1.0};
  return p;
}

inline LabelProvider make_random_label_provider(int num_classes) {
  LabelProvider p;
  p.kind = ProviderKind::Random;
  p.num_classes_effective = num_classes;
  p.prior = uniform_prior(num_classes);
  return p;
}

inline LabelProvider make_ground_truth_provider(int num_classes) {
  LabelProvider p;
  p.kind = ProviderKind::GroundTruth;
  p.num_classes_effective = num_classes;
  p.prior = uniform_prior(num_classes);
  return p;
}

// Cluster provider: labels are nearest-centroid assignments of F(x); fake
// labels are sampled from the empirical distribution of cluster labels over
// the training set.
inline LabelProvider make_cluster_provider(std::shared_ptr<FeatureExtractor<float>> extractor,
                                           ClusterModel clusters,
                                           const LabeledDataset& training_set) {
  LabelProvider p;
  p.kind = ProviderKind::Cluster;
  p.extractor = std::move(extractor);
  p.clusters = std::move(clusters);
  p.num_classes_effective = p.clusters.n_clusters();
  std::vector<int> assignments;
  const int batch = 256;
  for (int start = 0; start < training_set.size(); start += batch) {
    const int n = std::min(batch, training_set.size() - start);
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[i] = start + i;
    const auto feats = p.extractor->features(training_set.gather_images(idx)).cast<double>();
    const auto assigned = assign_clusters(p.clusters, feats);
    assignments.insert(assignments.end(), assigned.begin(), assigned.end());
  }
  p.prior = empirical_prior(assignments, p.num_classes_effective);
  return p;
}

inline LabelProvider make_s2l_provider(std::shared_ptr<FeatureExtractor<float>> extractor,
                                       LabelMode mode, double heldout_accuracy = -1.0) {
  LabelProvider p;
  p.kind = ProviderKind::S2L;
  p.mode = mode;
  p.extractor = std::move(extractor);
  p.num_classes_effective = p.extractor->spec().num_classes;
  p.prior = uniform_prior(p.num_classes_effective);
  p.heldout_accuracy = heldout_accuracy;
  return p;
}

inline LabelProvider make_cotrain_provider(int num_classes, LabelMode mode = LabelMode::Soft) {
  LabelProvider p;
  p.kind = ProviderKind::Cotrain;
  p.mode = mode;
  p.num_classes_effective = num_classes;
  p.prior = uniform_prior(num_classes);
  return p;
}

namespace detail {
inline LabelBatch<float> logits_to_labels(const Tensor<float>& logits, LabelMode mode) {
  const int n = logits.dim(0), k = logits.dim(1);
  if (mode == LabelMode::Soft) {
    Graph<float> g;
    return LabelBatch<float>::soft_labels(g.value(g.softmax_rows(g.constant(logits))));
  }
  std::vector<int> hard(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    int arg = 0;  // ties break to the lowest index
    for (int c = 1; c < k; ++c) {
      if (logits.data[static_cast<std::size_t>(i) * k + c] >
          logits.data[static_cast<std::size_t>(i) * k + arg]) {
        arg = c;
      }
    }
    hard[i] = arg;
  }
  return LabelBatch<float>::hard_labels(std::move(hard));
}
}  // namespace detail

// Labels a batch of real images. `true_labels` supplies the dataset labels
// for the ground-truth provider (absent entries are an error there); `rng`
// drives the random provider.
inline LabelBatch<float> provide_labels(const LabelProvider& provider, const Tensor<float>& images,
                                        const std::vector<int>* true_labels, Rng& rng) {
  const int n = images.dim(0);
  switch (provider.kind) {
    case ProviderKind::Single: {
      if (provider.mode == LabelMode::Soft) {
        return LabelBatch<float>::soft_labels(Tensor<float>::full({n, 1}, 1.0f));
      }
      return LabelBatch<float>::hard_labels(std::vector<int>(static_cast<std::size_t>(n), 0));
    }
    case ProviderKind::Random: {
      std::vector<int> hard(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        hard[i] = static_cast<int>(rng.uniform_int(provider.num_classes_effective));
      }
      if (provider.mode == LabelMode::Soft) {
        Tensor<float> soft({n, provider.num_classes_effective});
        for (int i = 0; i < n; ++i) {
          soft.data[static_cast<std::size_t>(i) * provider.num_classes_effective + hard[i]] = 1.0f;
        }
        return LabelBatch<float>::soft_labels(std::move(soft));
      }
      return LabelBatch<float>::hard_labels(std::move(hard));
    }
    case ProviderKind::GroundTruth: {
      if (!true_labels || static_cast<int>(true_labels->size()) != n) {
        throw StateError("ground-truth provider: labels not supplied");
      }
      for (int l : *true_labels) {
        if (l == kAbsentLabel) {
          throw StateError("ground-truth provider: applied to an unlabeled example");
        }
      }
      if (provider.mode == LabelMode::Soft) {
        Tensor<float> soft({n, provider.num_classes_effective});
        for (int i = 0; i < n; ++i) {
          soft.data[static_cast<std::size_t>(i) * provider.num_classes_effective +
                    (*true_labels)[i]] = 1.0f;
        }
        return LabelBatch<float>::soft_labels(std::move(soft));
      }
      return LabelBatch<float>::hard_labels(*true_labels);
    }
    case ProviderKind::Cluster: {
      provider.validate();
      const auto feats = provider.extractor->features(images).cast<double>();
      std::vector<int> hard = assign_clusters(provider.clusters, feats);
      if (provider.mode == LabelMode::Soft) {
        Tensor<float> soft({n, provider.num_classes_effective});
        for (int i = 0; i < n; ++i) {
          soft.data[static_cast<std::size_t>(i) * provider.num_classes_effective + hard[i]] = 1.0f;
        }
        return LabelBatch<float>::soft_labels(std::move(soft));
      }
      return LabelBatch<float>::hard_labels(std::move(hard));
    }
    case ProviderKind::S2L: {
      provider.validate();
      return detail::logits_to_labels(provider.extractor->class_logits(images), provider.mode);
    }
    case ProviderKind::Cotrain:
      throw StateError(
          "co-train provider: labels are produced by the discriminator head during training");
  }
  throw StateError("provide_labels: unreachable");
}

// Hard labels for fake images, sampled from the provider's prior.
inline LabelBatch<float> sample_fake_labels(const LabelProvider& provider, int n, Rng& rng) {
  std::vector<int> hard(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    hard[i] = static_cast<int>(rng.categorical(provider.prior));
  }
  return LabelBatch<float>::hard_labels(std::move(hard));
}

// ---------------------------------------------------------------------------
// Serialization: a single tensor container holding metadata, prior,
// extractor weights and centroids, so GAN training can load providers
// without re-running pretraining.
// ---------------------------------------------------------------------------

inline void save_provider(const std::string& path, const LabelProvider& p) {
  TensorMap map;
  put_scalar(map, "meta/kind", static_cast<double>(static_cast<int>(p.kind)));
  put_scalar(map, "meta/mode", p.mode == LabelMode::Soft ? 1.0 : 0.0);
  put_scalar(map, "meta/num_classes_effective", p.num_classes_effective);
  put_scalar(map, "meta/heldout_accuracy", p.heldout_accuracy);
  map["prior"] =
      Tensor<double>({static_cast<int>(p.prior.size())}, std::vector<double>(p.prior));
  if (p.extractor) {
    const auto& spec = p.extractor->spec();
    put_scalar(map, "meta/extractor/image_size", spec.image_size);
    put_scalar(map, "meta/extractor/image_channels", spec.image_channels);
    put_scalar(map, "meta/extractor/num_classes", spec.num_classes);
    std::vector<double> ch(spec.channels.begin(), spec.channels.end());
    map["meta/extractor/channels"] = Tensor<double>({static_cast<int>(ch.size())}, ch);
    std::vector<std::pair<std::string, Tensor<float>*>> entries;
    p.extractor->append_state(entries);
    for (auto& [name, tensor] : entries) put_tensor(map, name, *tensor);
  }
  if (p.clusters.n_clusters() > 0) {
    map["clusters/centroids"] = p.clusters.centroids;
    std::vector<double> counts(p.clusters.counts.begin(), p.clusters.counts.end());
    map["clusters/counts"] = Tensor<double>({static_cast<int>(counts.size())}, counts);
  }
  save_tensor_map(path, map);
}

inline LabelProvider load_provider(const std::string& path) {
  const TensorMap map = load_tensor_map(path);
  LabelProvider p;
  p.kind = static_cast<ProviderKind>(static_cast<int>(get_scalar(map, "meta/kind")));
  p.mode = get_scalar(map, "meta/mode") > 0.5 ? LabelMode::Soft : LabelMode::Hard;
  p.num_classes_effective = static_cast<int>(get_scalar(map, "meta/num_classes_effective"));
  p.heldout_accuracy = get_scalar(map, "meta/heldout_accuracy");
  const auto& prior = map.at("prior");
  p.prior.assign(prior.data.begin(), prior.data.end());
  if (map.count("meta/extractor/image_size")) {
    FeatureExtractorSpec spec;
    spec.image_size = static_cast<int>(get_scalar(map, "meta/extractor/image_size"));
    spec.image_channels = static_cast<int>(get_scalar(map, "meta/extractor/image_channels"));
    spec.num_classes = static_cast<int>(get_scalar(map, "meta/extractor/num_classes"));
    const auto& ch = map.at("meta/extractor/channels");
    spec.channels.assign(ch.data.begin(), ch.data.end());
    p.extractor = std::make_shared<FeatureExtractor<float>>(spec);
    std::vector<std::pair<std::string, Tensor<float>*>> entries;
    p.extractor->append_state(entries);
    for (auto& [name, tensor] : entries) *tensor = get_tensor<float>(map, name);
  }
  if (map.count("clusters/centroids")) {
    p.clusters.centroids = map.at("clusters/centroids");
    const auto& counts = map.at("clusters/counts");
    p.clusters.counts.assign(counts.data.begin(), counts.data.end());
  }
  return p;
}

}  // namespace fewlabel
