#pragma once

#include <memory>
#include <string>
#include <vector>

#include "fewlabel/checkpoint.hpp"
#include "fewlabel/data.hpp"
#include "fewlabel/layers.hpp"
#include "fewlabel/losses.hpp"
#include "fewlabel/optimizer.hpp"

namespace fewlabel {

// Desk-scale feature extractor F: a 4-block CNN with a linear rotation head
// and a linear class head on the pooled features.
struct FeatureExtractorSpec {
  int image_size = 32;
  int image_channels = 3;
  std::vector<int> channels = {16, 32, 64, 64};  // per conv block
  int num_classes = 4;

  int feature_dim() const { return channels.back(); }

  void validate() const {
    if (channels.size() < 1) throw ArgumentError("feature extractor: need conv blocks");
    if (num_classes < 1) throw ArgumentError("feature extractor: num_classes >= 1");
  }
};

template <typename T>
class FeatureExtractor {
 public:
  explicit FeatureExtractor(FeatureExtractorSpec spec, std::uint64_t init_seed = 11)
      : spec_(spec) {
    spec_.validate();
    int cin = spec_.image_channels;
    for (std::size_t i = 0; i < spec_.channels.size(); ++i) {
      const std::string p = "feature_extractor/conv" + std::to_string(i + 1) + "/";
      conv_.push_back({&store_.create(p + "kernel", {3, 3, cin, spec_.channels[i]}),
                       &store_.create(p + "bias", {spec_.channels[i]}), nullptr});
      cin = spec_.channels[i];
    }
    rotation_head_.kernel = &store_.create("feature_extractor/rotation_head/kernel", {cin, 4});
    rotation_head_.bias = &store_.create("feature_extractor/rotation_head/bias", {4});
    class_head_.kernel =
        &store_.create("feature_extractor/class_head/kernel", {cin, spec_.num_classes});
    class_head_.bias = &store_.create("feature_extractor/class_head/bias", {spec_.num_classes});

    Rng rng = Rng::derive(init_seed, fnv1a("feature-extractor-init"));
    for (const auto& p : store_.all()) {
      if (p->name.find("bias") == std::string::npos) init_xavier(p->value, rng);
    }
  }

  const FeatureExtractorSpec& spec() const { return spec_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  struct Outputs {
    typename Graph<T>::Val features;         // [N, feature_dim]
    typename Graph<T>::Val rotation_logits;  // [N, 4]
    typename Graph<T>::Val class_logits;     // [N, num_classes]
  };

  Outputs forward(GraphBindings<T>& b, typename Graph<T>::Val x) {
    auto& g = b.graph();
    auto h = x;
    for (std::size_t i = 0; i < conv_.size(); ++i) {
      h = conv_[i].forward(b, h);
      h = g.relu(h);
      if (i + 1 < conv_.size()) h = g.avg_pool2(h);
    }
    Outputs out;
    // mean pooling keeps feature magnitudes O(1)
    const int hw = g.value(h).dim(1) * g.value(h).dim(2);
    out.features = g.affine_const(g.global_sum_pool(h), T(1) / static_cast<T>(hw), T(0));
    out.rotation_logits = rotation_head_.forward(b, out.features);
    out.class_logits = class_head_.forward(b, out.features);
    return out;
  }

  // Inference helpers on throwaway graphs.
  Tensor<T> features(const Tensor<T>& images) {
    Graph<T> g;
    GraphBindings<T> b(g, false);
    auto out = forward(b, g.constant(images));
    return g.value(out.features);
  }

  Tensor<T> class_logits(const Tensor<T>& images) {
    Graph<T> g;
    GraphBindings<T> b(g, false);
    auto out = forward(b, g.constant(images));
    return g.value(out.class_logits);
  }

  void append_state(std::vector<std::pair<std::string, Tensor<T>*>>& out) {
    for (const auto& p : store_.all()) out.push_back({p->name, &p->value});
  }

 private:
  FeatureExtractorSpec spec_;
  ParamStore<T> store_;
  std::vector<Conv2dLayer<T>> conv_;
  DenseLayer<T> rotation_head_, class_head_;
};

// ---------------------------------------------------------------------------
// Pretraining (self-supervised rotation task, optionally joint with the
// semi-supervised class head).
// ---------------------------------------------------------------------------

struct PretrainConfig {
  int epochs = 30;
  int batch_size = 64;
  int num_unlabeled_per_batch = 48;  // the paper's B; rest of the batch is labeled
  double gamma = 0.5;                // weight of the class term; 0 => unsupervised
  double momentum = 0.9;
  std::uint64_t seed = 1;

  // lr = 0.1 * B / 256 with B the unlabeled examples per batch
  double base_lr() const { return 0.1 * static_cast<double>(num_unlabeled_per_batch) / 256.0; }
};

struct PretrainResult {
  double final_loss = 0.0;
  double heldout_accuracy = -1.0;  // -1 when no eval set given
  int steps = 0;
};

// Top-1 accuracy of the class head against the dataset's labels.
template <typename T>
double classifier_accuracy(FeatureExtractor<T>& f, const LabeledDataset& dataset,
                           int batch = 128) {
  int correct = 0, total = 0;
  for (int start = 0; start < dataset.size(); start += batch) {
    const int n = std::min(batch, dataset.size() - start);
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[i] = start + i;
    const auto logits = f.class_logits(dataset.gather_images(idx).template cast<T>());
    const int k = logits.dim(1);
    for (int i = 0; i < n; ++i) {
      int arg = 0;
      for (int c = 1; c < k; ++c) {
        if (logits.data[static_cast<std::size_t>(i) * k + c] >
            logits.data[static_cast<std::size_t>(i) * k + arg]) {
          arg = c;
        }
      }
      if (dataset.labels[start + i] != kAbsentLabel) {
        correct += (arg == dataset.labels[start + i]);
        ++total;
      }
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

// Minimizes the rotation loss (gamma = 0) or the joint rotation +
// gamma * class loss over the labeled subset. SGD with momentum, linear
// warmup, and two x0.1 decays at the canonical epoch fractions. The rotation
// term averages over the whole batch, the class term over the labeled part,
// both including all four rotated copies. Deterministic given config.seed.
template <typename T>
PretrainResult train_feature_extractor(FeatureExtractor<T>& f, const LabeledDataset& dataset,
                                       const PretrainConfig& cfg,
                                       const LabeledDataset* heldout = nullptr) {
  const bool semi = cfg.gamma > 0.0;
  const int labeled_per_batch = cfg.batch_size - cfg.num_unlabeled_per_batch;
  if (semi && dataset.labeled_indices().empty()) {
    throw StateError("train_feature_extractor: semi-supervised mode needs labeled examples");
  }
  if (labeled_per_batch < 0) throw ArgumentError("pretrain: B must not exceed batch size");
  if (semi && labeled_per_batch == 0) {
    throw ArgumentError("pretrain: semi-supervised mode needs labeled slots in the batch");
  }

  SgdMomentum<T> sgd(cfg.momentum);
  const int steps_per_epoch = std::max(1, dataset.size() / cfg.batch_size);
  const int total_steps = cfg.epochs * steps_per_epoch;
  PretrainResult result;
  double loss_value = 0.0;
  for (int step = 0; step < total_steps; ++step) {
    const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
    const double lr = pretrain_lr(cfg.base_lr(), progress);

    const MixedBatch mixed =
        make_mixed_batch(dataset, cfg.batch_size, semi ? cfg.num_unlabeled_per_batch : cfg.batch_size,
                         cfg.seed, static_cast<std::uint64_t>(step));
    // combined batch: unlabeled slots first, labeled slots after
    Tensor<float> combined(Shape{cfg.batch_size, dataset.height(), dataset.width(),
                                 dataset.channels()});
    std::copy(mixed.unlabeled_images.data.begin(), mixed.unlabeled_images.data.end(),
              combined.data.begin());
    std::copy(mixed.labeled_images.data.begin(), mixed.labeled_images.data.end(),
              combined.data.begin() + mixed.unlabeled_images.numel());
    const RotationBatch rot = make_rotation_batch(combined);

    Graph<T> g;
    GraphBindings<T> b(g, true);
    auto out = f.forward(b, g.constant(rot.images.template cast<T>()));
    typename Graph<T>::Val loss;
    if (semi) {
      // class logits of the labeled copies in every rotation block
      std::vector<int> labeled_rows;
      std::vector<int> labels;
      const int unl = static_cast<int>(mixed.unlabeled_indices.size());
      for (int r = 0; r < 4; ++r) {
        for (std::size_t i = 0; i < mixed.labels.size(); ++i) {
          labeled_rows.push_back(r * cfg.batch_size + unl + static_cast<int>(i));
          labels.push_back(mixed.labels[i]);
        }
      }
      auto class_logits = g.gather_rows(out.class_logits, labeled_rows);
      loss = s2l_loss(g, out.rotation_logits, rot.rotation_targets, class_logits, labels,
                      cfg.gamma);
    } else {
      loss = rotation_loss(g, out.rotation_logits, rot.rotation_targets);
    }
    g.backward(loss);
    sgd.step(g, b.bound, lr);
    loss_value = static_cast<double>(g.value(loss).data[0]);
    ++result.steps;
  }
  result.final_loss = loss_value;
  if (heldout) result.heldout_accuracy = classifier_accuracy(f, *heldout);
  return result;
}

inline void save_extractor(const std::string& path, FeatureExtractor<float>& f) {
  TensorMap map;
  const auto& spec = f.spec();
  put_scalar(map, "meta/image_size", spec.image_size);
  put_scalar(map, "meta/image_channels", spec.image_channels);
  put_scalar(map, "meta/num_classes", spec.num_classes);
  std::vector<double> ch(spec.channels.begin(), spec.channels.end());
  map["meta/channels"] = Tensor<double>({static_cast<int>(ch.size())}, ch);
  std::vector<std::pair<std::string, Tensor<float>*>> entries;
  f.append_state(entries);
  for (auto& [name, tensor] : entries) put_tensor(map, name, *tensor);
  save_tensor_map(path, map);
}

inline std::shared_ptr<FeatureExtractor<float>> load_extractor(const std::string& path) {
  const TensorMap map = load_tensor_map(path);
  FeatureExtractorSpec spec;
  spec.image_size = static_cast<int>(get_scalar(map, "meta/image_size"));
  spec.image_channels = static_cast<int>(get_scalar(map, "meta/image_channels"));
  spec.num_classes = static_cast<int>(get_scalar(map, "meta/num_classes"));
  const auto& ch = map.at("meta/channels");
  spec.channels.assign(ch.data.begin(), ch.data.end());
  auto f = std::make_shared<FeatureExtractor<float>>(spec);
  std::vector<std::pair<std::string, Tensor<float>*>> entries;
  f->append_state(entries);
  for (auto& [name, tensor] : entries) *tensor = get_tensor<float>(map, name);
  return f;
}

// Plain supervised training of the class head (used for the evaluation
// embedder): cross entropy on unrotated images over the labeled examples.
template <typename T>
double train_classifier(FeatureExtractor<T>& f, const LabeledDataset& dataset,
                        int epochs, int batch_size, std::uint64_t seed, double lr = 0.02,
                        double momentum = 0.9) {
  if (dataset.labeled_indices().empty()) {
    throw StateError("train_classifier: dataset has no labels");
  }
  SgdMomentum<T> sgd(momentum);
  const int steps_per_epoch = std::max(1, dataset.size() / batch_size);
  const int total_steps = epochs * steps_per_epoch;
  double loss_value = 0.0;
  for (int step = 0; step < total_steps; ++step) {
    const MixedBatch batch =
        make_mixed_batch(dataset, batch_size, 0, seed, static_cast<std::uint64_t>(step));
    Graph<T> g;
    GraphBindings<T> b(g, true);
    auto out = f.forward(b, g.constant(batch.labeled_images.template cast<T>()));
    auto loss = g.mean_all(g.cross_entropy_rows(out.class_logits, batch.labels));
    g.backward(loss);
    const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
    sgd.step(g, b.bound, progress < 0.75 ? lr : lr * 0.1);
    loss_value = static_cast<double>(g.value(loss).data[0]);
  }
  return loss_value;
}

}  // namespace fewlabel
