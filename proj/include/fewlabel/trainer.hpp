#pragma once

#include <algorithm>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fewlabel/checkpoint.hpp"
#include "fewlabel/config.hpp"
#include "fewlabel/data.hpp"
#include "fewlabel/losses.hpp"
#include "fewlabel/metrics.hpp"
#include "fewlabel/models.hpp"
#include "fewlabel/optimizer.hpp"
#include "fewlabel/providers.hpp"

namespace fewlabel {

// ---------------------------------------------------------------------------
// Method registry
// ---------------------------------------------------------------------------

enum class Method {
  BIGGAN,
  BIGGAN_K,
  SINGLE_LABEL,
  RANDOM_LABEL,
  CLUSTERING,
  S2GAN,
  S2GAN_CO,
  S3GAN,
  S3GAN_CO,
};

inline std::string method_name(Method m) {
  switch (m) {
    case Method::BIGGAN: return "BIGGAN";
    case Method::BIGGAN_K: return "BIGGAN_K";
    case Method::SINGLE_LABEL: return "SINGLE_LABEL";
    case Method::RANDOM_LABEL: return "RANDOM_LABEL";
    case Method::CLUSTERING: return "CLUSTERING";
    case Method::S2GAN: return "S2GAN";
    case Method::S2GAN_CO: return "S2GAN_CO";
    case Method::S3GAN: return "S3GAN";
    case Method::S3GAN_CO: return "S3GAN_CO";
  }
  return "?";
}

// Accepts a trailing "_SS" suffix for the self-supervised variants of the
// unsupervised methods.
inline std::pair<Method, bool> method_from_name(std::string name) {
  bool ss = false;
  if (name.size() > 3 && name.substr(name.size() - 3) == "_SS") {
    ss = true;
    name = name.substr(0, name.size() - 3);
  }
  for (Method m : {Method::BIGGAN, Method::BIGGAN_K, Method::SINGLE_LABEL, Method::RANDOM_LABEL,
                   Method::CLUSTERING, Method::S2GAN, Method::S2GAN_CO, Method::S3GAN,
                   Method::S3GAN_CO}) {
    if (method_name(m) == name) return {m, ss};
  }
  throw ConfigError("unknown method: " + name);
}

inline bool method_uses_rotation(Method m, bool ss_flag) {
  if (m == Method::S3GAN || m == Method::S3GAN_CO) return true;
  return ss_flag && (m == Method::SINGLE_LABEL || m == Method::CLUSTERING);
}

inline bool method_uses_cotrain(Method m) {
  return m == Method::S2GAN_CO || m == Method::S3GAN_CO;
}

inline bool method_uses_pretrained_classifier(Method m) {
  return m == Method::S2GAN || m == Method::S3GAN;
}

struct OptimizerParams {
  double g_lr = 5e-5;
  double d_lr = 2e-4;
  double beta1 = 0.0;
  double beta2 = 0.999;
  int batch_size = 64;
  int latent_dim = 16;

  void validate() const {
    if (!(g_lr >= 0.0) || !(d_lr >= 0.0) || batch_size < 2 || latent_dim < 1) {
      throw ArgumentError("optimizer params: positive sizes and nonnegative rates required");
    }
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
      throw ArgumentError("optimizer params: betas must lie in [0, 1)");
    }
  }
};

// Full-scale reference constants, recorded as the configuration defaults of
// the method family: Adam(5e-5 / 2e-4, beta1=0, beta2=0.999), 2 D steps per
// G step, batch 2048, latent 120, 250k generator steps.
struct FullScaleDefaults {
  static constexpr double g_lr = 5e-5;
  static constexpr double d_lr = 2e-4;
  static constexpr double beta1 = 0.0;
  static constexpr double beta2 = 0.999;
  static constexpr int d_steps_per_g = 2;
  static constexpr int batch_size = 2048;
  static constexpr int latent_dim = 120;
  static constexpr int total_g_steps = 250000;
};

// One row of the method table plus every hyperparameter needed to train it.
struct MethodConfig {
  Method method = Method::S3GAN;
  bool self_supervised = false;  // SS flag for the unsupervised methods
  double k_percent = 10.0;
  int n_clusters = 0;  // CLUSTERING only
  LabelMode hard_or_soft = LabelMode::Hard;
  LossWeights weights;
  OptimizerParams opt;
  int total_g_steps = 2000;
  int d_steps_per_g = 2;
  int eval_every = 500;
  int n_fake = 512;
  int n_sets = 5;
  // desk-scale model geometry
  int image_size = 32;
  int base_channels = 16;
  int embedding_dim = 32;
  int nonlocal_at = -1;  // resolution of the attention block; -1 = image_size/2, 0 = none

  std::string name() const {
    return method_name(method) + (self_supervised ? "_SS" : "");
  }

  bool uses_rotation() const { return method_uses_rotation(method, self_supervised); }
  bool uses_cotrain() const { return method_uses_cotrain(method); }

  void validate() const {
    opt.validate();
    weights.validate();
    if (!(k_percent > 0.0) || k_percent > 100.0) {
      throw ArgumentError("method config: k_percent must be in (0, 100]");
    }
    if (total_g_steps < 0 || d_steps_per_g < 1 || eval_every < 1) {
      throw ArgumentError("method config: step counts must be positive");
    }
    // method-flag consistency
    if ((weights.alpha != 0.0 || weights.beta != 0.0) && !uses_rotation()) {
      throw ArgumentError("method config: alpha/beta require the self-supervision flag");
    }
    if (weights.lambda != 0.0 && !uses_cotrain()) {
      throw ArgumentError("method config: lambda requires a co-training method");
    }
    if (n_clusters != 0 && method != Method::CLUSTERING) {
      throw ArgumentError("method config: n_clusters applies to CLUSTERING only");
    }
    if (method == Method::CLUSTERING && n_clusters < 1) {
      throw ArgumentError("method config: CLUSTERING needs n_clusters >= 1");
    }
    if (self_supervised && method != Method::SINGLE_LABEL && method != Method::CLUSTERING) {
      throw ArgumentError("method config: the SS flag applies to SINGLE_LABEL and CLUSTERING");
    }
    if (method == Method::BIGGAN && k_percent != 100.0) {
      throw ArgumentError("method config: BIGGAN is the fully supervised baseline (k = 100)");
    }
    if (uses_cotrain() && opt.batch_size < 4) {
      throw ArgumentError("method config: co-training needs batch_size >= 4");
    }
  }
};

// Default hyperparameters per method row: alpha=0.2 everywhere rotation
// self-supervision is on, beta=0.5 except 1.0 for S3GAN_CO, lambda=0.2 for
// the co-trained variants, gamma=0.5 for pretraining.
inline MethodConfig make_method_config(Method m, double k_percent = 10.0, bool ss_flag = false) {
  MethodConfig cfg;
  cfg.method = m;
  cfg.self_supervised = ss_flag;
  cfg.k_percent = (m == Method::BIGGAN) ? 100.0 : k_percent;
  cfg.weights.gamma = 0.5;
  if (m == Method::CLUSTERING) cfg.n_clusters = 8;
  if (method_uses_cotrain(m)) {
    cfg.weights.lambda = 0.2;
    cfg.hard_or_soft = LabelMode::Soft;  // soft labels stabilize co-training
  }
  if (method_uses_rotation(m, ss_flag)) {
    cfg.weights.alpha = 0.2;
    cfg.weights.beta = (m == Method::S3GAN_CO) ? 1.0 : 0.5;
  }
  cfg.validate();
  return cfg;
}

inline MethodConfig method_config_from_kv(const KeyValueConfig& kv) {
  auto [method, ss] = method_from_name(kv.get_string("method", "S3GAN"));
  MethodConfig cfg = make_method_config(method, kv.get_double("k_percent", 10.0), ss);
  if (kv.has("n_clusters")) cfg.n_clusters = static_cast<int>(kv.get_int("n_clusters", 0));
  if (kv.has("hard_or_soft")) {
    const std::string v = kv.get_string("hard_or_soft");
    if (v != "hard" && v != "soft") throw ConfigError("hard_or_soft must be 'hard' or 'soft'");
    cfg.hard_or_soft = (v == "soft") ? LabelMode::Soft : LabelMode::Hard;
  }
  cfg.weights.gamma = kv.get_double("gamma", cfg.weights.gamma);
  cfg.weights.lambda = kv.get_double("lambda", cfg.weights.lambda);
  cfg.weights.alpha = kv.get_double("alpha", cfg.weights.alpha);
  cfg.weights.beta = kv.get_double("beta", cfg.weights.beta);
  cfg.opt.g_lr = kv.get_double("g_lr", cfg.opt.g_lr);
  cfg.opt.d_lr = kv.get_double("d_lr", cfg.opt.d_lr);
  cfg.opt.beta1 = kv.get_double("beta1", cfg.opt.beta1);
  cfg.opt.beta2 = kv.get_double("beta2", cfg.opt.beta2);
  cfg.opt.batch_size = static_cast<int>(kv.get_int("batch_size", cfg.opt.batch_size));
  cfg.opt.latent_dim = static_cast<int>(kv.get_int("latent_dim", cfg.opt.latent_dim));
  cfg.total_g_steps = static_cast<int>(kv.get_int("total_g_steps", cfg.total_g_steps));
  cfg.d_steps_per_g = static_cast<int>(kv.get_int("d_steps_per_g", cfg.d_steps_per_g));
  cfg.eval_every = static_cast<int>(kv.get_int("eval_every", cfg.eval_every));
  cfg.n_fake = static_cast<int>(kv.get_int("n_fake", cfg.n_fake));
  cfg.n_sets = static_cast<int>(kv.get_int("n_sets", cfg.n_sets));
  cfg.image_size = static_cast<int>(kv.get_int("image_size", cfg.image_size));
  cfg.base_channels = static_cast<int>(kv.get_int("base_channels", cfg.base_channels));
  cfg.embedding_dim = static_cast<int>(kv.get_int("embedding_dim", cfg.embedding_dim));
  cfg.nonlocal_at = static_cast<int>(kv.get_int("nonlocal_at", cfg.nonlocal_at));
  cfg.validate();
  return cfg;
}

inline KeyValueConfig method_config_to_kv(const MethodConfig& cfg) {
  KeyValueConfig kv;
  kv.set("method", cfg.name());
  kv.set("k_percent", std::to_string(cfg.k_percent));
  if (cfg.method == Method::CLUSTERING) kv.set("n_clusters", std::to_string(cfg.n_clusters));
  kv.set("hard_or_soft", cfg.hard_or_soft == LabelMode::Soft ? "soft" : "hard");
  kv.set("gamma", std::to_string(cfg.weights.gamma));
  kv.set("lambda", std::to_string(cfg.weights.lambda));
  kv.set("alpha", std::to_string(cfg.weights.alpha));
  kv.set("beta", std::to_string(cfg.weights.beta));
  kv.set("g_lr", std::to_string(cfg.opt.g_lr));
  kv.set("d_lr", std::to_string(cfg.opt.d_lr));
  kv.set("beta1", std::to_string(cfg.opt.beta1));
  kv.set("beta2", std::to_string(cfg.opt.beta2));
  kv.set("batch_size", std::to_string(cfg.opt.batch_size));
  kv.set("latent_dim", std::to_string(cfg.opt.latent_dim));
  kv.set("total_g_steps", std::to_string(cfg.total_g_steps));
  kv.set("d_steps_per_g", std::to_string(cfg.d_steps_per_g));
  kv.set("eval_every", std::to_string(cfg.eval_every));
  kv.set("n_fake", std::to_string(cfg.n_fake));
  kv.set("n_sets", std::to_string(cfg.n_sets));
  kv.set("image_size", std::to_string(cfg.image_size));
  kv.set("base_channels", std::to_string(cfg.base_channels));
  kv.set("embedding_dim", std::to_string(cfg.embedding_dim));
  kv.set("nonlocal_at", std::to_string(cfg.nonlocal_at));
  return kv;
}

// ---------------------------------------------------------------------------
// Assembled training graph
// ---------------------------------------------------------------------------

struct PretrainedArtifacts {
  std::string s2l_provider_path;      // S2GAN / S3GAN
  std::string cluster_provider_path;  // CLUSTERING
};

// Everything a single training run owns.
class GanTrainer {
 public:
  GanTrainer(MethodConfig cfg, LabeledDataset dataset, const PretrainedArtifacts& artifacts,
             std::uint64_t seed)
      : cfg_(std::move(cfg)), seed_(seed) {
    cfg_.validate();
    dataset_ = prepare_dataset(cfg_, std::move(dataset));
    provider_ = resolve_provider(cfg_, dataset_, artifacts);

    GeneratorSpec gspec;
    gspec.image_size = cfg_.image_size;
    gspec.base_channels = cfg_.base_channels;
    gspec.latent_dim = cfg_.opt.latent_dim;
    gspec.num_classes = provider_.num_classes_effective;
    gspec.embedding_dim = cfg_.embedding_dim;
    gspec.num_blocks = num_blocks_for(cfg_.image_size);
    gspec.nonlocal_at = cfg_.nonlocal_at < 0 ? cfg_.image_size / 2 : cfg_.nonlocal_at;
    DiscriminatorSpec dspec;
    dspec.image_size = cfg_.image_size;
    dspec.base_channels = cfg_.base_channels;
    dspec.num_classes = provider_.num_classes_effective;
    dspec.num_blocks = gspec.num_blocks;
    dspec.nonlocal_at = gspec.nonlocal_at;
    dspec.projection = cfg_.method != Method::SINGLE_LABEL;
    dspec.rotation_head = cfg_.uses_rotation();
    dspec.cotrain_head = cfg_.uses_cotrain();

    generator_ = std::make_unique<Generator<float>>(gspec, hash_combine(seed_, fnv1a("G")));
    discriminator_ =
        std::make_unique<Discriminator<float>>(dspec, hash_combine(seed_, fnv1a("D")));
    AdamConfig gac{cfg_.opt.g_lr, cfg_.opt.beta1, cfg_.opt.beta2, 1e-8};
    AdamConfig dac{cfg_.opt.d_lr, cfg_.opt.beta1, cfg_.opt.beta2, 1e-8};
    g_opt_ = std::make_unique<Adam<float>>(gac);
    d_opt_ = std::make_unique<Adam<float>>(dac);
  }

  const MethodConfig& config() const { return cfg_; }
  const LabeledDataset& dataset() const { return dataset_; }
  const LabelProvider& provider() const { return provider_; }
  Generator<float>& generator() { return *generator_; }
  Discriminator<float>& discriminator() { return *discriminator_; }
  std::int64_t step() const { return step_; }
  std::int64_t d_updates() const { return d_updates_; }
  std::int64_t g_updates() const { return g_updates_; }
  int divergence_events() const { return divergence_events_; }
  bool collapsed() const { return collapsed_; }
  std::uint64_t seed() const { return seed_; }

  // One generator step: d_steps_per_g discriminator updates on fresh batches
  // followed by one generator update. A non-finite loss aborts the step,
  // restores the pre-step parameters, and records a divergence event.
  void train_step() {
    const TensorMap snapshot = state_map();
    try {
      for (int i = 0; i < cfg_.d_steps_per_g; ++i) {
        d_update(substream(i));
      }
      g_update(substream(cfg_.d_steps_per_g));
    } catch (const DivergenceDetected&) {
      load_state_map(snapshot);
      ++divergence_events_;
      emit_warning("train_step: non-finite loss at step " + std::to_string(step_) +
                   ", parameters restored");
    }
    ++step_;
  }

  double last_d_loss() const { return last_d_loss_; }
  double last_g_loss() const { return last_g_loss_; }

  // ----- checkpointing -----

  TensorMap state_map() const {
    TensorMap map;
    std::vector<std::pair<std::string, Tensor<float>*>> entries;
    generator_->append_state(entries);
    discriminator_->append_state(entries);
    for (auto& [name, tensor] : entries) put_tensor(map, name, *tensor);
    auto put_moments = [&map](const char* prefix, ParamStore<float>& store) {
      for (const auto& p : store.all()) {
        if (p->adam_m.numel() > 0) {
          put_tensor(map, std::string(prefix) + p->name + "/adam_m", p->adam_m);
          put_tensor(map, std::string(prefix) + p->name + "/adam_v", p->adam_v);
        }
      }
    };
    put_moments("opt/", generator_->params());
    put_moments("opt/", discriminator_->params());
    put_scalar(map, "trainer/step", static_cast<double>(step_));
    put_scalar(map, "trainer/d_updates", static_cast<double>(d_updates_));
    put_scalar(map, "trainer/g_updates", static_cast<double>(g_updates_));
    put_scalar(map, "trainer/g_opt_steps", static_cast<double>(g_opt_->steps_taken()));
    put_scalar(map, "trainer/d_opt_steps", static_cast<double>(d_opt_->steps_taken()));
    put_scalar(map, "trainer/divergence_events", divergence_events_);
    put_scalar(map, "trainer/collapsed", collapsed_ ? 1.0 : 0.0);
    return map;
  }

  void load_state_map(const TensorMap& map) {
    std::vector<std::pair<std::string, Tensor<float>*>> entries;
    generator_->append_state(entries);
    discriminator_->append_state(entries);
    for (auto& [name, tensor] : entries) {
      if (map.count(name)) *tensor = get_tensor<float>(map, name);
    }
    // spectral norm u vectors may appear after the entry list was built
    auto load_sn = [&map](auto& model) {
      for (auto& [name, state] : model.sn_states()) {
        const std::string key = name + "/sn_u";
        if (map.count(key)) state->u = get_tensor<float>(map, key);
      }
    };
    load_sn(*generator_);
    load_sn(*discriminator_);
    auto load_moments = [&map](ParamStore<float>& store) {
      for (const auto& p : store.all()) {
        const std::string m = "opt/" + p->name + "/adam_m";
        if (map.count(m)) {
          p->adam_m = get_tensor<float>(map, m);
          p->adam_v = get_tensor<float>(map, "opt/" + p->name + "/adam_v");
        }
      }
    };
    load_moments(generator_->params());
    load_moments(discriminator_->params());
    step_ = static_cast<std::int64_t>(get_scalar(map, "trainer/step"));
    d_updates_ = static_cast<std::int64_t>(get_scalar(map, "trainer/d_updates"));
    g_updates_ = static_cast<std::int64_t>(get_scalar(map, "trainer/g_updates"));
    g_opt_->set_steps_taken(static_cast<std::int64_t>(get_scalar(map, "trainer/g_opt_steps")));
    d_opt_->set_steps_taken(static_cast<std::int64_t>(get_scalar(map, "trainer/d_opt_steps")));
    divergence_events_ = static_cast<int>(get_scalar(map, "trainer/divergence_events"));
    collapsed_ = get_scalar(map, "trainer/collapsed") > 0.5;
  }

  void save_checkpoint(const std::string& path) const { save_tensor_map(path, state_map()); }
  void load_checkpoint(const std::string& path) { load_state_map(load_tensor_map(path)); }

  void mark_collapsed() { collapsed_ = true; }

  // Advances the step counter without training (used after a divergence
  // rollback so the run does not replay the trajectory that diverged).
  void skip_step() { ++step_; }

  // Exposed for the parameter-isolation audits.
  void d_update_for_test(std::uint64_t stream) { d_update(Rng::derive(seed_, 0xd0ull, stream)); }
  void g_update_for_test(std::uint64_t stream) { g_update(Rng::derive(seed_, 0x60ull, stream)); }

 private:
  struct DivergenceDetected {};

  static int num_blocks_for(int image_size) {
    int nb = 0, s = image_size;
    while (s > 4) {
      s /= 2;
      ++nb;
    }
    if ((4 << nb) != image_size) throw ArgumentError("image_size must be 4 * 2^k");
    return nb;
  }

  Rng substream(int i) const {
    return Rng::derive(seed_, static_cast<std::uint64_t>(step_),
                       static_cast<std::uint64_t>(i), 0x5afeull);
  }

  static LabeledDataset prepare_dataset(const MethodConfig& cfg, LabeledDataset ds) {
    if (cfg.method != Method::BIGGAN && cfg.k_percent < 100.0 && ds.fully_labeled()) {
      ds = subsample_labels(ds, cfg.k_percent, fnv1a("label-subsample"));
    }
    if (cfg.method == Method::BIGGAN_K) {
      // retain only the labeled examples, discard the rest
      const std::vector<int> keep = ds.labeled_indices();
      LabeledDataset pruned;
      pruned.id = ds.id + ":labeled-only";
      pruned.num_classes = ds.num_classes;
      pruned.images = ds.gather_images(keep);
      pruned.labels.reserve(keep.size());
      for (int i : keep) pruned.labels.push_back(ds.labels[i]);
      return pruned;
    }
    return ds;
  }

  static LabelProvider resolve_provider(const MethodConfig& cfg, const LabeledDataset& ds,
                                        const PretrainedArtifacts& artifacts) {
    switch (cfg.method) {
      case Method::BIGGAN:
      case Method::BIGGAN_K:
        return make_ground_truth_provider(ds.num_classes);
      case Method::SINGLE_LABEL:
        return make_single_label_provider();
      case Method::RANDOM_LABEL:
        return make_random_label_provider(ds.num_classes);
      case Method::CLUSTERING: {
        if (artifacts.cluster_provider_path.empty() ||
            !std::filesystem::exists(artifacts.cluster_provider_path)) {
          throw ConfigError("CLUSTERING requires a pretrained cluster provider artifact at '" +
                            artifacts.cluster_provider_path + "'");
        }
        LabelProvider p = load_provider(artifacts.cluster_provider_path);
        if (p.kind != ProviderKind::Cluster) {
          throw ConfigError("artifact is not a cluster provider: " +
                            artifacts.cluster_provider_path);
        }
        return p;
      }
      case Method::S2GAN:
      case Method::S3GAN: {
        if (artifacts.s2l_provider_path.empty() ||
            !std::filesystem::exists(artifacts.s2l_provider_path)) {
          throw ConfigError(method_name(cfg.method) +
                            " requires a pretrained classifier artifact at '" +
                            artifacts.s2l_provider_path + "'");
        }
        LabelProvider p = load_provider(artifacts.s2l_provider_path);
        if (p.kind != ProviderKind::S2L) {
          throw ConfigError("artifact is not an S2L provider: " + artifacts.s2l_provider_path);
        }
        p.mode = cfg.hard_or_soft;
        return p;
      }
      case Method::S2GAN_CO:
      case Method::S3GAN_CO:
        return make_cotrain_provider(ds.num_classes, cfg.hard_or_soft);
    }
    throw ConfigError("unhandled method");
  }

  // Labels for a batch of real images drawn as `indices` from the dataset.
  LabelBatch<float> real_labels(const Tensor<float>& images, const std::vector<int>& indices,
                                Rng& rng) {
    if (provider_.kind == ProviderKind::GroundTruth) {
      std::vector<int> labels;
      labels.reserve(indices.size());
      for (int i : indices) labels.push_back(dataset_.labels[i]);
      return provide_labels(provider_, images, &labels, rng);
    }
    return provide_labels(provider_, images, nullptr, rng);
  }

  void check_finite(Graph<float>& g, typename Graph<float>::Val loss) {
    if (!g.value(loss).all_finite()) throw DivergenceDetected{};
  }

  void d_update(Rng rng) {
    Graph<float> g;
    GraphBindings<float> bd(g, true);   // discriminator being trained
    GraphBindings<float> bg(g, false);  // generator frozen
    DiscriminatorHeads heads;
    heads.rotation = cfg_.uses_rotation();
    heads.cotrain = cfg_.uses_cotrain();

    typename Graph<float>::Val loss;
    const int batch = cfg_.opt.batch_size;
    if (!cfg_.uses_cotrain()) {
      // real part: uniform over all examples, labels from the provider
      const int num_unlabeled = provider_.kind == ProviderKind::GroundTruth ? 0 : batch;
      const MixedBatch mixed = make_mixed_batch(dataset_, batch, num_unlabeled, seed_,
                                                rng.next_u64());
      const Tensor<float>& real_images =
          num_unlabeled > 0 ? mixed.unlabeled_images : mixed.labeled_images;
      const std::vector<int>& real_idx =
          num_unlabeled > 0 ? mixed.unlabeled_indices : mixed.labeled_indices;
      const LabelBatch<float> y_real = real_labels(real_images, real_idx, rng);

      typename Graph<float>::Val real_scores, rot_logits;
      std::vector<int> rot_targets;
      if (heads.rotation) {
        const RotationBatch rot = make_rotation_batch(real_images);
        rot_targets = rot.rotation_targets;
        LabelBatch<float> y_rot = tile_labels(y_real, 4);
        auto out = discriminator_->forward(bd, g.constant(rot.images), y_rot, heads);
        real_scores = g.rows(out.score, 0, batch);  // scores of the unrotated block
        rot_logits = out.rotation_logits;
      } else {
        auto out = discriminator_->forward(bd, g.constant(real_images), y_real, heads);
        real_scores = out.score;
      }

      auto [fake_images, y_fake] = generate_fakes(g, bg, batch, rng, /*training=*/true);
      auto fake_out = discriminator_->forward(bd, fake_images, y_fake, {});
      loss = hinge_d_loss(g, real_scores, fake_out.score);
      if (heads.rotation) {
        loss = g.add(loss, d_selfsup_term(g, rot_logits, rot_targets, cfg_.weights.beta));
      }
    } else {
      // labeled part carries ground-truth labels; the unlabeled part is
      // conditioned on the cotrain head's soft predictions
      const int num_unlabeled = batch * 3 / 4;
      const MixedBatch mixed = make_mixed_batch(dataset_, batch, num_unlabeled, seed_,
                                                rng.next_u64());
      auto lab_out = discriminator_->forward(bd, g.constant(mixed.labeled_images),
                                             LabelBatch<float>::hard_labels(mixed.labels), heads);
      auto unl_out = discriminator_->forward(bd, g.constant(mixed.unlabeled_images),
                                             LabelBatch<float>::absent(), heads);
      // soft predicted labels are conditioning inputs, not gradient paths
      auto soft = g.stop_grad(g.softmax_rows(unl_out.cotrain_logits));
      auto unl_scores = discriminator_->conditioned_score(bd, unl_out, soft);

      auto [fake_images, y_fake] = generate_fakes(g, bg, batch, rng, /*training=*/true);
      auto fake_out = discriminator_->forward(bd, fake_images, y_fake, {});
      loss = cotrain_d_loss(g, lab_out.score, lab_out.cotrain_logits, mixed.labels, unl_scores,
                            true, fake_out.score, cfg_.weights.lambda);
      if (heads.rotation) {
        // rotation term over all real images of the batch
        Tensor<float> all_real(Shape{batch, dataset_.height(), dataset_.width(),
                                     dataset_.channels()});
        std::copy(mixed.unlabeled_images.data.begin(), mixed.unlabeled_images.data.end(),
                  all_real.data.begin());
        std::copy(mixed.labeled_images.data.begin(), mixed.labeled_images.data.end(),
                  all_real.data.begin() + mixed.unlabeled_images.numel());
        const RotationBatch rot = make_rotation_batch(all_real);
        auto rot_out = discriminator_->forward(bd, g.constant(rot.images),
                                               LabelBatch<float>::absent(), heads);
        loss = g.add(loss, d_selfsup_term(g, rot_out.rotation_logits, rot.rotation_targets,
                                          cfg_.weights.beta));
      }
    }
    check_finite(g, loss);
    g.backward(loss);
    d_opt_->step(g, bd.bound);
    last_d_loss_ = g.value(loss).data[0];
    ++d_updates_;
  }

  void g_update(Rng rng) {
    Graph<float> g;
    GraphBindings<float> bg(g, true);   // generator being trained
    GraphBindings<float> bd(g, false);  // discriminator frozen
    const int batch = cfg_.opt.batch_size;

    auto [fake_images, y_fake] = generate_fakes(g, bg, batch, rng, /*training=*/true);
    typename Graph<float>::Val loss;
    if (cfg_.uses_rotation()) {
      // one pass over [fakes; rot90; rot180; rot270]: adversarial scores from
      // the unrotated block, rotation logits from all four
      std::vector<typename Graph<float>::Val> parts{fake_images};
      for (int r = 1; r < 4; ++r) parts.push_back(g.rotate90(fake_images, r));
      auto rot_batch = g.concat_rows(parts);
      std::vector<int> rot_targets(static_cast<std::size_t>(4) * batch);
      for (int i = 0; i < 4 * batch; ++i) rot_targets[i] = i / batch;
      DiscriminatorHeads heads;
      heads.rotation = true;
      auto out = discriminator_->forward(bd, rot_batch, tile_labels(y_fake, 4), heads);
      loss = hinge_g_loss(g, g.rows(out.score, 0, batch));
      loss = g.add(loss, g_selfsup_term(g, out.rotation_logits, rot_targets, cfg_.weights.alpha));
    } else {
      auto out = discriminator_->forward(bd, fake_images, y_fake, {});
      loss = hinge_g_loss(g, out.score);
    }
    check_finite(g, loss);
    g.backward(loss);
    g_opt_->step(g, bg.bound);
    last_g_loss_ = g.value(loss).data[0];
    ++g_updates_;
  }

  // Samples z and fake labels and runs the generator forward.
  std::pair<typename Graph<float>::Val, LabelBatch<float>> generate_fakes(
      Graph<float>& g, GraphBindings<float>& bg, int n, Rng& rng, bool training) {
    Tensor<float> z = Tensor<float>::randn({n, cfg_.opt.latent_dim}, rng);
    LabelBatch<float> y = sample_fake_labels(provider_, n, rng);
    auto images = generator_->forward(bg, g.constant(z), y, training);
    return {images, y};
  }

  static LabelBatch<float> tile_labels(const LabelBatch<float>& y, int times) {
    if (y.kind == LabelBatch<float>::Kind::Hard) {
      std::vector<int> tiled;
      tiled.reserve(y.hard.size() * times);
      for (int t = 0; t < times; ++t) tiled.insert(tiled.end(), y.hard.begin(), y.hard.end());
      return LabelBatch<float>::hard_labels(std::move(tiled));
    }
    if (y.kind == LabelBatch<float>::Kind::Soft) {
      const int n = y.soft.dim(0), k = y.soft.dim(1);
      Tensor<float> tiled(Shape{n * times, k});
      for (int t = 0; t < times; ++t) {
        std::copy(y.soft.data.begin(), y.soft.data.end(),
                  tiled.data.begin() + static_cast<std::int64_t>(t) * n * k);
      }
      return LabelBatch<float>::soft_labels(std::move(tiled));
    }
    return y;
  }

  MethodConfig cfg_;
  LabeledDataset dataset_;
  LabelProvider provider_;
  std::unique_ptr<Generator<float>> generator_;
  std::unique_ptr<Discriminator<float>> discriminator_;
  std::unique_ptr<Adam<float>> g_opt_, d_opt_;
  std::uint64_t seed_ = 0;
  std::int64_t step_ = 0;
  std::int64_t d_updates_ = 0;
  std::int64_t g_updates_ = 0;
  int divergence_events_ = 0;
  bool collapsed_ = false;
  double last_d_loss_ = 0.0;
  double last_g_loss_ = 0.0;
};

// ---------------------------------------------------------------------------
// Multi-seed orchestration
// ---------------------------------------------------------------------------

struct SeedResult {
  std::uint64_t seed = 0;
  double final_fid = 0.0;
  double final_is = 0.0;
  bool collapsed = false;
  std::string metrics_path;
};

struct ExperimentReport {
  std::string method;
  std::vector<SeedResult> seeds;
  double median_fid = 0.0;
  double median_is = 0.0;
  double mean_fid = 0.0, std_fid = 0.0;
  double mean_is = 0.0, std_is = 0.0;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw ArgumentError("median of empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Population standard deviation, matching the +/- presentation over seeds.
inline std::pair<double, double> mean_and_std(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x / static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean) / static_cast<double>(v.size());
  return {mean, std::sqrt(var)};
}

constexpr int kMaxDivergenceEvents = 5;

void write_sample_preview(GanTrainer& trainer, const std::string& path);

struct RunHooks {
  // called after each evaluation with (step, result)
  std::function<void(std::int64_t, const EvalResult&)> on_eval;
  // called before each training step
  std::function<void(std::int64_t, GanTrainer&)> on_step;
};

// Trains one seed to completion with periodic evaluation and checkpointing,
// resuming from run_dir/checkpoint.bin when present. Divergence rolls back
// to the last checkpoint and continues; repeated divergence marks the run
// collapsed and stops it, keeping its last valid metrics.
inline SeedResult run_single_seed(const MethodConfig& cfg, const LabeledDataset& dataset,
                                  const PretrainedArtifacts& artifacts, std::uint64_t seed,
                                  const std::string& run_dir, const Embedder& embedder,
                                  const GaussianStats& real_stats, const RunHooks& hooks = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(run_dir);
  const std::string ckpt_path = run_dir + "/checkpoint.bin";
  const std::string metrics_path = run_dir + "/metrics.jsonl";

  GanTrainer trainer(cfg, dataset, artifacts, seed);
  if (fs::exists(ckpt_path)) {
    trainer.load_checkpoint(ckpt_path);
    emit_warning("run resumed from checkpoint at step " + std::to_string(trainer.step()));
  } else {
    fs::remove(metrics_path);
  }

  SeedResult result;
  result.seed = seed;
  result.metrics_path = metrics_path;
  double last_fid = -1.0, last_is = -1.0;
  std::int64_t last_eval_step = -1;

  auto evaluate_now = [&](std::int64_t at_step) {
    last_eval_step = at_step;
    EvalResult ev = evaluate_model(trainer.generator(), trainer.provider(), real_stats, embedder,
                                   cfg.n_fake, cfg.n_sets, hash_combine(seed, at_step));
    MetricsRecord rec;
    rec.step = at_step;
    rec.seed = seed;
    rec.method = cfg.name();
    rec.fid_mean = ev.fid_mean;
    rec.is_mean = ev.is_mean;
    rec.embedder_id = ev.embedder_id;
    rec.n_fake = ev.n_fake;
    rec.n_sets = ev.n_sets;
    rec.k_percent = cfg.k_percent;
    rec.collapsed = trainer.collapsed();
    append_metrics_record(metrics_path, rec);
    last_fid = ev.fid_mean;
    last_is = ev.is_mean;
    if (hooks.on_eval) hooks.on_eval(at_step, ev);
    write_sample_preview(trainer, run_dir + "/preview_step" + std::to_string(at_step) + ".bmp");
  };

  if (trainer.step() == 0) evaluate_now(0);

  while (trainer.step() < cfg.total_g_steps && !trainer.collapsed()) {
    if (hooks.on_step) hooks.on_step(trainer.step(), trainer);
    const int before = trainer.divergence_events();
    trainer.train_step();
    if (trainer.divergence_events() > before) {
      if (trainer.divergence_events() >= kMaxDivergenceEvents) {
        trainer.mark_collapsed();
        emit_warning("run collapsed after repeated divergence; keeping last valid metrics");
        break;
      }
      if (fs::exists(ckpt_path)) {
        const std::int64_t step_now = trainer.step();
        trainer.load_checkpoint(ckpt_path);
        // keep the global step advancing so the run does not replay the
        // exact trajectory that diverged
        while (trainer.step() < step_now) trainer.skip_step();
      }
      continue;
    }
    if (trainer.step() % cfg.eval_every == 0 || trainer.step() == cfg.total_g_steps) {
      trainer.save_checkpoint(ckpt_path);
      evaluate_now(trainer.step());
    }
  }
  if (!trainer.collapsed() && trainer.step() != last_eval_step) {  // final partial interval
    trainer.save_checkpoint(ckpt_path);
    evaluate_now(trainer.step());
  }
  if (trainer.collapsed()) {
    trainer.save_checkpoint(ckpt_path);
    MetricsRecord rec;
    rec.step = trainer.step();
    rec.seed = seed;
    rec.method = cfg.name();
    rec.fid_mean = last_fid;
    rec.is_mean = last_is;
    rec.embedder_id = embedder.identifier();
    rec.n_fake = cfg.n_fake;
    rec.n_sets = cfg.n_sets;
    rec.k_percent = cfg.k_percent;
    rec.collapsed = true;
    append_metrics_record(metrics_path, rec);
  }

  result.final_fid = last_fid;
  result.final_is = last_is;
  result.collapsed = trainer.collapsed();
  return result;
}

// One full training run per seed; the report carries per-seed finals plus
// the cross-seed median and mean +/- population std. Collapsed runs are
// included with their last valid metrics.
inline ExperimentReport run_experiment(const MethodConfig& cfg, const LabeledDataset& dataset,
                                       const PretrainedArtifacts& artifacts,
                                       const std::vector<std::uint64_t>& seeds,
                                       const std::string& out_dir, const Embedder& embedder,
                                       const RunHooks& hooks = {}) {
  if (seeds.empty()) throw ArgumentError("run_experiment: need at least one seed");
  const GaussianStats real_stats = compute_real_stats(embedder, dataset);
  ExperimentReport report;
  report.method = cfg.name();
  std::vector<double> fids, iss;
  for (std::uint64_t seed : seeds) {
    const std::string run_dir = out_dir + "/" + cfg.name() + "/seed" + std::to_string(seed);
    SeedResult r =
        run_single_seed(cfg, dataset, artifacts, seed, run_dir, embedder, real_stats, hooks);
    fids.push_back(r.final_fid);
    iss.push_back(r.final_is);
    report.seeds.push_back(std::move(r));
  }
  report.median_fid = median_of(fids);
  report.median_is = median_of(iss);
  std::tie(report.mean_fid, report.std_fid) = mean_and_std(fids);
  std::tie(report.mean_is, report.std_is) = mean_and_std(iss);
  return report;
}

// 8x8 preview grid of samples at a checkpoint.
inline void write_sample_preview(GanTrainer& trainer, const std::string& path) {
  const int grid = 8;
  const int n = grid * grid;
  Rng rng = Rng::derive(trainer.seed(), 0x9e1dull);
  Tensor<float> z = Tensor<float>::randn({n, trainer.config().opt.latent_dim}, rng);
  LabelBatch<float> y = sample_fake_labels(trainer.provider(), n, rng);
  const Tensor<float> images = trainer.generator().generate(z, y);
  const int s = images.dim(1);
  ImageRGB8 canvas;
  canvas.width = grid * s;
  canvas.height = grid * s;
  canvas.pixels.assign(static_cast<std::size_t>(canvas.width) * canvas.height * 3, 0);
  for (int i = 0; i < n; ++i) {
    const int gy = (i / grid) * s, gx = (i % grid) * s;
    for (int yy = 0; yy < s; ++yy) {
      for (int xx = 0; xx < s; ++xx) {
        for (int c = 0; c < 3; ++c) {
          float v = images.data[((static_cast<std::int64_t>(i) * s + yy) * s + xx) * 3 + c];
          v = (v + 1.0f) * 127.5f;
          canvas.at(gy + yy, gx + xx, c) =
              static_cast<std::uint8_t>(std::min(255.0f, std::max(0.0f, v + 0.5f)));
        }
      }
    }
  }
  write_bmp(path, canvas);
}

}  // namespace fewlabel
