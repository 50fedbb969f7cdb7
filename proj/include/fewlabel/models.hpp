#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fewlabel/layers.hpp"

namespace fewlabel {

// ---------------------------------------------------------------------------
// Label batches: hard indices, soft distributions, or absent.
// ---------------------------------------------------------------------------

template <typename T>
struct LabelBatch {
  enum class Kind { Absent, Hard, Soft };
  Kind kind = Kind::Absent;
  std::vector<int> hard;
  Tensor<T> soft;  // [N, K]

  static LabelBatch absent() { return {}; }
  static LabelBatch hard_labels(std::vector<int> idx) {
    LabelBatch b;
    b.kind = Kind::Hard;
    b.hard = std::move(idx);
    return b;
  }
  static LabelBatch soft_labels(Tensor<T> dist) {
    LabelBatch b;
    b.kind = Kind::Soft;
    b.soft = std::move(dist);
    return b;
  }

  int size() const {
    switch (kind) {
      case Kind::Hard: return static_cast<int>(hard.size());
      case Kind::Soft: return soft.dim(0);
      default: return 0;
    }
  }

  void validate(int num_classes) const {
    if (kind == Kind::Hard) {
      for (int i : hard) {
        if (i < 0 || i >= num_classes) throw ArgumentError("label index out of range");
      }
    } else if (kind == Kind::Soft) {
      if (soft.rank() != 2 || soft.dim(1) != num_classes) {
        throw ArgumentError("soft labels must be [N, num_classes]");
      }
      for (int n = 0; n < soft.dim(0); ++n) {
        double sum = 0.0;
        for (int k = 0; k < num_classes; ++k) {
          const double v = soft.data[static_cast<std::size_t>(n) * num_classes + k];
          if (v < -1e-9) throw ArgumentError("soft label with negative mass");
          sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-5) {
          throw ArgumentError("soft label row does not sum to 1 within 1e-5");
        }
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Projection term of the conditional discriminator score.
// ---------------------------------------------------------------------------

// repr^T W[y] for a hard label; sum_c y_c (repr^T W[c]) for a soft label.
template <typename T>
double projection_term(const Tensor<T>& repr, const Tensor<T>& w, const LabelBatch<T>& y) {
  if (w.rank() != 2 || repr.rank() != 1 || w.dim(1) != repr.dim(0)) {
    throw ArgumentError("projection_term: W must be [K, d] with d matching repr");
  }
  const int d = repr.dim(0);
  auto row_dot = [&](int cls) {
    double acc = 0.0;
    for (int c = 0; c < d; ++c)
      acc += static_cast<double>(repr.data[c]) *
             static_cast<double>(w.data[static_cast<std::size_t>(cls) * d + c]);
    return acc;
  };
  if (y.kind == LabelBatch<T>::Kind::Hard) {
    return row_dot(y.hard.at(0));
  }
  if (y.kind == LabelBatch<T>::Kind::Soft) {
    double acc = 0.0;
    for (int cls = 0; cls < w.dim(0); ++cls) {
      acc += static_cast<double>(y.soft.data[cls]) * row_dot(cls);
    }
    return acc;
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

struct GeneratorSpec {
  int image_size = 128;
  int base_channels = 96;  // ch
  int latent_dim = 120;
  int num_classes = 1000;
  int embedding_dim = 128;
  int num_blocks = 5;
  int nonlocal_at = 64;  // resolution at which self-attention is inserted

  int chunk_dim() const { return latent_dim / (num_blocks + 1); }
  int condition_dim() const { return embedding_dim + chunk_dim(); }

  void validate() const {
    if (latent_dim % (num_blocks + 1) != 0) {
      throw ArgumentError("latent_dim must be divisible by num_blocks + 1");
    }
    if ((4 << num_blocks) != image_size) {
      throw ArgumentError("image_size must equal 4 * 2^num_blocks");
    }
    if (num_classes < 1 || base_channels < 1 || embedding_dim < 1) {
      throw ArgumentError("generator spec: dimensions must be positive");
    }
  }
};

inline GeneratorSpec full_scale_generator_spec(int num_classes = 1000) {
  GeneratorSpec s;
  s.num_classes = num_classes;
  return s;
}

// Desk-scale reference: 32x32, 3 up-blocks, ch=16, attention at 16x16,
// latent 16 split into 4 chunks of 4.
inline GeneratorSpec desk_scale_generator_spec(int num_classes = 10) {
  GeneratorSpec s;
  s.image_size = 32;
  s.base_channels = 16;
  s.latent_dim = 16;
  s.num_classes = num_classes;
  s.embedding_dim = 32;
  s.num_blocks = 3;
  s.nonlocal_at = 16;
  return s;
}

struct DiscriminatorSpec {
  int image_size = 128;
  int base_channels = 96;
  int image_channels = 3;
  int num_classes = 1000;
  int num_blocks = 5;  // downsampling blocks; one same-resolution block follows
  int nonlocal_at = 64;
  bool projection = true;    // false removes the projection layer entirely
  bool rotation_head = false;
  bool cotrain_head = false;

  int representation_dim() const { return (1 << (num_blocks - 1)) * base_channels; }

  void validate() const {
    // num_blocks downsamples take image_size to 4
    if ((image_size >> num_blocks) != 4) {
      throw ArgumentError("discriminator: image_size must equal 4 * 2^num_blocks");
    }
    if (num_classes < 1 || base_channels < 1) {
      throw ArgumentError("discriminator spec: dimensions must be positive");
    }
  }
};

inline DiscriminatorSpec full_scale_discriminator_spec(int num_classes = 1000) {
  DiscriminatorSpec s;
  s.num_classes = num_classes;
  return s;
}

inline DiscriminatorSpec desk_scale_discriminator_spec(int num_classes = 10) {
  DiscriminatorSpec s;
  s.image_size = 32;
  s.base_channels = 16;
  s.num_classes = num_classes;
  s.num_blocks = 3;
  s.nonlocal_at = 16;
  return s;
}

namespace detail {

// Channel multipliers: the initial dense output and the first block keep
// 2^(nb-1), then each block halves.
inline std::vector<int> generator_multipliers(int num_blocks) {
  std::vector<int> m;
  m.push_back(1 << (num_blocks - 1));  // dense
  m.push_back(1 << (num_blocks - 1));  // first block output
  for (int i = 2; i <= num_blocks; ++i) m.push_back(1 << (num_blocks - i));
  return m;
}

inline std::vector<int> discriminator_multipliers(int num_blocks) {
  std::vector<int> m;
  for (int i = 1; i <= num_blocks; ++i) m.push_back(1 << (i - 1));
  return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

using NamedShapes = std::vector<std::pair<std::string, Shape>>;

template <typename T>
struct DiscriminatorGraphOutput;  // fwd

template <typename T>
class Generator {
 public:
  explicit Generator(GeneratorSpec spec, std::uint64_t init_seed = 1)
      : spec_(spec) {
    spec_.validate();
    for (const auto& [name, shape] : parameter_shapes(spec_)) {
      store_.create(name, shape);
    }
    const auto mults = detail::generator_multipliers(spec_.num_blocks);
    const int ch = spec_.base_channels;

    embed_.table = store_.find("generator/embed_y/kernel");
    fc_noise_.kernel = store_.find("generator/fc_noise/kernel");
    fc_noise_.bias = store_.find("generator/fc_noise/bias");

    blocks_.resize(static_cast<std::size_t>(spec_.num_blocks));
    for (int i = 1; i <= spec_.num_blocks; ++i) {
      auto& blk = blocks_[static_cast<std::size_t>(i - 1)];
      const std::string p = "generator/B" + std::to_string(i) + "/";
      blk.bn1.gamma_kernel = store_.find(p + "bn1/condition/gamma/kernel");
      blk.bn1.beta_kernel = store_.find(p + "bn1/condition/beta/kernel");
      blk.bn1.init_state(mults[static_cast<std::size_t>(i - 1)] * ch);
      blk.up_conv1.kernel = store_.find(p + "up_conv1/kernel");
      blk.up_conv1.bias = store_.find(p + "up_conv1/bias");
      blk.up_conv1.sn = &sn_state(p + "up_conv1/kernel");
      blk.bn2.gamma_kernel = store_.find(p + "bn2/condition/gamma/kernel");
      blk.bn2.beta_kernel = store_.find(p + "bn2/condition/beta/kernel");
      blk.bn2.init_state(mults[static_cast<std::size_t>(i)] * ch);
      blk.same_conv2.kernel = store_.find(p + "same_conv2/kernel");
      blk.same_conv2.bias = store_.find(p + "same_conv2/bias");
      blk.same_conv2.sn = &sn_state(p + "same_conv2/kernel");
      blk.up_conv_shortcut.kernel = store_.find(p + "up_conv_shortcut/kernel");
      blk.up_conv_shortcut.bias = store_.find(p + "up_conv_shortcut/bias");
      blk.up_conv_shortcut.sn = &sn_state(p + "up_conv_shortcut/kernel");
    }
    attention_after_ = -1;
    for (int i = 1; i <= spec_.num_blocks; ++i) {
      if ((4 << i) == spec_.nonlocal_at) attention_after_ = i;
    }
    if (attention_after_ > 0) {
      const std::string p = "generator/non_local_block/";
      attention_.theta = store_.find(p + "conv2d_theta/kernel");
      attention_.phi = store_.find(p + "conv2d_phi/kernel");
      attention_.g_proj = store_.find(p + "conv2d_g/kernel");
      attention_.sigma = store_.find(p + "sigma");
      attention_.attn_g = store_.find(p + "conv2d_attn_g/kernel");
    }
    final_norm_.gamma = store_.find("generator/final_norm/gamma");
    final_norm_.beta = store_.find("generator/final_norm/beta");
    final_norm_.init_state(ch);
    final_conv_.kernel = store_.find("generator/final_conv/kernel");
    final_conv_.bias = store_.find("generator/final_conv/bias");

    initialize(init_seed);
  }

  static NamedShapes parameter_shapes(const GeneratorSpec& spec) {
    spec.validate();
    NamedShapes out;
    const int ch = spec.base_channels;
    const int cond = spec.condition_dim();
    const auto mults = detail::generator_multipliers(spec.num_blocks);
    out.push_back({"generator/embed_y/kernel", {spec.num_classes, spec.embedding_dim}});
    out.push_back({"generator/fc_noise/kernel", {spec.chunk_dim(), 4 * 4 * mults[0] * ch}});
    out.push_back({"generator/fc_noise/bias", {4 * 4 * mults[0] * ch}});
    for (int i = 1; i <= spec.num_blocks; ++i) {
      const int ci = mults[static_cast<std::size_t>(i - 1)] * ch;
      const int co = mults[static_cast<std::size_t>(i)] * ch;
      const std::string p = "generator/B" + std::to_string(i) + "/";
      out.push_back({p + "bn1/condition/gamma/kernel", {cond, ci}});
      out.push_back({p + "bn1/condition/beta/kernel", {cond, ci}});
      out.push_back({p + "up_conv1/kernel", {3, 3, ci, co}});
      out.push_back({p + "up_conv1/bias", {co}});
      out.push_back({p + "bn2/condition/gamma/kernel", {cond, co}});
      out.push_back({p + "bn2/condition/beta/kernel", {cond, co}});
      out.push_back({p + "same_conv2/kernel", {3, 3, co, co}});
      out.push_back({p + "same_conv2/bias", {co}});
      out.push_back({p + "up_conv_shortcut/kernel", {1, 1, ci, co}});
      out.push_back({p + "up_conv_shortcut/bias", {co}});
      if ((4 << i) == spec.nonlocal_at) {
        const int c = co;
        if (c < 8) throw ArgumentError("generator: attention needs >= 8 channels");
        const std::string q = "generator/non_local_block/";
        out.push_back({q + "conv2d_theta/kernel", {1, 1, c, c / 8}});
        out.push_back({q + "conv2d_phi/kernel", {1, 1, c, c / 8}});
        out.push_back({q + "conv2d_g/kernel", {1, 1, c, c / 2}});
        out.push_back({q + "sigma", {}});
        out.push_back({q + "conv2d_attn_g/kernel", {1, 1, c / 2, c}});
      }
    }
    out.push_back({"generator/final_norm/gamma", {ch}});
    out.push_back({"generator/final_norm/beta", {ch}});
    out.push_back({"generator/final_conv/kernel", {3, 3, ch, 3}});
    out.push_back({"generator/final_conv/bias", {3}});
    return out;
  }

  const GeneratorSpec& spec() const { return spec_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  std::map<std::string, std::unique_ptr<SpectralNormState<T>>>& sn_states() { return sn_states_; }

  // Builds the forward graph; output is [N, S, S, 3] in [-1, 1].
  typename Graph<T>::Val forward(GraphBindings<T>& b, typename Graph<T>::Val z,
                                 const LabelBatch<T>& y, bool training) {
    auto& g = b.graph();
    const Tensor<T>& zv = g.value(z);
    if (zv.rank() != 2 || zv.dim(1) != spec_.latent_dim) {
      throw ArgumentError("generator: z must be [N, latent_dim]");
    }
    if (!zv.all_finite()) throw ArgumentError("generator: z must be finite");
    if (y.kind == LabelBatch<T>::Kind::Absent) {
      throw ArgumentError("generator: a label (hard or soft) is required");
    }
    y.validate(spec_.num_classes);

    const int N = zv.dim(0);
    const int ck = spec_.chunk_dim();
    auto embed = (y.kind == LabelBatch<T>::Kind::Hard)
                     ? embed_.forward_hard(b, y.hard)
                     : embed_.forward_soft(b, g.constant(y.soft));

    auto h = fc_noise_.forward(b, g.cols(z, 0, ck));
    const auto mults = detail::generator_multipliers(spec_.num_blocks);
    h = g.reshape(h, {N, 4, 4, mults[0] * spec_.base_channels});
    for (int i = 1; i <= spec_.num_blocks; ++i) {
      auto cond = g.concat_cols(embed, g.cols(z, i * ck, ck));
      auto& blk = blocks_[static_cast<std::size_t>(i - 1)];
      auto s = blk.up_conv_shortcut.forward(b, g.upsample_nearest2(h));
      auto t = blk.bn1.forward(b, h, cond, training);
      t = g.relu(t);
      t = g.upsample_nearest2(t);
      t = blk.up_conv1.forward(b, t);
      t = blk.bn2.forward(b, t, cond, training);
      t = g.relu(t);
      t = blk.same_conv2.forward(b, t);
      h = g.add(s, t);
      if (i == attention_after_) h = attention_.forward(b, h);
    }
    h = final_norm_.forward(b, h, training);
    h = g.relu(h);
    h = final_conv_.forward(b, h);
    return g.tanh_act(h);
  }

  // Inference-mode convenience: runs a throwaway graph.
  Tensor<T> generate(const Tensor<T>& z, const LabelBatch<T>& y) {
    Graph<T> g;
    GraphBindings<T> b(g, false);
    auto out = forward(b, g.constant(z), y, false);
    return g.value(out);
  }

  // Name -> tensor map of everything needed to restore the model: trainable
  // parameters under their exact names plus batchnorm moving statistics.
  void append_state(std::vector<std::pair<std::string, Tensor<T>*>>& out) {
    for (const auto& p : store_.all()) out.push_back({p->name, &p->value});
    for (int i = 1; i <= spec_.num_blocks; ++i) {
      auto& blk = blocks_[static_cast<std::size_t>(i - 1)];
      const std::string p = "generator/B" + std::to_string(i) + "/";
      out.push_back({p + "bn1/moving_mean", &blk.bn1.moving_mean});
      out.push_back({p + "bn1/moving_var", &blk.bn1.moving_var});
      out.push_back({p + "bn2/moving_mean", &blk.bn2.moving_mean});
      out.push_back({p + "bn2/moving_var", &blk.bn2.moving_var});
    }
    out.push_back({"generator/final_norm/moving_mean", &final_norm_.moving_mean});
    out.push_back({"generator/final_norm/moving_var", &final_norm_.moving_var});
    for (auto& [name, state] : sn_states_) {
      if (state->u.numel() > 0) out.push_back({name + "/sn_u", &state->u});
    }
  }

 private:
  struct GBlock {
    ConditionalBatchNorm<T> bn1, bn2;
    Conv2dLayer<T> up_conv1, same_conv2, up_conv_shortcut;
  };

  SpectralNormState<T>& sn_state(const std::string& name) {
    auto it = sn_states_.find(name);
    if (it == sn_states_.end()) {
      it = sn_states_.emplace(name, std::make_unique<SpectralNormState<T>>()).first;
    }
    return *it->second;
  }

  void initialize(std::uint64_t seed) {
    Rng rng = Rng::derive(seed, fnv1a("generator-init"));
    for (const auto& p : store_.all()) {
      const std::string& n = p->name;
      if (n.find("/condition/") != std::string::npos) {
        continue;  // zero: conditional BN starts as identity scale/shift
      }
      if (n == "generator/final_norm/gamma") {
        std::fill(p->value.data.begin(), p->value.data.end(), T(1));
      } else if (n.find("bias") != std::string::npos || n.find("beta") != std::string::npos ||
                 n.find("sigma") != std::string::npos) {
        continue;  // zeros
      } else {
        init_xavier(p->value, rng);
      }
    }
  }

  GeneratorSpec spec_;
  ParamStore<T> store_;
  EmbeddingLayer<T> embed_;
  DenseLayer<T> fc_noise_;
  std::vector<GBlock> blocks_;
  SelfAttention<T> attention_;
  int attention_after_ = -1;
  BatchNormLayer<T> final_norm_;
  Conv2dLayer<T> final_conv_;
  std::map<std::string, std::unique_ptr<SpectralNormState<T>>> sn_states_;
};

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

struct DiscriminatorHeads {
  bool rotation = false;
  bool cotrain = false;
};

template <typename T>
struct DiscriminatorGraphOutput {
  typename Graph<T>::Val score;           // [N]
  typename Graph<T>::Val representation;  // [N, d] post global-sum-pool
  typename Graph<T>::Val rotation_logits;  // [N, 4] if requested
  typename Graph<T>::Val cotrain_logits;   // [N, K] if requested
};

// Value-level output for single-batch inference uses.
template <typename T>
struct DiscriminatorOutput {
  Tensor<T> score;
  Tensor<T> representation;
  Tensor<T> rotation_logits;  // empty if absent
  Tensor<T> cotrain_logits;   // empty if absent
};

template <typename T>
class Discriminator {
 public:
  explicit Discriminator(DiscriminatorSpec spec, std::uint64_t init_seed = 2)
      : spec_(spec) {
    spec_.validate();
    for (const auto& [name, shape] : parameter_shapes(spec_)) {
      store_.create(name, shape);
    }
    blocks_.resize(static_cast<std::size_t>(spec_.num_blocks));
    for (int i = 1; i <= spec_.num_blocks; ++i) {
      auto& blk = blocks_[static_cast<std::size_t>(i - 1)];
      const std::string p = "discriminator/B" + std::to_string(i) + "/";
      blk.same_conv1.kernel = store_.find(p + "same_conv1/kernel");
      blk.same_conv1.bias = store_.find(p + "same_conv1/bias");
      blk.same_conv1.sn = &sn_state(p + "same_conv1/kernel");
      blk.down_conv2.kernel = store_.find(p + "down_conv2/kernel");
      blk.down_conv2.bias = store_.find(p + "down_conv2/bias");
      blk.down_conv2.sn = &sn_state(p + "down_conv2/kernel");
      blk.down_conv_shortcut.kernel = store_.find(p + "down_conv_shortcut/kernel");
      blk.down_conv_shortcut.bias = store_.find(p + "down_conv_shortcut/bias");
      blk.down_conv_shortcut.sn = &sn_state(p + "down_conv_shortcut/kernel");
    }
    attention_after_ = -1;
    for (int i = 1; i <= spec_.num_blocks; ++i) {
      if ((spec_.image_size >> i) == spec_.nonlocal_at) attention_after_ = i;
    }
    if (attention_after_ > 0) {
      const std::string p = "discriminator/non_local_block/";
      attention_.theta = store_.find(p + "conv2d_theta/kernel");
      attention_.phi = store_.find(p + "conv2d_phi/kernel");
      attention_.g_proj = store_.find(p + "conv2d_g/kernel");
      attention_.sigma = store_.find(p + "sigma");
      attention_.attn_g = store_.find(p + "conv2d_attn_g/kernel");
      attention_.sn_theta = &sn_state(p + "conv2d_theta/kernel");
      attention_.sn_phi = &sn_state(p + "conv2d_phi/kernel");
      attention_.sn_g = &sn_state(p + "conv2d_g/kernel");
      attention_.sn_attn_g = &sn_state(p + "conv2d_attn_g/kernel");
    }
    const std::string f = "discriminator/B" + std::to_string(spec_.num_blocks + 1) + "/";
    final_block_conv1_.kernel = store_.find(f + "same_conv1/kernel");
    final_block_conv1_.bias = store_.find(f + "same_conv1/bias");
    final_block_conv1_.sn = &sn_state(f + "same_conv1/kernel");
    final_block_conv2_.kernel = store_.find(f + "same_conv2/kernel");
    final_block_conv2_.bias = store_.find(f + "same_conv2/bias");
    final_block_conv2_.sn = &sn_state(f + "same_conv2/kernel");
    final_fc_.kernel = store_.find("discriminator/final_fc/kernel");
    final_fc_.bias = store_.find("discriminator/final_fc/bias");
    final_fc_.sn = &sn_state("discriminator/final_fc/kernel");
    if (spec_.projection) {
      projection_.table = store_.find("discriminator_projection/kernel");
      projection_.sn = &sn_state("discriminator_projection/kernel");
    }
    if (spec_.rotation_head) {
      rotation_head_.kernel = store_.find("discriminator/rotation_head/kernel");
      rotation_head_.bias = store_.find("discriminator/rotation_head/bias");
      rotation_head_.sn = &sn_state("discriminator/rotation_head/kernel");
    }
    if (spec_.cotrain_head) {
      cotrain_head_.kernel = store_.find("discriminator/cotrain_head/kernel");
      cotrain_head_.bias = store_.find("discriminator/cotrain_head/bias");
      cotrain_head_.sn = &sn_state("discriminator/cotrain_head/kernel");
    }
    initialize(init_seed);
  }

  static NamedShapes parameter_shapes(const DiscriminatorSpec& spec) {
    spec.validate();
    NamedShapes out;
    const int ch = spec.base_channels;
    const auto mults = detail::discriminator_multipliers(spec.num_blocks);
    int cin = spec.image_channels;
    for (int i = 1; i <= spec.num_blocks; ++i) {
      const int co = mults[static_cast<std::size_t>(i - 1)] * ch;
      const std::string p = "discriminator/B" + std::to_string(i) + "/";
      out.push_back({p + "same_conv1/kernel", {3, 3, cin, co}});
      out.push_back({p + "same_conv1/bias", {co}});
      out.push_back({p + "down_conv2/kernel", {3, 3, co, co}});
      out.push_back({p + "down_conv2/bias", {co}});
      out.push_back({p + "down_conv_shortcut/kernel", {1, 1, cin, co}});
      out.push_back({p + "down_conv_shortcut/bias", {co}});
      if ((spec.image_size >> i) == spec.nonlocal_at) {
        if (co < 8) throw ArgumentError("discriminator: attention needs >= 8 channels");
        const std::string q = "discriminator/non_local_block/";
        out.push_back({q + "conv2d_theta/kernel", {1, 1, co, co / 8}});
        out.push_back({q + "conv2d_phi/kernel", {1, 1, co, co / 8}});
        out.push_back({q + "conv2d_g/kernel", {1, 1, co, co / 2}});
        out.push_back({q + "sigma", {}});
        out.push_back({q + "conv2d_attn_g/kernel", {1, 1, co / 2, co}});
      }
      cin = co;
    }
    const std::string f = "discriminator/B" + std::to_string(spec.num_blocks + 1) + "/";
    out.push_back({f + "same_conv1/kernel", {3, 3, cin, cin}});
    out.push_back({f + "same_conv1/bias", {cin}});
    out.push_back({f + "same_conv2/kernel", {3, 3, cin, cin}});
    out.push_back({f + "same_conv2/bias", {cin}});
    out.push_back({"discriminator/final_fc/kernel", {cin, 1}});
    out.push_back({"discriminator/final_fc/bias", {1}});
    if (spec.projection) {
      out.push_back({"discriminator_projection/kernel", {spec.num_classes, cin}});
    }
    if (spec.rotation_head) {
      out.push_back({"discriminator/rotation_head/kernel", {cin, 4}});
      out.push_back({"discriminator/rotation_head/bias", {4}});
    }
    if (spec.cotrain_head) {
      out.push_back({"discriminator/cotrain_head/kernel", {cin, spec.num_classes}});
      out.push_back({"discriminator/cotrain_head/bias", {spec.num_classes}});
    }
    return out;
  }

  const DiscriminatorSpec& spec() const { return spec_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  std::map<std::string, std::unique_ptr<SpectralNormState<T>>>& sn_states() { return sn_states_; }

  DiscriminatorGraphOutput<T> forward(GraphBindings<T>& b, typename Graph<T>::Val x,
                                      const LabelBatch<T>& y, DiscriminatorHeads heads) {
    auto& g = b.graph();
    const Tensor<T>& xv = g.value(x);
    if (xv.rank() != 4 || xv.dim(3) != spec_.image_channels) {
      throw ArgumentError("discriminator: x must be [N,H,W,C]");
    }
    if (xv.min_value() < T(-1.0001) || xv.max_value() > T(1.0001)) {
      throw ArgumentError("discriminator: inputs must lie in [-1, 1]");
    }
    if (heads.rotation && !spec_.rotation_head) {
      throw StateError("discriminator: rotation head not constructed");
    }
    if (heads.cotrain && !spec_.cotrain_head) {
      throw StateError("discriminator: cotrain head not constructed");
    }
    if (y.kind != LabelBatch<T>::Kind::Absent) y.validate(spec_.num_classes);

    auto h = x;
    for (int i = 1; i <= spec_.num_blocks; ++i) {
      auto& blk = blocks_[static_cast<std::size_t>(i - 1)];
      auto s = g.avg_pool2(blk.down_conv_shortcut.forward(b, h));
      auto t = g.relu(h);
      t = blk.same_conv1.forward(b, t);
      t = g.relu(t);
      t = blk.down_conv2.forward(b, t);
      t = g.avg_pool2(t);
      h = g.add(s, t);
      if (i == attention_after_) h = attention_.forward(b, h);
    }
    {  // final block without shortcut layer (identity skip)
      auto t = g.relu(h);
      t = final_block_conv1_.forward(b, t);
      t = g.relu(t);
      t = final_block_conv2_.forward(b, t);
      h = g.add(h, t);
    }
    h = g.relu(h);
    DiscriminatorGraphOutput<T> out;
    out.representation = g.global_sum_pool(h);
    const int N = g.value(out.representation).dim(0);
    auto score = g.reshape(final_fc_.forward(b, out.representation), {N});
    if (spec_.projection && y.kind != LabelBatch<T>::Kind::Absent) {
      auto w = b.normalized(*projection_.table, *projection_.sn);
      typename Graph<T>::Val rows;
      if (y.kind == LabelBatch<T>::Kind::Hard) {
        rows = g.gather_rows(w, y.hard);
      } else {
        rows = g.matmul(g.constant(y.soft), w);
      }
      score = g.add(score, g.rowwise_dot(out.representation, rows));
    }
    out.score = score;
    if (heads.rotation) {
      out.rotation_logits = rotation_head_.forward(b, out.representation);
    }
    if (heads.cotrain) {
      out.cotrain_logits = cotrain_head_.forward(b, out.representation);
    }
    return out;
  }

  // Score with the projection conditioned on an in-graph soft-label node
  // (used by co-training, where labels come from the cotrain head).
  typename Graph<T>::Val conditioned_score(GraphBindings<T>& b,
                                           const DiscriminatorGraphOutput<T>& out,
                                           typename Graph<T>::Val soft_labels) {
    if (!spec_.projection) throw StateError("discriminator: no projection layer");
    auto& g = b.graph();
    auto w = b.normalized(*projection_.table, *projection_.sn);
    auto rows = g.matmul(soft_labels, w);
    return g.add(out.score, g.rowwise_dot(out.representation, rows));
  }

  // Inference convenience on a throwaway graph.
  DiscriminatorOutput<T> evaluate(const Tensor<T>& x, const LabelBatch<T>& y,
                                  DiscriminatorHeads heads = {}) {
    Graph<T> g;
    GraphBindings<T> b(g, false);
    auto out = forward(b, g.constant(x), y, heads);
    DiscriminatorOutput<T> r;
    r.score = g.value(out.score);
    r.representation = g.value(out.representation);
    if (heads.rotation) r.rotation_logits = g.value(out.rotation_logits);
    if (heads.cotrain) r.cotrain_logits = g.value(out.cotrain_logits);
    return r;
  }

  void append_state(std::vector<std::pair<std::string, Tensor<T>*>>& out) {
    for (const auto& p : store_.all()) out.push_back({p->name, &p->value});
    for (auto& [name, state] : sn_states_) {
      if (state->u.numel() > 0) out.push_back({name + "/sn_u", &state->u});
    }
  }

 private:
  struct DBlock {
    Conv2dLayer<T> same_conv1, down_conv2, down_conv_shortcut;
  };

  SpectralNormState<T>& sn_state(const std::string& name) {
    auto it = sn_states_.find(name);
    if (it == sn_states_.end()) {
      it = sn_states_.emplace(name, std::make_unique<SpectralNormState<T>>()).first;
    }
    return *it->second;
  }

  void initialize(std::uint64_t seed) {
    Rng rng = Rng::derive(seed, fnv1a("discriminator-init"));
    for (const auto& p : store_.all()) {
      const std::string& n = p->name;
      if (n.find("bias") != std::string::npos || n.find("sigma") != std::string::npos) {
        continue;  // zeros
      }
      init_xavier(p->value, rng);
    }
  }

  DiscriminatorSpec spec_;
  ParamStore<T> store_;
  std::vector<DBlock> blocks_;
  SelfAttention<T> attention_;
  int attention_after_ = -1;
  Conv2dLayer<T> final_block_conv1_, final_block_conv2_;
  DenseLayer<T> final_fc_;
  EmbeddingLayer<T> projection_;
  DenseLayer<T> rotation_head_, cotrain_head_;
  std::map<std::string, std::unique_ptr<SpectralNormState<T>>> sn_states_;
};

// Sum of products over a shape table.
inline std::int64_t count_parameters(const NamedShapes& shapes) {
  std::int64_t total = 0;
  for (const auto& [name, shape] : shapes) total += shape_numel(shape);
  return total;
}

}  // namespace fewlabel
