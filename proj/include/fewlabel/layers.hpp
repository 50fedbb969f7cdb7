#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fewlabel/graph.hpp"
#include "fewlabel/rng.hpp"
#include "fewlabel/spectral_norm.hpp"
#include "fewlabel/tensor.hpp"

namespace fewlabel {

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> adam_m, adam_v;  // sized on first optimizer use
};

// Named trainable parameters of one model, in creation order (which fixes
// checkpoint layout and initialization streams).
template <typename T>
class ParamStore {
 public:
  Param<T>& create(const std::string& name, Shape shape) {
    if (by_name_.count(name)) throw ArgumentError("duplicate parameter: " + name);
    auto p = std::make_unique<Param<T>>();
    p->name = name;
    p->value = Tensor<T>(std::move(shape));
    Param<T>* raw = p.get();
    by_name_[name] = raw;
    params_.push_back(std::move(p));
    return *raw;
  }

  Param<T>* find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }

  const std::vector<std::unique_ptr<Param<T>>>& all() const { return params_; }

  std::int64_t trainable_parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p->value.numel();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Param<T>>> params_;
  std::map<std::string, Param<T>*> by_name_;
};

// One forward pass binds parameters to graph leaves exactly once; the
// trainer walks `bound` after backward to apply updates.
template <typename T>
class GraphBindings {
 public:
  GraphBindings(Graph<T>& g, bool trainable) : g_(g), trainable_(trainable) {}

  typename Graph<T>::Val use(Param<T>& p) {
    auto it = cache_.find(&p);
    if (it != cache_.end()) return it->second;
    auto v = g_.leaf(p.value, trainable_);
    cache_.emplace(&p, v);
    bound.push_back({&p, v});
    return v;
  }

  // Pre-binds a parameter to an existing node (used by tests to substitute
  // values for a specific parameter).
  void bind(Param<T>& p, typename Graph<T>::Val v) { cache_.emplace(&p, v); }

  // Spectrally normalized view of a parameter, computed at most once per
  // graph (so each weight's power-iteration state advances once per pass).
  typename Graph<T>::Val normalized(Param<T>& p, SpectralNormState<T>& state) {
    auto it = sn_cache_.find(&state);
    if (it != sn_cache_.end()) return it->second;
    auto v = spectral_normalize(g_, use(p), state);
    sn_cache_.emplace(&state, v);
    return v;
  }

  Graph<T>& graph() { return g_; }
  bool trainable() const { return trainable_; }

  std::vector<std::pair<Param<T>*, typename Graph<T>::Val>> bound;

 private:
  Graph<T>& g_;
  bool trainable_;
  std::map<Param<T>*, typename Graph<T>::Val> cache_;
  std::map<SpectralNormState<T>*, typename Graph<T>::Val> sn_cache_;
};

// ---------------------------------------------------------------------------
// Initialization: Xavier-normal kernels, zero biases, zero condition maps.
// ---------------------------------------------------------------------------

template <typename T>
void init_xavier(Tensor<T>& w, Rng& rng) {
  std::int64_t fan_in = 1, fan_out = 1;
  if (w.rank() == 2) {
    fan_in = w.dim(0);
    fan_out = w.dim(1);
  } else if (w.rank() == 4) {
    fan_in = static_cast<std::int64_t>(w.dim(0)) * w.dim(1) * w.dim(2);
    fan_out = static_cast<std::int64_t>(w.dim(0)) * w.dim(1) * w.dim(3);
  } else {
    fan_in = fan_out = std::max<std::int64_t>(1, w.numel());
  }
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  for (auto& x : w.data) x = static_cast<T>(rng.normal() * std);
}

// ---------------------------------------------------------------------------
// Layers. Each holds pointers into a ParamStore plus any non-trainable state
// and provides forward(bindings, ...).
// ---------------------------------------------------------------------------

template <typename T>
struct DenseLayer {
  Param<T>* kernel = nullptr;  // (in, out)
  Param<T>* bias = nullptr;    // optional
  SpectralNormState<T>* sn = nullptr;

  typename Graph<T>::Val forward(GraphBindings<T>& b, typename Graph<T>::Val x) const {
    auto& g = b.graph();
    auto w = sn ? b.normalized(*kernel, *sn) : b.use(*kernel);
    auto y = g.matmul(x, w);
    if (bias) y = g.bias_channel(y, b.use(*bias));
    return y;
  }
};

template <typename T>
struct Conv2dLayer {
  Param<T>* kernel = nullptr;  // (kh, kw, ci, co)
  Param<T>* bias = nullptr;
  SpectralNormState<T>* sn = nullptr;

  typename Graph<T>::Val forward(GraphBindings<T>& b, typename Graph<T>::Val x) const {
    auto& g = b.graph();
    auto w = sn ? b.normalized(*kernel, *sn) : b.use(*kernel);
    const int pad = (g.value(w).dim(0) - 1) / 2;
    auto y = g.conv2d(x, w, pad);
    if (bias) y = g.bias_channel(y, b.use(*bias));
    return y;
  }
};

template <typename T>
struct EmbeddingLayer {
  Param<T>* table = nullptr;  // (K, dim)
  SpectralNormState<T>* sn = nullptr;

  typename Graph<T>::Val forward_hard(GraphBindings<T>& b, const std::vector<int>& idx) const {
    auto& g = b.graph();
    auto w = sn ? b.normalized(*table, *sn) : b.use(*table);
    return g.gather_rows(w, idx);
  }
  // soft: [N, K] nonnegative rows summing to 1 -> expected embeddings
  typename Graph<T>::Val forward_soft(GraphBindings<T>& b, typename Graph<T>::Val soft) const {
    auto& g = b.graph();
    auto w = sn ? b.normalized(*table, *sn) : b.use(*table);
    return g.matmul(soft, w);
  }
};

constexpr double kBatchNormEpsilon = 1e-4;
constexpr double kBatchNormMomentum = 0.999;

// Class-conditional batch normalization: per-channel normalization followed
// by a per-sample affine whose gamma = 1 + cond @ Wg and beta = cond @ Wb.
template <typename T>
struct ConditionalBatchNorm {
  Param<T>* gamma_kernel = nullptr;  // (cond_dim, C)
  Param<T>* beta_kernel = nullptr;   // (cond_dim, C)
  Tensor<T> moving_mean;             // [C]
  Tensor<T> moving_var;              // [C]

  void init_state(int channels) {
    moving_mean = Tensor<T>::zeros({channels});
    moving_var = Tensor<T>::full({channels}, T(1));
  }

  typename Graph<T>::Val forward(GraphBindings<T>& b, typename Graph<T>::Val h,
                                 typename Graph<T>::Val cond, bool training) {
    auto& g = b.graph();
    typename Graph<T>::Val normalized;
    if (training) {
      if (g.value(h).dim(0) < 2) {
        throw StateError("conditional batchnorm: training mode needs batch size >= 2");
      }
      std::vector<T> mean, var;
      normalized = g.batchnorm_train(h, static_cast<T>(kBatchNormEpsilon), &mean, &var);
      for (int c = 0; c < moving_mean.dim(0); ++c) {
        moving_mean.data[c] = static_cast<T>(kBatchNormMomentum * moving_mean.data[c] +
                                             (1.0 - kBatchNormMomentum) * mean[c]);
        moving_var.data[c] = static_cast<T>(kBatchNormMomentum * moving_var.data[c] +
                                            (1.0 - kBatchNormMomentum) * var[c]);
      }
    } else {
      normalized = g.batchnorm_inference(h, moving_mean.data, moving_var.data,
                                         static_cast<T>(kBatchNormEpsilon));
    }
    auto gamma = g.affine_const(g.matmul(cond, b.use(*gamma_kernel)), T(1), T(1));
    auto beta = g.matmul(cond, b.use(*beta_kernel));
    return g.sample_channel_affine(normalized, gamma, beta);
  }
};

// Plain batch normalization with learned per-channel gamma/beta.
template <typename T>
struct BatchNormLayer {
  Param<T>* gamma = nullptr;
  Param<T>* beta = nullptr;
  Tensor<T> moving_mean;
  Tensor<T> moving_var;

  void init_state(int channels) {
    moving_mean = Tensor<T>::zeros({channels});
    moving_var = Tensor<T>::full({channels}, T(1));
  }

  typename Graph<T>::Val forward(GraphBindings<T>& b, typename Graph<T>::Val h, bool training) {
    auto& g = b.graph();
    typename Graph<T>::Val normalized;
    if (training) {
      if (g.value(h).dim(0) < 2) {
        throw StateError("batchnorm: training mode needs batch size >= 2");
      }
      std::vector<T> mean, var;
      normalized = g.batchnorm_train(h, static_cast<T>(kBatchNormEpsilon), &mean, &var);
      for (int c = 0; c < moving_mean.dim(0); ++c) {
        moving_mean.data[c] = static_cast<T>(kBatchNormMomentum * moving_mean.data[c] +
                                             (1.0 - kBatchNormMomentum) * mean[c]);
        moving_var.data[c] = static_cast<T>(kBatchNormMomentum * moving_var.data[c] +
                                            (1.0 - kBatchNormMomentum) * var[c]);
      }
    } else {
      normalized = g.batchnorm_inference(h, moving_mean.data, moving_var.data,
                                         static_cast<T>(kBatchNormEpsilon));
    }
    return g.channel_affine(normalized, b.use(*gamma), b.use(*beta));
  }
};

// Self-attention over spatial positions with channel reductions theta/phi at
// C/8 and g at C/2 and 2x2 max pooling on the phi/g paths; the output is
// x + sigma * attention, sigma a learned scalar starting at 0.
template <typename T>
struct SelfAttention {
  Param<T>* theta = nullptr;   // (1,1,C,C/8)
  Param<T>* phi = nullptr;     // (1,1,C,C/8)
  Param<T>* g_proj = nullptr;  // (1,1,C,C/2)
  Param<T>* sigma = nullptr;   // ()
  Param<T>* attn_g = nullptr;  // (1,1,C/2,C)
  SpectralNormState<T>* sn_theta = nullptr;
  SpectralNormState<T>* sn_phi = nullptr;
  SpectralNormState<T>* sn_g = nullptr;
  SpectralNormState<T>* sn_attn_g = nullptr;

  typename Graph<T>::Val forward(GraphBindings<T>& b, typename Graph<T>::Val x) const {
    auto& g = b.graph();
    const auto& xs = g.value(x).shape;
    const int N = xs[0], H = xs[1], W = xs[2], C = xs[3];
    const int c8 = C / 8, c2 = C / 2;
    auto conv1x1 = [&](typename Graph<T>::Val in, Param<T>* k, SpectralNormState<T>* sn) {
      auto w = sn ? b.normalized(*k, *sn) : b.use(*k);
      return g.conv2d(in, w, 0);
    };
    auto th = g.reshape(conv1x1(x, theta, sn_theta), {N, H * W, c8});
    auto ph = g.reshape(g.max_pool2(conv1x1(x, phi, sn_phi)), {N, H * W / 4, c8});
    auto gg = g.reshape(g.max_pool2(conv1x1(x, g_proj, sn_g)), {N, H * W / 4, c2});
    auto attn = g.softmax_rows(g.bmm(th, ph, false, true));  // [N, HW, HW/4]
    auto o = g.reshape(g.bmm(attn, gg), {N, H, W, c2});
    auto out = conv1x1(o, attn_g, sn_attn_g);
    return g.add(x, g.mul_by_scalar(out, b.use(*sigma)));
  }
};

}  // namespace fewlabel
