#pragma once

#include <cmath>
#include <vector>

#include "fewlabel/layers.hpp"

namespace fewlabel {

// Adam with bias correction; epsilon is added outside the square root.
struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(lr >= 0.0) || !(beta1 >= 0.0) || beta1 >= 1.0 || !(beta2 >= 0.0) || beta2 >= 1.0) {
      throw ArgumentError("adam: lr >= 0 and betas in [0,1) required");
    }
  }
};

template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  // Applies one update to every bound parameter using gradients from the
  // graph's last backward pass.
  void step(Graph<T>& g, const std::vector<std::pair<Param<T>*, typename Graph<T>::Val>>& bound) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& [param, val] : bound) {
      const Tensor<T> grad = g.grad(val);
      if (param->adam_m.numel() != param->value.numel()) {
        param->adam_m = Tensor<T>::zeros(param->value.shape);
        param->adam_v = Tensor<T>::zeros(param->value.shape);
      }
      for (std::size_t i = 0; i < param->value.data.size(); ++i) {
        const double gi = static_cast<double>(grad.data[i]);
        const double m = cfg_.beta1 * static_cast<double>(param->adam_m.data[i]) +
                         (1.0 - cfg_.beta1) * gi;
        const double v = cfg_.beta2 * static_cast<double>(param->adam_v.data[i]) +
                         (1.0 - cfg_.beta2) * gi * gi;
        param->adam_m.data[i] = static_cast<T>(m);
        param->adam_v.data[i] = static_cast<T>(v);
        param->value.data[i] -=
            static_cast<T>(cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.epsilon));
      }
    }
  }

  std::int64_t steps_taken() const { return t_; }
  void set_steps_taken(std::int64_t t) { t_ = t; }
  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
};

// Plain SGD with momentum (velocity stored in Param::adam_m).
template <typename T>
class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum = 0.9) : momentum_(momentum) {}

  void step(Graph<T>& g, const std::vector<std::pair<Param<T>*, typename Graph<T>::Val>>& bound,
            double lr) {
    for (const auto& [param, val] : bound) {
      const Tensor<T> grad = g.grad(val);
      if (param->adam_m.numel() != param->value.numel()) {
        param->adam_m = Tensor<T>::zeros(param->value.shape);
      }
      for (std::size_t i = 0; i < param->value.data.size(); ++i) {
        const double v = momentum_ * static_cast<double>(param->adam_m.data[i]) +
                         static_cast<double>(grad.data[i]);
        param->adam_m.data[i] = static_cast<T>(v);
        param->value.data[i] -= static_cast<T>(lr * v);
      }
    }
  }

 private:
  double momentum_;
};

// Learning-rate schedule used for feature-extractor pretraining: linear
// warmup over the first 5/65 of training, then two x0.1 decays at fractions
// 45/65 and 55/65 of the total (the fractions are preserved whatever the
// total epoch count).
inline double pretrain_lr(double base_lr, double progress) {
  const double warmup_end = 5.0 / 65.0;
  double lr = base_lr;
  if (progress < warmup_end) {
    lr *= progress / warmup_end;
  }
  if (progress >= 45.0 / 65.0) lr *= 0.1;
  if (progress >= 55.0 / 65.0) lr *= 0.1;
  return lr;
}

}  // namespace fewlabel
