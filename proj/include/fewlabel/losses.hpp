#pragma once

#include <cmath>
#include <vector>

#include "fewlabel/graph.hpp"
#include "fewlabel/tensor.hpp"

namespace fewlabel {

// Weights balancing the auxiliary loss terms: gamma for the semi-supervised
// class term during pretraining, lambda for the co-trained classifier,
// alpha/beta for rotation self-supervision on fake/real images.
struct LossWeights {
  double gamma = 0.0;
  double lambda = 0.0;
  double alpha = 0.0;
  double beta = 0.0;

  void validate() const {
    for (double v : {gamma, lambda, alpha, beta}) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw ArgumentError("loss weights must be finite and nonnegative");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Graph-valued losses (differentiable).
// ---------------------------------------------------------------------------

// mean(max(0, 1 - s_real)) + mean(max(0, 1 + s_fake))
template <typename T>
typename Graph<T>::Val hinge_d_loss(Graph<T>& g, typename Graph<T>::Val real_scores,
                                    typename Graph<T>::Val fake_scores) {
  if (g.value(real_scores).numel() == 0 || g.value(fake_scores).numel() == 0) {
    throw ArgumentError("hinge_d_loss: scores must be nonempty");
  }
  auto real_term = g.mean_all(g.relu(g.affine_const(real_scores, T(-1), T(1))));
  auto fake_term = g.mean_all(g.relu(g.affine_const(fake_scores, T(1), T(1))));
  return g.add(real_term, fake_term);
}

// -mean(s_fake)
template <typename T>
typename Graph<T>::Val hinge_g_loss(Graph<T>& g, typename Graph<T>::Val fake_scores) {
  if (g.value(fake_scores).numel() == 0) {
    throw ArgumentError("hinge_g_loss: scores must be nonempty");
  }
  return g.affine_const(g.mean_all(fake_scores), T(-1), T(0));
}

// Mean cross entropy of the 4-way rotation head over a rotation batch. With
// each image contributing all four rotations this equals the 1/|R| average
// of per-rotation expectations.
template <typename T>
typename Graph<T>::Val rotation_loss(Graph<T>& g, typename Graph<T>::Val rotation_logits,
                                     const std::vector<int>& targets) {
  return g.mean_all(g.cross_entropy_rows(rotation_logits, targets));
}

// Joint self-/semi-supervised pretraining loss: rotation term over the whole
// batch plus gamma times the class cross-entropy over the labeled subset
// (each labeled image contributes its rotated copies as well).
template <typename T>
typename Graph<T>::Val s2l_loss(Graph<T>& g, typename Graph<T>::Val rotation_logits,
                                const std::vector<int>& rotation_targets,
                                typename Graph<T>::Val class_logits,
                                const std::vector<int>& class_labels, double gamma) {
  auto rot = rotation_loss(g, rotation_logits, rotation_targets);
  if (gamma == 0.0) return rot;
  if (class_labels.empty()) {
    throw ArgumentError("s2l_loss: labeled subset empty with gamma > 0");
  }
  auto cls = g.mean_all(g.cross_entropy_rows(class_logits, class_labels));
  return g.add(rot, g.affine_const(cls, static_cast<T>(gamma), T(0)));
}

// Co-training discriminator loss: conditional hinge on labeled reals,
// lambda-weighted cross entropy for the auxiliary classifier on labeled
// reals, hinge on unlabeled reals (scores already conditioned on predicted
// labels), and hinge on fakes. The unlabeled part may be empty.
template <typename T>
typename Graph<T>::Val cotrain_d_loss(Graph<T>& g, typename Graph<T>::Val labeled_real_scores,
                                      typename Graph<T>::Val cotrain_logits,
                                      const std::vector<int>& labels,
                                      typename Graph<T>::Val unlabeled_real_scores,
                                      bool has_unlabeled, typename Graph<T>::Val fake_scores,
                                      double lambda) {
  auto loss = g.mean_all(g.relu(g.affine_const(labeled_real_scores, T(-1), T(1))));
  if (lambda != 0.0) {
    auto ce = g.mean_all(g.cross_entropy_rows(cotrain_logits, labels));
    loss = g.add(loss, g.affine_const(ce, static_cast<T>(lambda), T(0)));
  }
  if (has_unlabeled) {
    loss = g.add(loss, g.mean_all(g.relu(g.affine_const(unlabeled_real_scores, T(-1), T(1)))));
  }
  loss = g.add(loss, g.mean_all(g.relu(g.affine_const(fake_scores, T(1), T(1)))));
  return loss;
}

// beta * rotation loss on rotated real images (discriminator side).
template <typename T>
typename Graph<T>::Val d_selfsup_term(Graph<T>& g, typename Graph<T>::Val rotation_logits,
                                      const std::vector<int>& targets, double beta) {
  return g.affine_const(rotation_loss(g, rotation_logits, targets), static_cast<T>(beta), T(0));
}

// alpha * rotation loss on rotated fake images (generator side; the caller
// ensures discriminator parameters are constants in this term).
template <typename T>
typename Graph<T>::Val g_selfsup_term(Graph<T>& g, typename Graph<T>::Val rotation_logits,
                                      const std::vector<int>& targets, double alpha) {
  return g.affine_const(rotation_loss(g, rotation_logits, targets), static_cast<T>(alpha), T(0));
}

// ---------------------------------------------------------------------------
// Plain-value entry points.
// ---------------------------------------------------------------------------

inline double hinge_d_loss(const std::vector<double>& real, const std::vector<double>& fake) {
  Graph<double> g;
  auto r = g.constant(Tensor<double>({static_cast<int>(real.size())}, real));
  auto f = g.constant(Tensor<double>({static_cast<int>(fake.size())}, fake));
  return g.value(hinge_d_loss(g, r, f)).data[0];
}

inline double hinge_g_loss(const std::vector<double>& fake) {
  Graph<double> g;
  auto f = g.constant(Tensor<double>({static_cast<int>(fake.size())}, fake));
  return g.value(hinge_g_loss(g, f)).data[0];
}

inline double rotation_loss(const Tensor<double>& logits, const std::vector<int>& targets) {
  Graph<double> g;
  return g.value(rotation_loss(g, g.constant(logits), targets)).data[0];
}

inline double s2l_loss(const Tensor<double>& rotation_logits,
                       const std::vector<int>& rotation_targets,
                       const Tensor<double>& class_logits, const std::vector<int>& class_labels,
                       double gamma) {
  Graph<double> g;
  return g
      .value(s2l_loss(g, g.constant(rotation_logits), rotation_targets, g.constant(class_logits),
                      class_labels, gamma))
      .data[0];
}

inline double cotrain_d_loss(const std::vector<double>& labeled_scores,
                             const Tensor<double>& cotrain_logits, const std::vector<int>& labels,
                             const std::vector<double>& unlabeled_scores,
                             const std::vector<double>& fake_scores, double lambda) {
  Graph<double> g;
  auto ls = g.constant(Tensor<double>({static_cast<int>(labeled_scores.size())}, labeled_scores));
  auto cl = g.constant(cotrain_logits);
  auto us = g.constant(
      Tensor<double>({static_cast<int>(unlabeled_scores.size())},
                     unlabeled_scores.empty() ? std::vector<double>{} : unlabeled_scores));
  auto fs = g.constant(Tensor<double>({static_cast<int>(fake_scores.size())}, fake_scores));
  return g.value(cotrain_d_loss(g, ls, cl, labels, us, !unlabeled_scores.empty(), fs, lambda))
      .data[0];
}

inline double d_selfsup_term(const Tensor<double>& logits, const std::vector<int>& targets,
                             double beta) {
  Graph<double> g;
  return g.value(d_selfsup_term(g, g.constant(logits), targets, beta)).data[0];
}

inline double g_selfsup_term(const Tensor<double>& logits, const std::vector<int>& targets,
                             double alpha) {
  Graph<double> g;
  return g.value(g_selfsup_term(g, g.constant(logits), targets, alpha)).data[0];
}

}  // namespace fewlabel
