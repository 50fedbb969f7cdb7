#pragma once

// Shared helpers for the unit suites: finite-difference gradient checking
// and a small self-contained Jacobi eigensolver used as an independent
// oracle for the linear-algebra code under test.

#include <cmath>
#include <functional>
#include <vector>

#include "fewlabel/graph.hpp"
#include "fewlabel/rng.hpp"
#include "fewlabel/tensor.hpp"

namespace testutil {

using fewlabel::Graph;
using fewlabel::Rng;
using fewlabel::Shape;
using fewlabel::Tensor;

using DVal = Graph<double>::Val;

// Builds a scalar loss from leaf nodes bound to `inputs`.
using BuildFn = std::function<DVal(Graph<double>&, const std::vector<DVal>&)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  int checked = 0;
};

inline double eval_loss(const std::vector<Tensor<double>>& inputs, const BuildFn& build) {
  Graph<double> g;
  std::vector<DVal> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(g.leaf(t, false));
  DVal loss = build(g, leaves);
  return g.value(loss).data[0];
}

// Central finite differences against reverse-mode gradients, elementwise.
inline GradCheckResult check_gradients(std::vector<Tensor<double>> inputs, const BuildFn& build,
                                       double h = 1e-5) {
  Graph<double> g;
  std::vector<DVal> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(g.leaf(t, true));
  DVal loss = build(g, leaves);
  g.backward(loss);
  std::vector<Tensor<double>> analytic;
  analytic.reserve(inputs.size());
  for (DVal l : leaves) analytic.push_back(g.grad(l));

  GradCheckResult res;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].data.size(); ++j) {
      const double orig = inputs[i].data[j];
      inputs[i].data[j] = orig + h;
      const double lp = eval_loss(inputs, build);
      inputs[i].data[j] = orig - h;
      const double lm = eval_loss(inputs, build);
      inputs[i].data[j] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = analytic[i].data[j];
      const double denom = std::max({1e-6, std::abs(fd), std::abs(an)});
      res.max_rel_err = std::max(res.max_rel_err, std::abs(fd - an) / denom);
      ++res.checked;
    }
  }
  return res;
}

// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major n x n).
// Returns eigenvalues; if eigvecs is non-null it receives the orthogonal
// matrix V with A = V diag(w) V^T, columns as eigenvectors.
inline std::vector<double> jacobi_eigh(std::vector<double> a, int n,
                                       std::vector<double>* eigvecs = nullptr) {
  std::vector<double> v(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i) * n + i] = 1.0;
  auto at = [&](int r, int c) -> double& { return a[static_cast<std::size_t>(r) * n + c]; };
  auto vt = [&](int r, int c) -> double& { return v[static_cast<std::size_t>(r) * n + c]; };
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += at(p, q) * at(p, q);
    if (off < 1e-26) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        if (std::abs(at(p, q)) < 1e-300) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * at(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = at(k, p), akq = at(k, q);
          at(k, p) = c * akp - s * akq;
          at(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = at(p, k), aqk = at(q, k);
          at(p, k) = c * apk - s * aqk;
          at(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = vt(k, p), vkq = vt(k, q);
          vt(k, p) = c * vkp - s * vkq;
          vt(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) w[i] = at(i, i);
  if (eigvecs) *eigvecs = v;
  return w;
}

// Top singular value of an arbitrary (rows x cols) matrix via the Jacobi
// eigensolver on the Gram matrix. Independent of any power-iteration code.
inline double top_singular_value(const std::vector<double>& m, int rows, int cols) {
  const int n = std::min(rows, cols);
  std::vector<double> gram(static_cast<std::size_t>(n) * n, 0.0);
  if (rows <= cols) {
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < rows; ++j) {
        double s = 0.0;
        for (int k = 0; k < cols; ++k)
          s += m[static_cast<std::size_t>(i) * cols + k] * m[static_cast<std::size_t>(j) * cols + k];
        gram[static_cast<std::size_t>(i) * n + j] = s;
      }
  } else {
    for (int i = 0; i < cols; ++i)
      for (int j = 0; j < cols; ++j) {
        double s = 0.0;
        for (int k = 0; k < rows; ++k)
          s += m[static_cast<std::size_t>(k) * cols + i] * m[static_cast<std::size_t>(k) * cols + j];
        gram[static_cast<std::size_t>(i) * n + j] = s;
      }
  }
  const std::vector<double> w = jacobi_eigh(std::move(gram), n);
  double mx = 0.0;
  for (double x : w) mx = std::max(mx, x);
  return std::sqrt(std::max(0.0, mx));
}

}  // namespace testutil
