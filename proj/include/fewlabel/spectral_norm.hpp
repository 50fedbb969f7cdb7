#pragma once

#include <cmath>
#include <string>

#include "fewlabel/graph.hpp"
#include "fewlabel/rng.hpp"
#include "fewlabel/tensor.hpp"

namespace fewlabel {

// Persistent power-iteration state for one spectrally normalized weight.
// u always has unit norm after an update.
template <typename T>
struct SpectralNormState {
  Tensor<T> u;  // [rows] of the 2-D view
  int num_iterations_per_step = 1;
};

namespace detail {

// 2-D view used for normalization: convolutions as (out_channels, rest),
// matrices as-is.
template <typename T>
Tensor<T> sn_matrix_view(const Tensor<T>& w) {
  if (w.rank() == 2) return w;
  if (w.rank() == 4) {
    const int rows = w.dim(3);
    const int cols = static_cast<int>(w.numel() / rows);
    Tensor<T> out(Shape{rows, cols});
    for (int c = 0; c < cols; ++c)
      for (int r = 0; r < rows; ++r)
        out.data[static_cast<std::size_t>(r) * cols + c] =
            w.data[static_cast<std::size_t>(c) * rows + r];
    return out;
  }
  throw ArgumentError("spectral_normalize: expected rank-2 or rank-4 weight");
}

template <typename T>
double vec_norm(const std::vector<T>& v) {
  double s = 0.0;
  for (T x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

}  // namespace detail

// Runs state.num_iterations_per_step power iterations on the 2-D view of
// `weight`, updating state.u in place, and returns the estimated top
// singular value together with the matching right vector v. Returns 0 for a
// zero weight (u untouched).
template <typename T>
double spectral_norm_update(const Tensor<T>& weight, SpectralNormState<T>& state,
                            std::vector<T>* right_vector = nullptr) {
  const Tensor<T> w2d = detail::sn_matrix_view(weight);
  const int rows = w2d.dim(0), cols = w2d.dim(1);
  if (detail::vec_norm(w2d.data) == 0.0) return 0.0;
  if (state.u.numel() != rows) {
    Rng rng = Rng::derive(0x57ec7a1ull, static_cast<std::uint64_t>(rows),
                          static_cast<std::uint64_t>(cols));
    state.u = Tensor<T>::randn({rows}, rng);
    const double n = detail::vec_norm(state.u.data);
    for (auto& x : state.u.data) x = static_cast<T>(x / n);
  }
  auto left_apply = [&](std::vector<T>& v) {  // v = normalize(W^T u)
    for (int c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (int r = 0; r < rows; ++r)
        acc += static_cast<double>(w2d.data[static_cast<std::size_t>(r) * cols + c]) *
               static_cast<double>(state.u.data[r]);
      v[c] = static_cast<T>(acc);
    }
    const double nv = detail::vec_norm(v);
    if (nv < 1e-300) return false;
    for (auto& x : v) x = static_cast<T>(x / nv);
    return true;
  };
  std::vector<T> v(static_cast<std::size_t>(cols));
  if (!left_apply(v)) return 0.0;
  for (int it = 0; it < state.num_iterations_per_step; ++it) {
    if (it > 0 && !left_apply(v)) return 0.0;
    // u = normalize(W v)
    for (int r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (int c = 0; c < cols; ++c)
        acc += static_cast<double>(w2d.data[static_cast<std::size_t>(r) * cols + c]) *
               static_cast<double>(v[c]);
      state.u.data[r] = static_cast<T>(acc);
    }
    const double nu = detail::vec_norm(state.u.data);
    if (nu < 1e-300) return 0.0;
    for (auto& x : state.u.data) x = static_cast<T>(x / nu);
  }
  // sigma = u^T W v
  double sigma = 0.0;
  for (int r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int c = 0; c < cols; ++c)
      acc += static_cast<double>(w2d.data[static_cast<std::size_t>(r) * cols + c]) *
             static_cast<double>(v[c]);
    sigma += static_cast<double>(state.u.data[r]) * acc;
  }
  if (right_vector) *right_vector = v;
  return sigma;
}

// weight / sigma_hat with sigma_hat from power iteration; state.u updated in
// place. A zero weight is returned unchanged with a warning (sigma
// undefined).
template <typename T>
Tensor<T> spectral_normalize(const Tensor<T>& weight, SpectralNormState<T>& state) {
  const double sigma = spectral_norm_update(weight, state);
  if (sigma == 0.0) {
    emit_warning("spectral_normalize: zero weight matrix, returned unchanged");
    return weight;
  }
  Tensor<T> out = weight;
  for (auto& x : out.data) x = static_cast<T>(x / sigma);
  return out;
}

// Graph version: the power-iteration vectors are constants, but sigma_hat =
// u^T W v is built from the weight node so gradients flow through the
// normalization. u is advanced only when the weight is being trained
// (requires grad); frozen/inference passes normalize with the stored u,
// keeping them pure.
template <typename T>
typename Graph<T>::Val spectral_normalize(Graph<T>& g, typename Graph<T>::Val weight,
                                          SpectralNormState<T>& state) {
  std::vector<T> v;
  double sigma;
  std::vector<T> u_used;
  if (g.requires_grad(weight)) {
    sigma = spectral_norm_update(g.value(weight), state, &v);
    u_used = state.u.data;
  } else {
    SpectralNormState<T> frozen = state;
    frozen.num_iterations_per_step = 0;  // frozen passes never advance u
    sigma = spectral_norm_update(g.value(weight), frozen, &v);
    u_used = frozen.u.data;
  }
  if (sigma == 0.0) {
    emit_warning("spectral_normalize: zero weight matrix, returned unchanged");
    return weight;
  }
  const int rows = static_cast<int>(u_used.size());
  auto w2d = g.value(weight).rank() == 4 ? g.conv_kernel_as_matrix(weight) : weight;
  auto u_row = g.constant(Tensor<T>(Shape{1, rows}, u_used));
  auto v_col = g.constant(Tensor<T>(Shape{static_cast<int>(v.size()), 1}, v));
  auto sigma_node = g.reshape(g.matmul(u_row, g.matmul(w2d, v_col)), Shape{});
  return g.div_by_scalar(weight, sigma_node);
}

}  // namespace fewlabel
