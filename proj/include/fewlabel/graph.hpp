#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "fewlabel/tensor.hpp"

namespace fewlabel {

// ---------------------------------------------------------------------------
// Reverse-mode autodiff over Tensor<T>. A Graph is a tape of nodes built by
// one forward pass; backward(loss) walks it in reverse creation order. Graphs
// are cheap, short-lived objects: build, backward, read grads, discard.
// ---------------------------------------------------------------------------

template <typename T>
class Graph {
 public:
  struct Val {
    int i = -1;
    bool valid() const { return i >= 0; }
  };

  using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapM = Eigen::Map<MatRM>;
  using MapCM = Eigen::Map<const MatRM>;

  // ----- leaves -----

  Val constant(Tensor<T> v) { return push(std::move(v), false); }

  Val leaf(Tensor<T> v, bool requires_grad) { return push(std::move(v), requires_grad); }

  const Tensor<T>& value(Val v) const { return nodes_[v.i].value; }
  Tensor<T>& mutable_value(Val v) { return nodes_[v.i].value; }

  // Gradient of the last backward() w.r.t. node v (zeros if untouched).
  Tensor<T> grad(Val v) const {
    const Node& n = nodes_[v.i];
    if (n.grad_written) return n.grad;
    return Tensor<T>::zeros(n.value.shape);
  }

  std::size_t size() const { return nodes_.size(); }

  bool requires_grad(Val v) const { return nodes_[v.i].requires_grad; }

  // ----- elementwise / shape -----

  Val reshape(Val x, Shape s) {
    Tensor<T> out = value(x).reshaped(std::move(s));
    Val y = push(std::move(out), needs_grad(x));
    add_back(y, [this, x, y] {
      if (auto* gx = want(x)) accumulate_from(*gx, node(y).grad.data);
    });
    return y;
  }

  Val add(Val a, Val b) {
    check_same_shape(a, b, "add");
    Tensor<T> out = value(a);
    const auto& bv = value(b).data;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv[i];
    Val y = push(std::move(out), needs_grad(a) || needs_grad(b));
    add_back(y, [this, a, b, y] {
      const auto& gy = node(y).grad.data;
      if (auto* ga = want(a)) accumulate_from(*ga, gy);
      if (auto* gb = want(b)) accumulate_from(*gb, gy);
    });
    return y;
  }

  Val sub(Val a, Val b) {
    check_same_shape(a, b, "sub");
    Tensor<T> out = value(a);
    const auto& bv = value(b).data;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv[i];
    Val y = push(std::move(out), needs_grad(a) || needs_grad(b));
    add_back(y, [this, a, b, y] {
      const auto& gy = node(y).grad.data;
      if (auto* ga = want(a)) accumulate_from(*ga, gy);
      if (auto* gb = want(b)) {
        for (std::size_t i = 0; i < gy.size(); ++i) gb->data[i] -= gy[i];
      }
    });
    return y;
  }

  // y = scale * x + shift (constants).
  Val affine_const(Val x, T scale, T shift) {
    Tensor<T> out = value(x);
    for (auto& v : out.data) v = scale * v + shift;
    Val y = push(std::move(out), needs_grad(x));
    add_back(y, [this, x, y, scale] {
      if (auto* gx = want(x)) {
        const auto& gy = node(y).grad.data;
        for (std::size_t i = 0; i < gy.size(); ++i) gx->data[i] += scale * gy[i];
      }
    });
    return y;
  }

  Val hadamard(Val a, Val b) {
    check_same_shape(a, b, "hadamard");
    Tensor<T> out = value(a);
    const auto& bv = value(b).data;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv[i];
    Val y = push(std::move(out), needs_grad(a) || needs_grad(b));
    add_back(y, [this, a, b, y] {
      const auto& gy = node(y).grad.data;
      if (auto* ga = want(a)) {
        const auto& bv = value(b).data;
        for (std::size_t i = 0; i < gy.size(); ++i) ga->data[i] += gy[i] * bv[i];
      }
      if (auto* gb = want(b)) {
        const auto& av = value(a).data;
        for (std::size_t i = 0; i < gy.size(); ++i) gb->data[i] += gy[i] * av[i];
      }
    });
    return y;
  }

  // y = x * s, s a rank-0 node.
  Val mul_by_scalar(Val x, Val s) {
    const T sv = value(s).data[0];
    Tensor<T> out = value(x);
    for (auto& v : out.data) v *= sv;
    Val y = push(std::move(out), needs_grad(x) || needs_grad(s));
    add_back(y, [this, x, s, y, sv] {
      const auto& gy = node(y).grad.data;
      if (auto* gx = want(x)) {
        for (std::size_t i = 0; i < gy.size(); ++i) gx->data[i] += sv * gy[i];
      }
      if (auto* gs = want(s)) {
        const auto& xv = value(x).data;
        double acc = 0.0;
        for (std::size_t i = 0; i < gy.size(); ++i) {
          acc += static_cast<double>(gy[i]) * static_cast<double>(xv[i]);
        }
        gs->data[0] += static_cast<T>(acc);
      }
    });
    return y;
  }

  // y = x / s, s a rank-0 node.
  Val div_by_scalar(Val x, Val s) {
    const T sv = value(s).data[0];
    Tensor<T> out = value(x);
    for (auto& v : out.data) v /= sv;
    Val y = push(std::move(out), needs_grad(x) || needs_grad(s));
    add_back(y, [this, x, s, y, sv] {
      const auto& gy = node(y).grad.data;
      if (auto* gx = want(x)) {
        for (std::size_t i = 0; i < gy.size(); ++i) gx->data[i] += gy[i] / sv;
      }
      if (auto* gs = want(s)) {
        const auto& xv = value(x).data;
        double acc = 0.0;
        for (std::size_t i = 0; i < gy.size(); ++i) {
          acc += static_cast<double>(gy[i]) * static_cast<double>(xv[i]);
        }
        gs->data[0] -= static_cast<T>(acc / (static_cast<double>(sv) * static_cast<double>(sv)));
      }
    });
    return y;
  }

  Val relu(Val x) {
    Tensor<T> out = value(x);
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    Val y = push(std::move(out), needs_grad(x));
    add_back(y, [this, x, y] {
      if (auto* gx = want(x)) {
        const auto& gy = node(y).grad.data;
        const auto& xv = value(x).data;
        for (std::size_t i = 0; i < gy.size(); ++i) {
          if (xv[i] > T(0)) gx->data[i] += gy[i];
        }
      }
    });
    return y;
  }

  Val tanh_act(Val x) {
    Tensor<T> out = value(x);
    for (auto& v : out.data) v = std::tanh(v);
    Val y = push(std::move(out), needs_grad(x));
    add_back(y, [this, x, y] {
      if (auto* gx = want(x)) {
        const auto& gy = node(y).grad.data;
        const auto& yv = node(y).value.data;
        for (std::size_t i = 0; i < gy.size(); ++i) {
          gx->data[i] += gy[i] * (T(1) - yv[i] * yv[i]);
        }
      }
    });
    return y;
  }

  Val stop_grad(Val x) { return push(value(x), false); }

  // ----- slicing / joining -----

  // Slice [start, start+count) along axis 0.
  Val rows(Val x, int start, int count) {
    const Tensor<T>& xv = value(x);
    const std::int64_t stride = xv.numel() / xv.dim(0);
    Shape s = xv.shape;
    s[0] = count;
    Tensor<T> out(std::move(s));
    std::copy(xv.data.begin() + start * stride, xv.data.begin() + (start + count) * stride,
              out.data.begin());
    Val y = push(std::move(out), needs_grad(x));
    add_back(y, [this, x, y, start, stride] {
      if (auto* gx = want(x)) {
        const auto& gy = node(y).grad.data;
        for (std::size_t i = 0; i < gy.size(); ++i) {
          gx->data[static_cast<std::size_t>(start * stride) + i] += gy[i];
        }
      }
    });
    return y;
  }

  // Slice columns of a rank-2 tensor.
  Val cols(Val x, int start, int count) {
    const Tensor<T>& xv = value(x);
    const int n = xv.dim(0), d = xv.dim(1);
    Tensor<T> out(Shape{n, count});
    for (int r = 0; r < n; ++r) {
      std::copy(xv.data.begin() + r * d + start, xv.data.begin() + r * d + start + count,
                out.data.begin() + r * count);
    }
    Val y = push(std::move(out), needs_grad(x));
    add_back(y, [this, x, y, start, d, count, n] {
      if (auto* gx = want(x)) {
        const auto& gy = node(y).grad.data;
        for (int r = 0; r < n; ++r) {
          for (int c = 0; c < count; ++c) {
            gx->data[static_cast<std::size_t>(r) * d + start + c] +=
                gy[static_cast<std::size_t>(r) * count + c];
          }
        }
      }
    });
    return y;
  }

  // Concatenate along axis 0; trailing dims must agree.
  Val concat_rows(const std::vector<Val>& parts) {
    if (parts.empty()) throw ArgumentError("concat_rows: empty");
    Shape s = value(parts[0]).shape;
    std::int64_t stride = value(parts[0]).numel() / s[0];
    int total = 0;
    for (Val p : parts) total += value(p).dim(0);
    s[0] = total;
    Tensor<T> out(std::move(s));
    std::int64_t off = 0;
    bool rg = false;
    for (Val p : parts) {
      const auto& pv = value(p).data;
      std::copy(pv.begin(), pv.end(), out.data.begin() + off);
      off += static_cast<std::int64_t>(pv.size());
      rg = rg || needs_grad(p);
    }
    Val y = push(std::move(out), rg);
    add_back(y, [this, parts, y, stride] {
      const auto& gy = node(y).grad.data;
      std::int64_t off = 0;
      for (Val p : parts) {
        const std::int64_t n = value(p).numel();
        if (auto* gp = want(p)) {
          for (std::int64_t i = 0; i < n; ++i) gp->data[i] += gy[off + i];
        }
        off += n;
      }
      (void)stride;
    });
    return y;
  }

  // Concatenate two rank-2 tensors along axis 1.
  Val concat_cols(Val a, Val b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    const int n = av.dim(0), da = av.dim(1), db = bv.dim(1);
    Tensor<T> out(Shape{n, da + db});
    for (int r = 0; r < n; ++r) {
      std::copy(av.data.begin() + r * da, av.data.begin() + (r + 1) * da,
                out.data.begin() + r * (da + db));
      std::copy(bv.data.begin() + r * db, bv.data.begin() + (r + 1) * db,
                out.data.begin() + r * (da + db) + da);
    }
    Val y = push(std::move(out), needs_grad(a) || needs_grad(b));
    add_back(y, [this, a, b, y, n, da, db] {
      const auto& gy = node(y).grad.data;
      if (auto* ga = want(a)) {
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < da; ++c)
            ga->data[static_cast<std::size_t>(r) * da + c] +=
                gy[static_cast<std::size_t>(r) * (da + db) + c];
      }
      if (auto* gb = want(b)) {
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < db; ++c)
            gb->data[static_cast<std::size_t>(r) * db + c] +=
                gy[static_cast<std::size_t>(r) * (da + db) + da + c];
      }
    });
    return y;
  }

  // ----- linear algebra -----

  // C = op(A) * op(B) with optional transposes; A, B rank 2.
  Val matmul(Val a, Val b, bool trans_a = false, bool trans_b = false) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    const int m = trans_a ? av.dim(1) : av.dim(0);
    const int k = trans_a ? av.dim(0) : av.dim(1);
    const int kb = trans_b ? bv.dim(1) : bv.dim(0);
    const int n = trans_b ? bv.dim(0) : bv.dim(1);
    if (k != kb) {
      throw ArgumentError("matmul: inner dims " + shape_str(av.shape) + " x " +
                          shape_str(bv.shape));
    }
    Tensor<T> out(Shape{m, n});
    gemm(av, trans_a, bv, trans_b, out);
    Val y = push(std::move(out), needs_grad(a) || needs_grad(b));
    add_back(y, [this, a, b, y, trans_a, trans_b] {
      const Tensor<T>& gy = node(y).grad;
      if (auto* ga = want(a)) {
        // dA = dC * B^T   (or transposed variants)
        Tensor<T> da(value(a).shape);
        if (!trans_a) {
          gemm(gy, false, value(b), !trans_b, da);
        } else {
          // A^T used: dA = (op(B) * dC^T)
          gemm(value(b), trans_b, gy, true, da);
        }
        accumulate_from(*ga, da.data);
      }
      if (auto* gb = want(b)) {
        Tensor<T> db(value(b).shape);
        if (!trans_b) {
          gemm(value(a), !trans_a, gy, false, db);
        } else {
          gemm(gy, true, value(a), trans_a, db);
        }
        accumulate_from(*gb, db.data);
      }
    });
    return y;
  }

  // Batched matmul: a [N,p,q], b [N,q,r] -> [N,p,r], with optional transposes
  // of the per-batch matrices.
  Val bmm(Val a, Val b, bool trans_a = false, bool trans_b = false) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    const int nb = av.dim(0);
    const int ar = av.dim(1), ac = av.dim(2);
    const int br = bv.dim(1), bc = bv.dim(2);
    const int m = trans_a ? ac : ar;
    const int k = trans_a ? ar : ac;
    const int kb = trans_b ? bc : br;
    const int n = trans_b ? br : bc;
    if (k != kb || nb != bv.dim(0)) throw ArgumentError("bmm: shape mismatch");
    Tensor<T> out(Shape{nb, m, n});
    for (int i = 0; i < nb; ++i) {
      MapCM A(av.data.data() + static_cast<std::size_t>(i) * ar * ac, ar, ac);
      MapCM B(bv.data.data() + static_cast<std::size_t>(i) * br * bc, br, bc);
      MapM C(out.data.data() + static_cast<std::size_t>(i) * m * n, m, n);
      if (!trans_a && !trans_b) C.noalias() = A * B;
      else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
      else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
      else C.noalias() = A.transpose() * B.transpose();
    }
    Val y = push(std::move(out), needs_grad(a) || needs_grad(b));
    add_back(y, [this, a, b, y, trans_a, trans_b, nb, ar, ac, br, bc, m, n] {
      const Tensor<T>& gy = node(y).grad;
      auto* ga = want(a);
      auto* gb = want(b);
      for (int i = 0; i < nb; ++i) {
        MapCM A(value(a).data.data() + static_cast<std::size_t>(i) * ar * ac, ar, ac);
        MapCM B(value(b).data.data() + static_cast<std::size_t>(i) * br * bc, br, bc);
        MapCM G(gy.data.data() + static_cast<std::size_t>(i) * m * n, m, n);
        if (ga) {
          MapM dA(ga->data.data() + static_cast<std::size_t>(i) * ar * ac, ar, ac);
          if (!trans_a && !trans_b) dA.noalias() += G * B.transpose();
          else if (!trans_a && trans_b) dA.noalias() += G * B;
          else if (trans_a && !trans_b) dA.noalias() += B * G.transpose();
          else dA.noalias() += B.transpose() * G.transpose();
        }
        if (gb) {
          MapM dB(gb->data.data() + static_cast<std::size_t>(i) * br * bc, br, bc);
          if (!trans_a && !trans_b) dB.noalias() += A.transpose() * G;
          else if (trans_a && !trans_b) dB.noalias() += A * G;
          else if (!trans_a && trans_b) dB.noalias() += G.transpose() * A;
          else dB.noalias() += G.transpose() * A.transpose();
        }
      }
    });
    return y;
  }

  // Rows of W selected by integer indices: out[n] = W[idx[n]].
  Val gather_rows(Val w, std::vector<int> idx) {
    const Tensor<T>& wv = value(w);
    const int d = wv.dim(1);
    Tensor<T> out(Shape{static_cast<int>(idx.size()), d});
    for (std::size_t n = 0; n < idx.size(); ++n) {
      std::copy(wv.data.begin() + idx[n] * d, wv.data.begin() + (idx[n] + 1) * d,
                out.data.begin() + static_cast<std::int64_t>(n) * d);
    }
    Val y = push(std::move(out), needs_grad(w));
    add_back(y, [this, w, y, idx = std::move(idx), d] {
      if (auto* gw = want(w)) {
        const auto& gy = node(y).grad.data;
        for (std::size_t n = 0; n < idx.size(); ++n) {
          for (int c = 0; c < d; ++c) {
            gw->data[static_cast<std::size_t>(idx[n]) * d + c] += gy[n * d + c];
          }
        }
      }
    });
    return y;
  }

  // out[n] = sum_c a[n,c] * b[n,c]
  Val rowwise_dot(Val a, Val b) {
    check_same_shape(a, b, "rowwise_dot");
    const Tensor<T>& av = value(a);
    const int n = av.dim(0), d = av.dim(1);
    Tensor<T> out(Shape{n});
    const auto& bv = value(b).data;
    for (int r = 0; r < n; ++r) {
      double acc = 0.0;
      for (int c = 0; c < d; ++c) {
        acc += static_cast<double>(av.data[static_cast<std::size_t>(r) * d + c]) *
               static_cast<double>(bv[static_cast<std::size_t>(r) * d + c]);
      }
      out.data[r] = static_cast<T>(acc);
    }
    Val y = push(std::move(out), needs_grad(a) || needs_grad(b));
    add_back(y, [this, a, b, y, n, d] {
      const auto& gy = node(y).grad.data;
      if (auto* ga = want(a)) {
        const auto& bv = value(b).data;
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < d; ++c)
            ga->data[static_cast<std::size_t>(r) * d + c] +=
                gy[r] * bv[static_cast<std::size_t>(r) * d + c];
      }
      if (auto* gb = want(b)) {
        const auto& av2 = value(a).data;
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < d; ++c)
            gb->data[static_cast<std::size_t>(r) * d + c] +=
                gy[r] * av2[static_cast<std::size_t>(r) * d + c];
      }
    });
    return y;
  }

  // ----- convolution / pooling / resampling (NHWC) -----

  // 3x3 or 1x1 stride-1 convolution with symmetric zero padding.
  Val conv2d(Val x, Val kernel, int pad) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& kv = value(kernel);
    const int N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), Ci = xv.dim(3);
    const int kh = kv.dim(0), kw = kv.dim(1), kci = kv.dim(2), Co = kv.dim(3);
    if (kci != Ci) throw ArgumentError("conv2d: channel mismatch");
    const int Ho = H + 2 * pad - kh + 1;
    const int Wo = W + 2 * pad - kw + 1;
    auto col = std::make_shared<Tensor<T>>(Shape{N * Ho * Wo, kh * kw * Ci});
    im2col(xv, kh, kw, pad, *col);
    Tensor<T> out(Shape{N, Ho, Wo, Co});
    {
      MapCM C(col->data.data(), static_cast<std::int64_t>(N) * Ho * Wo, kh * kw * Ci);
      MapCM K(kv.data.data(), kh * kw * Ci, Co);
      MapM O(out.data.data(), static_cast<std::int64_t>(N) * Ho * Wo, Co);
      O.noalias() = C * K;
    }
    Val y = push(std::move(out), needs_grad(x) || needs_grad(kernel));
    add_back(y, [this, x, kernel, y, col, pad, N, H, W, Ci, kh, kw, Co, Ho, Wo] {
      const Tensor<T>& gy = node(y).grad;
      MapCM G(gy.data.data(), static_cast<std::int64_t>(N) * Ho * Wo, Co);
      if (auto* gk = want(kernel)) {
        MapCM C(col->data.data(), static_cast<std::int64_t>(N) * Ho * Wo, kh * kw * Ci);
        MapM K(gk->data.data(), kh * kw * Ci, Co);
        K.noalias() += C.transpose() * G;
      }
      if (auto* gx = want(x)) {
        Tensor<T> dcol(Shape{N * Ho * Wo, kh * kw * Ci});
        MapM DC(dcol.data.data(), static_cast<std::int64_t>(N) * Ho * Wo, kh * kw * Ci);
        MapCM K(value(kernel).data.data(), kh * kw * Ci, Co);
        DC.noalias() = G * K.transpose();
        col2im(dcol, kh, kw, pad, N, H, W, Ci, *gx);
      }
    });
    return y;
  }

  // Adds a per-channel bias along the last axis.
  Val bias_channel(Val x, Val b) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& bv = value(b);
    const int C = bv.dim(0);
    Tensor<T> out = xv;
    const std::int64_t n = out.numel() / C;
    for (std::int64_t i = 0; i < n; ++i) {
      for (int c = 0; c < C; ++c) out.data[i * C + c] += bv.data[c];
    }
    Val y = push(std::move(out), needs_grad(x) || needs_grad(b));
    add_back(y, [this, x, b, y, C] {
      const auto& gy = node(y).grad.data;
      if (auto* gx = want(x)) accumulate_from(*gx, gy);
      if (auto* gb = want(b)) {
        const std::int64_t n = static_cast<std::int64_t>(gy.size()) / C;
        for (int c = 0; c < C; ++c) {
          double acc = 0.0;
          for (std::int64_t i = 0; i < n; ++i) acc += static_cast<double>(gy[i * C + c]);
          gb->data[c] += static_cast<T>(acc);
        }
      }
    });
    return y;
  }

  Val avg_pool2(Val x) {
    const Tensor<T>& xv = value(x);
    const int N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    Tensor<T> out(Shape{N, H / 2, W / 2, C});
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H / 2; ++i)
        for (int j = 0; j < W / 2; ++j)
          for (int c = 0; c < C; ++c) {
            T s = xv.data[idx4(n, 2 * i, 2 * j, c, H, W, C)] +
                  xv.data[idx4(n, 2 * i, 2 * j + 1, c, H, W, C)] +
                  xv.data[idx4(n, 2 * i + 1, 2 * j, c, H, W, C)] +
                  xv.data[idx4(n, 2 * i + 1, 2 * j + 1, c, H, W, C)];
            out.data[idx4(n, i, j, c, H / 2, W / 2, C)] = s / T(4);
          }
    Val y = push(std::move(out), needs_grad(x));
    add_back(y, [this, x, y, N, H, W, C] {
      if (auto* gx = want(x)) {
        const auto& gy = node(y).grad.data;
        for (int n = 0; n < N; ++n)
          for (int i = 0; i < H / 2; ++i)
            for (int j = 0; j < W / 2; ++j)
              for (int c = 0; c < C; ++c) {
                const T g = gy[idx4(n, i, j, c, H / 2, W / 2, C)] / T(4);
                gx->data[idx4(n, 2 * i, 2 * j, c, H, W, C)] += g;
                gx->data[idx4(n, 2 * i, 2 * j + 1, c, H, W, C)] += g;
                gx->data[idx4(n, 2 * i + 1, 2 * j, c, H, W, C)] += g;
                gx->data[idx4(n, 2 * i + 1, 2 * j + 1, c, H, W, C)] += g;
              }
      }
    });
    return y;
  }

  Val max_pool2(Val x) {
    const Tensor<T>& xv = value(x);
    const int N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    Tensor<T> out(Shape{N, H / 2, W / 2, C});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(out.data.size());
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H / 2; ++i)
        for (int j = 0; j < W / 2; ++j)
          for (int c = 0; c < C; ++c) {
            std::int64_t best = idx4(n, 2 * i, 2 * j, c, H, W, C);
            T bv = xv.data[best];
            const std::int64_t cand[3] = {idx4(n, 2 * i, 2 * j + 1, c, H, W, C),
                                          idx4(n, 2 * i + 1, 2 * j, c, H, W, C),
                                          idx4(n, 2 * i + 1, 2 * j + 1, c, H, W, C)};
            for (std::int64_t k : cand) {
              if (xv.data[k] > bv) {
                bv = xv.data[k];
                best = k;
              }
            }
            const std::int64_t o = idx4(n, i, j, c, H / 2, W / 2, C);
            out.data[o] = bv;
            (*argmax)[o] = best;
          }
    Val y = push(std::move(out), needs_grad(x));
    add_back(y, [this, x, y, argmax] {
      if (auto* gx = want(x)) {
        const auto& gy = node(y).grad.data;
        for (std::size_t o = 0; o < gy.size(); ++o) gx->data[(*argmax)[o]] += gy[o];
      }
    });
    return y;
  }

  Val upsample_nearest2(Val x) {
    const Tensor<T>& xv = value(x);
    const int N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    Tensor<T> out(Shape{N, 2 * H, 2 * W, C});
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < 2 * H; ++i)
        for (int j = 0; j < 2 * W; ++j)
          for (int c = 0; c < C; ++c)
            out.data[idx4(n, i, j, c, 2 * H, 2 * W, C)] =
                xv.data[idx4(n, i / 2, j / 2, c, H, W, C)];
    Val y = push(std::move(out), needs_grad(x));
    add_back(y, [this, x, y, N, H, W, C] {
      if (auto* gx = want(x)) {
        const auto& gy = node(y).grad.data;
        for (int n = 0; n < N; ++n)
          for (int i = 0; i < 2 * H; ++i)
            for (int j = 0; j < 2 * W; ++j)
              for (int c = 0; c < C; ++c)
                gx->data[idx4(n, i / 2, j / 2, c, H, W, C)] +=
                    gy[idx4(n, i, j, c, 2 * H, 2 * W, C)];
      }
    });
    return y;
  }

  Val global_sum_pool(Val x) {
    const Tensor<T>& xv = value(x);
    const int N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    Tensor<T> out(Shape{N, C});
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
          for (int c = 0; c < C; ++c)
            out.data[static_cast<std::size_t>(n) * C + c] += xv.data[idx4(n, i, j, c, H, W, C)];
    Val y = push(std::move(out), needs_grad(x));
    add_back(y, [this, x, y, N, H, W, C] {
      if (auto* gx = want(x)) {
        const auto& gy = node(y).grad.data;
        for (int n = 0; n < N; ++n)
          for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j)
              for (int c = 0; c < C; ++c)
                gx->data[idx4(n, i, j, c, H, W, C)] += gy[static_cast<std::size_t>(n) * C + c];
      }
    });
    return y;
  }

  // View of a [kh,kw,ci,co] convolution kernel as a (co, kh*kw*ci) matrix,
  // the orientation used for spectral normalization.
  Val conv_kernel_as_matrix(Val k) {
    const Tensor<T>& kv = value(k);
    const int rows = kv.dim(3);
    const int cols = static_cast<int>(kv.numel() / rows);
    Tensor<T> out(Shape{rows, cols});
    for (int c = 0; c < cols; ++c) {
      for (int r = 0; r < rows; ++r) {
        out.data[static_cast<std::size_t>(r) * cols + c] =
            kv.data[static_cast<std::size_t>(c) * rows + r];
      }
    }
    Val y = push(std::move(out), needs_grad(k));
    add_back(y, [this, k, y, rows, cols] {
      if (auto* gk = want(k)) {
        const auto& gy = node(y).grad.data;
        for (int c = 0; c < cols; ++c) {
          for (int r = 0; r < rows; ++r) {
            gk->data[static_cast<std::size_t>(c) * rows + r] +=
                gy[static_cast<std::size_t>(r) * cols + c];
          }
        }
      }
    });
    return y;
  }

  // Exact 90-degree counter-clockwise rotations; square images only.
  Val rotate90(Val x, int r) {
    Tensor<T> out = rotate_image_batch(value(x), r);
    Val y = push(std::move(out), needs_grad(x));
    add_back(y, [this, x, y, r] {
      if (auto* gx = want(x)) {
        Tensor<T> back = rotate_image_batch(node(y).grad, (4 - r) % 4);
        accumulate_from(*gx, back.data);
      }
    });
    return y;
  }

  // ----- normalization -----

  // Batch normalization (statistics over all axes except the last). In
  // training mode the batch moments are used and differentiated through;
  // they are also written to *out_mean / *out_var (population variance) so
  // the caller can maintain moving statistics.
  Val batchnorm_train(Val x, T epsilon, std::vector<T>* out_mean, std::vector<T>* out_var) {
    const Tensor<T>& xv = value(x);
    const int C = xv.shape.back();
    const std::int64_t M = xv.numel() / C;
    if (M < 2) throw StateError("batchnorm: training mode needs batch of at least 2");
    auto mean = std::make_shared<std::vector<T>>(C, T(0));
    auto rstd = std::make_shared<std::vector<T>>(C, T(0));
    std::vector<double> sum(C, 0.0), sumsq(C, 0.0);
    for (std::int64_t i = 0; i < M; ++i) {
      for (int c = 0; c < C; ++c) {
        const double v = static_cast<double>(xv.data[i * C + c]);
        sum[c] += v;
        sumsq[c] += v * v;
      }
    }
    std::vector<T> var(C);
    for (int c = 0; c < C; ++c) {
      const double mu = sum[c] / static_cast<double>(M);
      double v = sumsq[c] / static_cast<double>(M) - mu * mu;
      if (v < 0.0) v = 0.0;
      (*mean)[c] = static_cast<T>(mu);
      var[c] = static_cast<T>(v);
      (*rstd)[c] = static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(epsilon)));
    }
    if (out_mean) *out_mean = *mean;
    if (out_var) *out_var = var;
    Tensor<T> out(xv.shape);
    for (std::int64_t i = 0; i < M; ++i) {
      for (int c = 0; c < C; ++c) {
        out.data[i * C + c] = (xv.data[i * C + c] - (*mean)[c]) * (*rstd)[c];
      }
    }
    Val y = push(std::move(out), needs_grad(x));
    add_back(y, [this, x, y, mean, rstd, C, M] {
      if (auto* gx = want(x)) {
        const auto& gy = node(y).grad.data;
        const auto& yv = node(y).value.data;
        // dx = rstd * (dy - mean(dy) - y * mean(dy*y)) per channel
        std::vector<double> mdy(C, 0.0), mdyy(C, 0.0);
        for (std::int64_t i = 0; i < M; ++i) {
          for (int c = 0; c < C; ++c) {
            const double g = static_cast<double>(gy[i * C + c]);
            mdy[c] += g;
            mdyy[c] += g * static_cast<double>(yv[i * C + c]);
          }
        }
        for (int c = 0; c < C; ++c) {
          mdy[c] /= static_cast<double>(M);
          mdyy[c] /= static_cast<double>(M);
        }
        for (std::int64_t i = 0; i < M; ++i) {
          for (int c = 0; c < C; ++c) {
            const double g = static_cast<double>(gy[i * C + c]);
            gx->data[i * C + c] += static_cast<T>(
                static_cast<double>((*rstd)[c]) *
                (g - mdy[c] - static_cast<double>(yv[i * C + c]) * mdyy[c]));
          }
        }
      }
    });
    return y;
  }

  // Inference-mode normalization with fixed statistics.
  Val batchnorm_inference(Val x, const std::vector<T>& mean, const std::vector<T>& var,
                          T epsilon) {
    const Tensor<T>& xv = value(x);
    const int C = xv.shape.back();
    const std::int64_t M = xv.numel() / C;
    auto rstd = std::make_shared<std::vector<T>>(C);
    for (int c = 0; c < C; ++c) {
      (*rstd)[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var[c]) +
                                                  static_cast<double>(epsilon)));
    }
    Tensor<T> out(xv.shape);
    for (std::int64_t i = 0; i < M; ++i)
      for (int c = 0; c < C; ++c)
        out.data[i * C + c] = (xv.data[i * C + c] - mean[c]) * (*rstd)[c];
    Val y = push(std::move(out), needs_grad(x));
    add_back(y, [this, x, y, rstd, C, M] {
      if (auto* gx = want(x)) {
        const auto& gy = node(y).grad.data;
        for (std::int64_t i = 0; i < M; ++i)
          for (int c = 0; c < C; ++c) gx->data[i * C + c] += gy[i * C + c] * (*rstd)[c];
      }
    });
    return y;
  }

  // Per-sample channel affine: y[n,...,c] = x[n,...,c]*gamma[n,c] + beta[n,c].
  Val sample_channel_affine(Val x, Val gamma, Val beta) {
    const Tensor<T>& xv = value(x);
    const int N = xv.dim(0);
    const int C = xv.shape.back();
    const std::int64_t S = xv.numel() / (static_cast<std::int64_t>(N) * C);  // spatial
    Tensor<T> out(xv.shape);
    const auto& gv = value(gamma).data;
    const auto& bv = value(beta).data;
    for (int n = 0; n < N; ++n)
      for (std::int64_t s = 0; s < S; ++s)
        for (int c = 0; c < C; ++c) {
          const std::int64_t i = (static_cast<std::int64_t>(n) * S + s) * C + c;
          out.data[i] = xv.data[i] * gv[static_cast<std::size_t>(n) * C + c] +
                        bv[static_cast<std::size_t>(n) * C + c];
        }
    Val y = push(std::move(out), needs_grad(x) || needs_grad(gamma) || needs_grad(beta));
    add_back(y, [this, x, gamma, beta, y, N, C, S] {
      const auto& gy = node(y).grad.data;
      const auto& xv = value(x).data;
      const auto& gv = value(gamma).data;
      auto* gx = want(x);
      auto* gg = want(gamma);
      auto* gb = want(beta);
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          double dg = 0.0, db = 0.0;
          for (std::int64_t s = 0; s < S; ++s) {
            const std::int64_t i = (static_cast<std::int64_t>(n) * S + s) * C + c;
            const double g = static_cast<double>(gy[i]);
            if (gx) gx->data[i] += static_cast<T>(g * gv[static_cast<std::size_t>(n) * C + c]);
            dg += g * static_cast<double>(xv[i]);
            db += g;
          }
          if (gg) gg->data[static_cast<std::size_t>(n) * C + c] += static_cast<T>(dg);
          if (gb) gb->data[static_cast<std::size_t>(n) * C + c] += static_cast<T>(db);
        }
      }
    });
    return y;
  }

  // Shared channel affine: y[...,c] = x[...,c]*gamma[c] + beta[c].
  Val channel_affine(Val x, Val gamma, Val beta) {
    const Tensor<T>& xv = value(x);
    const int C = xv.shape.back();
    const std::int64_t M = xv.numel() / C;
    Tensor<T> out(xv.shape);
    const auto& gv = value(gamma).data;
    const auto& bv = value(beta).data;
    for (std::int64_t i = 0; i < M; ++i)
      for (int c = 0; c < C; ++c) out.data[i * C + c] = xv.data[i * C + c] * gv[c] + bv[c];
    Val y = push(std::move(out), needs_grad(x) || needs_grad(gamma) || needs_grad(beta));
    add_back(y, [this, x, gamma, beta, y, C, M] {
      const auto& gy = node(y).grad.data;
      const auto& xv = value(x).data;
      const auto& gv = value(gamma).data;
      auto* gx = want(x);
      auto* gg = want(gamma);
      auto* gb = want(beta);
      for (int c = 0; c < C; ++c) {
        double dg = 0.0, db = 0.0;
        for (std::int64_t i = 0; i < M; ++i) {
          const double g = static_cast<double>(gy[i * C + c]);
          if (gx) gx->data[i * C + c] += static_cast<T>(g * gv[c]);
          dg += g * static_cast<double>(xv[i * C + c]);
          db += g;
        }
        if (gg) gg->data[c] += static_cast<T>(dg);
        if (gb) gb->data[c] += static_cast<T>(db);
      }
    });
    return y;
  }

  // ----- softmax / losses -----

  Val softmax_rows(Val x) {
    const Tensor<T>& xv = value(x);
    const int K = xv.shape.back();
    const std::int64_t N = xv.numel() / K;
    Tensor<T> out(xv.shape);
    for (std::int64_t n = 0; n < N; ++n) {
      T mx = xv.data[n * K];
      for (int k = 1; k < K; ++k) mx = std::max(mx, xv.data[n * K + k]);
      double Z = 0.0;
      for (int k = 0; k < K; ++k) {
        const double e = std::exp(static_cast<double>(xv.data[n * K + k] - mx));
        out.data[n * K + k] = static_cast<T>(e);
        Z += e;
      }
      for (int k = 0; k < K; ++k) out.data[n * K + k] = static_cast<T>(out.data[n * K + k] / Z);
    }
    Val y = push(std::move(out), needs_grad(x));
    add_back(y, [this, x, y, K, N] {
      if (auto* gx = want(x)) {
        const auto& gy = node(y).grad.data;
        const auto& yv = node(y).value.data;
        for (std::int64_t n = 0; n < N; ++n) {
          double dot = 0.0;
          for (int k = 0; k < K; ++k)
            dot += static_cast<double>(gy[n * K + k]) * static_cast<double>(yv[n * K + k]);
          for (int k = 0; k < K; ++k)
            gx->data[n * K + k] += static_cast<T>(
                static_cast<double>(yv[n * K + k]) *
                (static_cast<double>(gy[n * K + k]) - dot));
        }
      }
    });
    return y;
  }

  // Per-row cross entropy: out[n] = logsumexp(x[n,:]) - x[n, t[n]].
  Val cross_entropy_rows(Val logits, std::vector<int> targets) {
    const Tensor<T>& xv = value(logits);
    const int K = xv.dim(1);
    const int N = xv.dim(0);
    if (static_cast<int>(targets.size()) != N) {
      throw ArgumentError("cross_entropy_rows: target count mismatch");
    }
    auto probs = std::make_shared<Tensor<T>>(Shape{N, K});
    Tensor<T> out(Shape{N});
    for (int n = 0; n < N; ++n) {
      T mx = xv.data[static_cast<std::size_t>(n) * K];
      for (int k = 1; k < K; ++k) mx = std::max(mx, xv.data[static_cast<std::size_t>(n) * K + k]);
      double Z = 0.0;
      for (int k = 0; k < K; ++k) {
        const double e = std::exp(static_cast<double>(xv.data[static_cast<std::size_t>(n) * K + k] - mx));
        probs->data[static_cast<std::size_t>(n) * K + k] = static_cast<T>(e);
        Z += e;
      }
      for (int k = 0; k < K; ++k) {
        probs->data[static_cast<std::size_t>(n) * K + k] =
            static_cast<T>(probs->data[static_cast<std::size_t>(n) * K + k] / Z);
      }
      const double lse = std::log(Z) + static_cast<double>(mx);
      out.data[n] = static_cast<T>(lse - static_cast<double>(
                                             xv.data[static_cast<std::size_t>(n) * K + targets[n]]));
    }
    Val y = push(std::move(out), needs_grad(logits));
    add_back(y, [this, logits, y, probs, targets = std::move(targets), K, N] {
      if (auto* gl = want(logits)) {
        const auto& gy = node(y).grad.data;
        for (int n = 0; n < N; ++n) {
          for (int k = 0; k < K; ++k) {
            T p = probs->data[static_cast<std::size_t>(n) * K + k];
            if (k == targets[n]) p -= T(1);
            gl->data[static_cast<std::size_t>(n) * K + k] += gy[n] * p;
          }
        }
      }
    });
    return y;
  }

  Val mean_all(Val x) {
    const Tensor<T>& xv = value(x);
    if (xv.numel() == 0) throw ArgumentError("mean_all: empty tensor");
    double acc = 0.0;
    for (T v : xv.data) acc += static_cast<double>(v);
    const double inv = 1.0 / static_cast<double>(xv.numel());
    Val y = push(Tensor<T>::scalar(static_cast<T>(acc * inv)), needs_grad(x));
    add_back(y, [this, x, y, inv] {
      if (auto* gx = want(x)) {
        const T g = static_cast<T>(static_cast<double>(node(y).grad.data[0]) * inv);
        for (auto& v : gx->data) v += g;
      }
    });
    return y;
  }

  Val sum_all(Val x) {
    const Tensor<T>& xv = value(x);
    double acc = 0.0;
    for (T v : xv.data) acc += static_cast<double>(v);
    Val y = push(Tensor<T>::scalar(static_cast<T>(acc)), needs_grad(x));
    add_back(y, [this, x, y] {
      if (auto* gx = want(x)) {
        const T g = node(y).grad.data[0];
        for (auto& v : gx->data) v += g;
      }
    });
    return y;
  }

  // ----- backward -----

  void backward(Val loss) {
    Node& ln = nodes_[loss.i];
    if (ln.value.numel() != 1) throw ArgumentError("backward: loss must be scalar");
    ensure_grad(loss.i);
    ln.grad.data[0] = T(1);
    for (int i = loss.i; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad_written && n.backward) n.backward();
    }
  }

  // ----- static helpers (shared with non-graph code) -----

  static Tensor<T> rotate_image_batch(const Tensor<T>& x, int r) {
    if (x.rank() != 4) throw ArgumentError("rotate: expected [N,H,W,C]");
    const int N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    if (H != W) throw ArgumentError("rotate: image must be square");
    if (r < 0 || r > 3) throw ArgumentError("rotate: r must be in {0,1,2,3}");
    if (r == 0) return x;
    Tensor<T> out(x.shape);
    for (int n = 0; n < N; ++n) {
      for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
          // One 90-degree CCW step maps out[i][j] = in[j][W-1-i].
          int si = i, sj = j;
          for (int t = 0; t < r; ++t) {
            const int ni = sj, nj = W - 1 - si;
            si = ni;
            sj = nj;
          }
          for (int c = 0; c < C; ++c)
            out.data[idx4(n, i, j, c, H, W, C)] = x.data[idx4(n, si, sj, c, H, W, C)];
        }
      }
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool grad_written = false;
    std::function<void()> backward;
  };

  static std::int64_t idx4(int n, int i, int j, int c, int H, int W, int C) {
    return ((static_cast<std::int64_t>(n) * H + i) * W + j) * C + c;
  }

  Val push(Tensor<T> v, bool requires_grad) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Val{static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(Val v) { return nodes_[v.i]; }
  bool needs_grad(Val v) const { return nodes_[v.i].requires_grad; }

  void add_back(Val y, std::function<void()> fn) {
    if (nodes_[y.i].requires_grad) nodes_[y.i].backward = std::move(fn);
  }

  void ensure_grad(int i) {
    Node& n = nodes_[i];
    if (!n.grad_written) {
      n.grad = Tensor<T>::zeros(n.value.shape);
      n.grad_written = true;
    }
  }

  // Returns the gradient buffer of v if it participates in backprop.
  Tensor<T>* want(Val v) {
    Node& n = nodes_[v.i];
    if (!n.requires_grad) return nullptr;
    ensure_grad(v.i);
    return &n.grad;
  }

  static void accumulate_from(Tensor<T>& dst, const std::vector<T>& src) {
    for (std::size_t i = 0; i < src.size(); ++i) dst.data[i] += src[i];
  }

  void check_same_shape(Val a, Val b, const char* op) const {
    if (!(nodes_[a.i].value.shape == nodes_[b.i].value.shape)) {
      throw ArgumentError(std::string(op) + ": shape mismatch " +
                          shape_str(nodes_[a.i].value.shape) + " vs " +
                          shape_str(nodes_[b.i].value.shape));
    }
  }

  static void gemm(const Tensor<T>& a, bool ta, const Tensor<T>& b, bool tb, Tensor<T>& c) {
    MapCM A(a.data.data(), a.dim(0), a.dim(1));
    MapCM B(b.data.data(), b.dim(0), b.dim(1));
    MapM C(c.data.data(), c.dim(0), c.dim(1));
    if (!ta && !tb) C.noalias() = A * B;
    else if (ta && !tb) C.noalias() = A.transpose() * B;
    else if (!ta && tb) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }

  static void im2col(const Tensor<T>& x, int kh, int kw, int pad, Tensor<T>& col) {
    const int N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    const int Ho = H + 2 * pad - kh + 1;
    const int Wo = W + 2 * pad - kw + 1;
    std::fill(col.data.begin(), col.data.end(), T(0));
    const int row_len = kh * kw * C;
    for (int n = 0; n < N; ++n) {
      for (int oi = 0; oi < Ho; ++oi) {
        for (int oj = 0; oj < Wo; ++oj) {
          T* dst = col.data.data() +
                   (static_cast<std::int64_t>(n) * Ho * Wo + static_cast<std::int64_t>(oi) * Wo + oj) *
                       row_len;
          for (int ki = 0; ki < kh; ++ki) {
            const int si = oi + ki - pad;
            if (si < 0 || si >= H) continue;
            for (int kj = 0; kj < kw; ++kj) {
              const int sj = oj + kj - pad;
              if (sj < 0 || sj >= W) continue;
              const T* src = x.data.data() + idx4(n, si, sj, 0, H, W, C);
              std::copy(src, src + C, dst + (ki * kw + kj) * C);
            }
          }
        }
      }
    }
  }

  static void col2im(const Tensor<T>& dcol, int kh, int kw, int pad, int N, int H, int W, int C,
                     Tensor<T>& dx) {
    const int Ho = H + 2 * pad - kh + 1;
    const int Wo = W + 2 * pad - kw + 1;
    const int row_len = kh * kw * C;
    for (int n = 0; n < N; ++n) {
      for (int oi = 0; oi < Ho; ++oi) {
        for (int oj = 0; oj < Wo; ++oj) {
          const T* src = dcol.data.data() +
                         (static_cast<std::int64_t>(n) * Ho * Wo +
                          static_cast<std::int64_t>(oi) * Wo + oj) *
                             row_len;
          for (int ki = 0; ki < kh; ++ki) {
            const int si = oi + ki - pad;
            if (si < 0 || si >= H) continue;
            for (int kj = 0; kj < kw; ++kj) {
              const int sj = oj + kj - pad;
              if (sj < 0 || sj >= W) continue;
              T* dst = dx.data.data() + idx4(n, si, sj, 0, H, W, C);
              const T* s = src + (ki * kw + kj) * C;
              for (int c = 0; c < C; ++c) dst[c] += s[c];
            }
          }
        }
      }
    }
  }

  std::vector<Node> nodes_;
};

template <typename T>
using Val = typename Graph<T>::Val;

}  // namespace fewlabel
