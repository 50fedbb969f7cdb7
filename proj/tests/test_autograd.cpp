#include <catch2/catch_amalgamated.hpp>

#include "fewlabel/graph.hpp"
#include "test_util.hpp"

using fewlabel::Graph;
using fewlabel::Rng;
using fewlabel::Shape;
using fewlabel::Tensor;
using testutil::check_gradients;
using testutil::DVal;

namespace {

Tensor<double> rand_t(Shape s, Rng& rng) { return Tensor<double>::randn(std::move(s), rng); }

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(11);
  auto a = rand_t({3, 4}, rng);
  auto b = rand_t({3, 4}, rng);

  auto res = check_gradients({a, b}, [](Graph<double>& g, const std::vector<DVal>& in) {
    auto y = g.add(in[0], g.hadamard(in[0], in[1]));
    y = g.sub(y, g.affine_const(in[1], 0.5, -1.0));
    y = g.tanh_act(y);
    y = g.relu(y);
    return g.mean_all(y);
  });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("matmul gradients, all transpose combinations") {
  Rng rng(12);
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      auto a = rand_t(ta ? Shape{5, 3} : Shape{3, 5}, rng);
      auto b = rand_t(tb ? Shape{4, 5} : Shape{5, 4}, rng);
      auto res = check_gradients({a, b}, [=](Graph<double>& g, const std::vector<DVal>& in) {
        return g.mean_all(g.matmul(in[0], in[1], ta, tb));
      });
      INFO("ta=" << ta << " tb=" << tb);
      CHECK(res.max_rel_err < 1e-6);
    }
  }
}

TEST_CASE("batched matmul gradients") {
  Rng rng(13);
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      auto a = rand_t(ta ? Shape{2, 3, 4} : Shape{2, 4, 3}, rng);
      auto b = rand_t(tb ? Shape{2, 5, 3} : Shape{2, 3, 5}, rng);
      auto res = check_gradients({a, b}, [=](Graph<double>& g, const std::vector<DVal>& in) {
        return g.mean_all(g.bmm(in[0], in[1], ta, tb));
      });
      INFO("ta=" << ta << " tb=" << tb);
      CHECK(res.max_rel_err < 1e-6);
    }
  }
}

TEST_CASE("conv2d forward matches direct convolution") {
  Rng rng(14);
  auto x = rand_t({2, 5, 5, 3}, rng);
  auto k = rand_t({3, 3, 3, 4}, rng);
  Graph<double> g;
  auto y = g.conv2d(g.constant(x), g.constant(k), 1);
  const auto& yv = g.value(y);
  REQUIRE(yv.shape == Shape{2, 5, 5, 4});
  // direct evaluation at a few positions
  auto direct = [&](int n, int oi, int oj, int co) {
    double acc = 0.0;
    for (int ki = 0; ki < 3; ++ki)
      for (int kj = 0; kj < 3; ++kj)
        for (int ci = 0; ci < 3; ++ci) {
          const int si = oi + ki - 1, sj = oj + kj - 1;
          if (si < 0 || si >= 5 || sj < 0 || sj >= 5) continue;
          acc += x.data[((n * 5 + si) * 5 + sj) * 3 + ci] *
                 k.data[((ki * 3 + kj) * 3 + ci) * 4 + co];
        }
    return acc;
  };
  for (auto [n, i, j, c] : {std::tuple{0, 0, 0, 0}, std::tuple{1, 2, 3, 1}, std::tuple{1, 4, 4, 3}}) {
    CHECK(yv.data[((n * 5 + i) * 5 + j) * 4 + c] == Catch::Approx(direct(n, i, j, c)).margin(1e-12));
  }
}

TEST_CASE("conv2d + bias gradients") {
  Rng rng(15);
  auto x = rand_t({2, 4, 4, 2}, rng);
  auto k = rand_t({3, 3, 2, 3}, rng);
  auto b = rand_t({3}, rng);
  auto res = check_gradients({x, k, b}, [](Graph<double>& g, const std::vector<DVal>& in) {
    return g.mean_all(g.relu(g.bias_channel(g.conv2d(in[0], in[1], 1), in[2])));
  });
  CHECK(res.max_rel_err < 1e-5);

  auto k1 = rand_t({1, 1, 2, 5}, rng);
  auto res1 = check_gradients({x, k1}, [](Graph<double>& g, const std::vector<DVal>& in) {
    return g.mean_all(g.conv2d(in[0], in[1], 0));
  });
  CHECK(res1.max_rel_err < 1e-6);
}

TEST_CASE("pooling and resampling gradients") {
  Rng rng(16);
  auto x = rand_t({2, 4, 4, 3}, rng);
  for (auto which : {0, 1, 2, 3}) {
    auto res = check_gradients({x}, [=](Graph<double>& g, const std::vector<DVal>& in) {
      switch (which) {
        case 0: return g.mean_all(g.avg_pool2(in[0]));
        case 1: return g.mean_all(g.max_pool2(in[0]));
        case 2: return g.mean_all(g.upsample_nearest2(in[0]));
        default: return g.mean_all(g.hadamard(g.global_sum_pool(in[0]), g.global_sum_pool(in[0])));
      }
    });
    INFO("op " << which);
    CHECK(res.max_rel_err < 1e-6);
  }
}

TEST_CASE("slicing, concatenation, gather") {
  Rng rng(17);
  auto x = rand_t({6, 3}, rng);
  auto w = rand_t({5, 4}, rng);
  auto res = check_gradients({x, w}, [](Graph<double>& g, const std::vector<DVal>& in) {
    auto top = g.rows(in[0], 0, 2);
    auto bottom = g.rows(in[0], 4, 2);
    auto joined = g.concat_rows({top, bottom});            // [4,3]
    auto c = g.cols(joined, 1, 2);                          // [4,2]
    auto gathered = g.gather_rows(in[1], {0, 3, 3, 4});     // [4,4]
    auto both = g.concat_cols(c, gathered);                 // [4,6]
    return g.mean_all(g.hadamard(both, both));
  });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("rowwise dot and scalar mul/div") {
  Rng rng(18);
  auto a = rand_t({4, 3}, rng);
  auto b = rand_t({4, 3}, rng);
  auto s = Tensor<double>::scalar(1.7);
  auto res = check_gradients({a, b, s}, [](Graph<double>& g, const std::vector<DVal>& in) {
    auto d = g.rowwise_dot(in[0], in[1]);
    auto scaled = g.mul_by_scalar(d, in[2]);
    auto divided = g.div_by_scalar(scaled, in[2]);
    return g.mean_all(g.add(scaled, divided));
  });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("softmax and cross entropy gradients") {
  Rng rng(19);
  auto x = rand_t({5, 4}, rng);
  auto res = check_gradients({x}, [](Graph<double>& g, const std::vector<DVal>& in) {
    auto sm = g.softmax_rows(in[0]);
    auto ce = g.cross_entropy_rows(in[0], {1, 0, 3, 2, 2});
    return g.add(g.mean_all(g.hadamard(sm, sm)), g.mean_all(ce));
  });
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("batchnorm training mode: moments and gradients") {
  Rng rng(20);
  auto x = rand_t({6, 3, 3, 2}, rng);
  std::vector<double> mean, var;
  {
    Graph<double> g;
    auto y = g.batchnorm_train(g.constant(x), 1e-5, &mean, &var);
    const auto& yv = g.value(y);
    // normalized output has per-channel mean 0, var ~1
    const int C = 2;
    const int M = static_cast<int>(yv.numel() / C);
    for (int c = 0; c < C; ++c) {
      double s = 0.0, ss = 0.0;
      for (int i = 0; i < M; ++i) {
        s += yv.data[i * C + c];
        ss += yv.data[i * C + c] * yv.data[i * C + c];
      }
      CHECK(std::abs(s / M) < 1e-10);
      CHECK(ss / M == Catch::Approx(1.0).epsilon(1e-3));
    }
  }
  // The loss is nearly invariant to per-channel shifts of x, so small FD
  // steps are dominated by cancellation; h=1e-3 keeps the check sharp.
  auto res = check_gradients({x}, [](Graph<double>& g, const std::vector<DVal>& in) {
    auto y = g.batchnorm_train(in[0], 1e-5, nullptr, nullptr);
    auto w = g.constant(Tensor<double>::full({6, 3, 3, 2}, 0.3));
    return g.mean_all(g.hadamard(y, g.add(y, w)));
  }, 1e-3);
  CHECK(res.max_rel_err < 1e-5);

  auto res2 = check_gradients({x}, [&](Graph<double>& g, const std::vector<DVal>& in) {
    auto y = g.batchnorm_inference(in[0], mean, var, 1e-5);
    return g.mean_all(g.hadamard(y, y));
  });
  CHECK(res2.max_rel_err < 1e-6);
}

TEST_CASE("channel affine ops") {
  Rng rng(21);
  auto x = rand_t({3, 2, 2, 4}, rng);
  auto gam = rand_t({3, 4}, rng);
  auto bet = rand_t({3, 4}, rng);
  auto res = check_gradients({x, gam, bet}, [](Graph<double>& g, const std::vector<DVal>& in) {
    auto y = g.sample_channel_affine(in[0], in[1], in[2]);
    return g.mean_all(g.hadamard(y, y));
  });
  CHECK(res.max_rel_err < 1e-6);

  auto gc = rand_t({4}, rng);
  auto bc = rand_t({4}, rng);
  auto res2 = check_gradients({x, gc, bc}, [](Graph<double>& g, const std::vector<DVal>& in) {
    auto y = g.channel_affine(in[0], in[1], in[2]);
    return g.mean_all(g.hadamard(y, y));
  });
  CHECK(res2.max_rel_err < 1e-6);
}

TEST_CASE("rotation op is differentiable and invertible") {
  Rng rng(22);
  auto x = rand_t({2, 4, 4, 3}, rng);
  for (int r = 0; r < 4; ++r) {
    auto res = check_gradients({x}, [=](Graph<double>& g, const std::vector<DVal>& in) {
      auto y = g.rotate90(in[0], r);
      auto w = g.constant(Tensor<double>::randn({2, 4, 4, 3}, *(new Rng(r + 50))));
      return g.mean_all(g.hadamard(y, w));
    });
    INFO("r=" << r);
    CHECK(res.max_rel_err < 1e-6);
  }
}

TEST_CASE("stop_grad blocks gradient flow") {
  Rng rng(23);
  auto x = rand_t({3, 3}, rng);
  Graph<double> g;
  auto leaf = g.leaf(x, true);
  auto blocked = g.stop_grad(leaf);
  auto loss = g.mean_all(g.hadamard(blocked, blocked));
  g.backward(loss);
  CHECK(g.grad(leaf).data == std::vector<double>(9, 0.0));
}

TEST_CASE("reshape and mean/sum") {
  Rng rng(24);
  auto x = rand_t({2, 6}, rng);
  auto res = check_gradients({x}, [](Graph<double>& g, const std::vector<DVal>& in) {
    auto y = g.reshape(in[0], {3, 4});
    return g.add(g.mean_all(y), g.sum_all(g.hadamard(y, y)));
  });
  CHECK(res.max_rel_err < 1e-6);
}
