#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fewlabel/losses.hpp"
#include "test_util.hpp"

using fewlabel::Graph;
using fewlabel::Rng;
using fewlabel::Shape;
using fewlabel::Tensor;
using testutil::check_gradients;
using testutil::DVal;

namespace {
const double kLn4 = std::log(4.0);
}

TEST_CASE("hinge discriminator loss") {
  CHECK(fewlabel::hinge_d_loss({2.0, 3.0}, {-2.0, -5.0}) == Catch::Approx(0.0).margin(1e-12));
  CHECK(fewlabel::hinge_d_loss({0.0}, {0.0}) == Catch::Approx(2.0).margin(1e-12));
  // mean(0.5, 2) + mean(1.3) = 1.25 + 1.3
  CHECK(fewlabel::hinge_d_loss({0.5, -1.0}, {0.3}) == Catch::Approx(2.55).margin(1e-12));
  CHECK_THROWS_AS(fewlabel::hinge_d_loss({}, {1.0}), fewlabel::ArgumentError);
}

TEST_CASE("hinge generator loss") {
  CHECK(fewlabel::hinge_g_loss({0.0, 0.0}) == Catch::Approx(0.0).margin(1e-12));
  CHECK(fewlabel::hinge_g_loss({3.0}) == Catch::Approx(-3.0).margin(1e-12));
  CHECK(fewlabel::hinge_g_loss({1.0, -2.0, 4.0}) == Catch::Approx(-1.0).margin(1e-12));
}

TEST_CASE("rotation loss") {
  CHECK(fewlabel::rotation_loss(Tensor<double>::zeros({8, 4}), {0, 1, 2, 3, 0, 1, 2, 3}) ==
        Catch::Approx(kLn4).margin(1e-9));

  Tensor<double> confident({2, 4});
  confident.data = {1e6, 0, 0, 0, 0, 1e6, 0, 0};
  CHECK(fewlabel::rotation_loss(confident, {0, 1}) == Catch::Approx(0.0).margin(1e-9));

  Tensor<double> one({1, 4});
  one.data = {1.0, 0.0, 0.0, 0.0};
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 3.0));
  CHECK(fewlabel::rotation_loss(one, {0}) == Catch::Approx(expected).margin(1e-9));
}

TEST_CASE("joint self/semi-supervised loss") {
  Rng rng(31);
  auto rot_logits = Tensor<double>::randn({8, 4}, rng);
  std::vector<int> rot_targets{0, 1, 2, 3, 3, 2, 1, 0};

  SECTION("gamma=0 equals the rotation loss, even with no labels") {
    const double a = fewlabel::s2l_loss(rot_logits, rot_targets, Tensor<double>({0, 4}), {}, 0.0);
    CHECK(a == Catch::Approx(fewlabel::rotation_loss(rot_logits, rot_targets)).margin(1e-12));
  }
  SECTION("perfect heads give zero loss at gamma=0.5") {
    Tensor<double> rot({4, 4}), cls({4, 3});
    for (int r = 0; r < 4; ++r) rot.data[static_cast<std::size_t>(r) * 4 + r] = 1e8;
    for (int r = 0; r < 4; ++r) cls.data[static_cast<std::size_t>(r) * 3 + 1] = 1e8;
    CHECK(fewlabel::s2l_loss(rot, {0, 1, 2, 3}, cls, {1, 1, 1, 1}, 0.5) ==
          Catch::Approx(0.0).margin(1e-9));
  }
  SECTION("single image, uniform heads, K=10, gamma=1") {
    CHECK(fewlabel::s2l_loss(Tensor<double>::zeros({1, 4}), {0}, Tensor<double>::zeros({1, 10}),
                             {0}, 1.0) == Catch::Approx(kLn4 + std::log(10.0)).margin(1e-9));
  }
  SECTION("empty labeled subset with gamma > 0 is an error") {
    CHECK_THROWS_AS(fewlabel::s2l_loss(rot_logits, rot_targets, Tensor<double>({0, 4}), {}, 0.5),
                    fewlabel::ArgumentError);
  }
  SECTION("monotone nondecreasing in gamma when the class term is positive") {
    auto cls = Tensor<double>::randn({3, 5}, rng);
    double prev = -1.0;
    for (double gamma : {0.0, 0.25, 0.5, 1.0, 2.0}) {
      const double v = fewlabel::s2l_loss(rot_logits, rot_targets, cls, {0, 1, 2}, gamma);
      CHECK(v >= prev);
      prev = v;
    }
  }
}

TEST_CASE("co-training discriminator loss") {
  SECTION("lambda=0, no unlabeled: reduces to conditional hinge") {
    Rng rng(32);
    std::vector<double> real{0.4, -0.2, 1.5}, fake{-0.7, 0.1};
    const double a =
        fewlabel::cotrain_d_loss(real, Tensor<double>::zeros({3, 4}), {0, 1, 2}, {}, fake, 0.0);
    CHECK(a == Catch::Approx(fewlabel::hinge_d_loss(real, fake)).margin(1e-6));
  }
  SECTION("all margins satisfied and perfect classifier give zero at lambda=0.2") {
    Tensor<double> logits({2, 4});
    logits.data = {50, 0, 0, 0, 0, 50, 0, 0};
    CHECK(fewlabel::cotrain_d_loss({2.0, 3.0}, logits, {0, 1}, {1.7}, {-2.0}, 0.2) ==
          Catch::Approx(0.0).margin(1e-9));
  }
  SECTION("hand-computed case: 1 + ln4 + 1") {
    CHECK(fewlabel::cotrain_d_loss({0.0}, Tensor<double>::zeros({1, 4}), {0}, {}, {0.0}, 1.0) ==
          Catch::Approx(2.0 + kLn4).margin(1e-9));
  }
}

TEST_CASE("self-supervision terms") {
  auto uniform = Tensor<double>::zeros({4, 4});
  std::vector<int> t{0, 1, 2, 3};
  CHECK(fewlabel::d_selfsup_term(uniform, t, 0.5) == Catch::Approx(0.5 * kLn4).margin(1e-9));
  CHECK(fewlabel::d_selfsup_term(uniform, t, 0.0) == Catch::Approx(0.0).margin(1e-12));
  Tensor<double> perfect({4, 4});
  for (int r = 0; r < 4; ++r) perfect.data[static_cast<std::size_t>(r) * 4 + r] = 1e8;
  CHECK(fewlabel::d_selfsup_term(perfect, t, 1.0) == Catch::Approx(0.0).margin(1e-9));

  CHECK(fewlabel::g_selfsup_term(uniform, t, 0.2) == Catch::Approx(0.2 * kLn4).margin(1e-9));
  CHECK(fewlabel::g_selfsup_term(uniform, t, 0.0) == Catch::Approx(0.0).margin(1e-12));
  CHECK(fewlabel::g_selfsup_term(Tensor<double>::zeros({1, 4}), {2}, 0.2) ==
        Catch::Approx(0.2 * kLn4).margin(1e-9));
}

TEST_CASE("losses are finite and correctly signed on random inputs") {
  Rng rng(33);
  for (int trial = 0; trial < 20; ++trial) {
    auto real = Tensor<double>::randn({5}, rng, 3.0);
    auto fake = Tensor<double>::randn({4}, rng, 3.0);
    std::vector<double> rv(real.data.begin(), real.data.end());
    std::vector<double> fv(fake.data.begin(), fake.data.end());
    const double d = fewlabel::hinge_d_loss(rv, fv);
    CHECK(std::isfinite(d));
    CHECK(d >= 0.0);
    CHECK(std::isfinite(fewlabel::hinge_g_loss(fv)));
    auto logits = Tensor<double>::randn({8, 4}, rng, 5.0);
    const double r = fewlabel::rotation_loss(logits, {0, 1, 2, 3, 0, 1, 2, 3});
    CHECK(std::isfinite(r));
    CHECK(r >= 0.0);
  }
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(34);
  std::vector<int> rot_targets{1, 0, 3, 2};
  std::vector<int> labels{0, 2};

  auto real = Tensor<double>::randn({3}, rng);
  auto fake = Tensor<double>::randn({4}, rng);
  auto rot_logits = Tensor<double>::randn({4, 4}, rng);
  auto class_logits = Tensor<double>::randn({2, 3}, rng);
  auto unl = Tensor<double>::randn({2}, rng);

  SECTION("hinge_d") {
    auto res = check_gradients({real, fake}, [](Graph<double>& g, const std::vector<DVal>& in) {
      return fewlabel::hinge_d_loss(g, in[0], in[1]);
    });
    CHECK(res.max_rel_err < 1e-3);
  }
  SECTION("hinge_g") {
    auto res = check_gradients({fake}, [](Graph<double>& g, const std::vector<DVal>& in) {
      return fewlabel::hinge_g_loss(g, in[0]);
    });
    CHECK(res.max_rel_err < 1e-3);
  }
  SECTION("rotation + selfsup terms") {
    auto res = check_gradients({rot_logits}, [&](Graph<double>& g, const std::vector<DVal>& in) {
      auto a = fewlabel::rotation_loss(g, in[0], rot_targets);
      auto b = fewlabel::d_selfsup_term(g, in[0], rot_targets, 0.5);
      auto c = fewlabel::g_selfsup_term(g, in[0], rot_targets, 0.2);
      return g.add(a, g.add(b, c));
    });
    CHECK(res.max_rel_err < 1e-3);
  }
  SECTION("s2l") {
    auto res = check_gradients({rot_logits, class_logits},
                               [&](Graph<double>& g, const std::vector<DVal>& in) {
                                 return fewlabel::s2l_loss(g, in[0], rot_targets, in[1], labels, 0.5);
                               });
    CHECK(res.max_rel_err < 1e-3);
  }
  SECTION("cotrain") {
    auto res = check_gradients(
        {real, class_logits, unl, fake}, [&](Graph<double>& g, const std::vector<DVal>& in) {
          return fewlabel::cotrain_d_loss(g, in[0], in[1], labels, in[2], true, in[3], 0.2);
        });
    CHECK(res.max_rel_err < 1e-3);
  }
}

TEST_CASE("loss weights validate") {
  fewlabel::LossWeights ok{0.5, 0.2, 0.2, 0.5};
  CHECK_NOTHROW(ok.validate());
  fewlabel::LossWeights bad{-0.1, 0, 0, 0};
  CHECK_THROWS_AS(bad.validate(), fewlabel::ArgumentError);
}
