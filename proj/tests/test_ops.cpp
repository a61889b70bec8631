#include <doctest.h>

#include <cmath>
#include <numeric>

#include "gdnv/ops.hpp"
#include "gdnv/rng.hpp"
#include "gdnv/tensor.hpp"
#include "oracles.hpp"

using namespace gdnv;

namespace {

Tensor<double> random_tensor(const Shape& s, Rng& rng) {
  Tensor<double> t(s);
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("conv2d matches the direct definition over random specs") {
  Rng rng(derive_seed(11, "conv-oracle"));
  std::size_t tested = 0;
  double worst = 0.0, worst_single = 0.0;
  while (tested < 240) {
    ConvSpec s = oracle::random_spec(rng);
    const Shape in{1 + rng.index(2), s.in_channels, 3 + rng.index(8), 3 + rng.index(8)};
    const long eh = static_cast<long>(s.dilation_h * (s.kernel_h - 1) + 1);
    const long ew = static_cast<long>(s.dilation_w * (s.kernel_w - 1) + 1);
    if (static_cast<long>(in.h + 2 * s.pad_h) < eh || static_cast<long>(in.w + 2 * s.pad_w) < ew) {
      CHECK_THROWS_AS(s.output_shape(in), ShapeError);
      continue;
    }
    Tensor<double> x = random_tensor(in, rng);
    Tensor<double> w = random_tensor(s.weight_shape(), rng);
    std::vector<double> b;
    if (rng.index(2)) {
      b.resize(s.out_channels);
      for (auto& v : b) v = rng.normal();
    }
    const Tensor<double> got = conv2d_forward<double>(x, w, b, s);
    const Tensor<double> want = oracle::naive_conv(x, w, b, s);
    REQUIRE(got.shape() == want.shape());
    for (std::size_t i = 0; i < got.numel(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
    const std::vector<float> bf(b.begin(), b.end());
    const Tensor<float> single = conv2d_forward<float>(x.cast<float>(), w.cast<float>(), bf, s);
    for (std::size_t i = 0; i < got.numel(); ++i) worst_single = std::max(worst_single, std::abs(single[i] - want[i]));
    ++tested;
  }
  CHECK(worst < 1e-10);
  CHECK(worst_single < 1e-5);
}

TEST_CASE("conv2d hand cases") {
  SUBCASE("3x3 ones over ones, same padding") {
    ConvSpec s = ConvSpec::square(1, 1, 3);
    Tensor<double> x({1, 1, 4, 4}, 1.0);
    Tensor<double> w(s.weight_shape(), 1.0);
    auto y = conv2d_forward<double>(x, w, {}, s);
    CHECK(y.at(0, 0, 0, 0) == 4.0);
    CHECK(y.at(0, 0, 0, 1) == 6.0);
    CHECK(y.at(0, 0, 1, 1) == 9.0);
  }
  SUBCASE("same padding keeps size for any dilation") {
    for (std::size_t r : {1, 2, 3, 5}) {
      ConvSpec s = ConvSpec::square(2, 2, 3, 1, r, 2);
      CHECK(s.pad_h == r);
      CHECK(s.output_shape({1, 2, 12, 16}) == Shape{1, 2, 12, 16});
    }
  }
  SUBCASE("1x1 weight gradient is the position sum of input times upstream") {
    Rng rng(3);
    ConvSpec s = ConvSpec::square(2, 1, 1);
    Tensor<double> x = random_tensor({1, 2, 3, 3}, rng);
    Tensor<double> w = random_tensor(s.weight_shape(), rng);
    Tensor<double> up = random_tensor({1, 1, 3, 3}, rng);
    auto g = conv2d_backward<double>(up, x, w, s, true);
    for (std::size_t c = 0; c < 2; ++c) {
      double want = 0.0;
      for (std::size_t i = 0; i < 9; ++i) want += x.plane(0, c)[i] * up[i];
      CHECK(g.weight[c] == doctest::Approx(want).epsilon(1e-12));
    }
    CHECK(g.bias[0] == doctest::Approx(std::accumulate(up.data().begin(), up.data().end(), 0.0)));
  }
  SUBCASE("invalid specs") {
    ConvSpec s = ConvSpec::square(3, 4, 3);
    s.groups = 2;
    CHECK_THROWS_AS(s.validate(), ShapeError);
    ConvSpec z = ConvSpec::square(1, 1, 3);
    z.stride_h = 0;
    CHECK_THROWS_AS(z.validate(), ShapeError);
  }
}

TEST_CASE("batchnorm") {
  SUBCASE("training output has zero mean and unit variance per channel") {
    Rng rng(5);
    Tensor<double> x = random_tensor({4, 3, 5, 5}, rng);
    for (auto& v : x.data()) v = 3.0 * v + 2.0;
    BatchNormState<double> st(3);
    auto y = batchnorm2d_forward<double>(x, st, true);
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0, q = 0;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 25; ++i) {
          m += y.plane(n, c)[i];
          q += y.plane(n, c)[i] * y.plane(n, c)[i];
        }
      m /= 100;
      q = q / 100 - m * m;
      CHECK(m == doctest::Approx(0.0).scale(1.0).epsilon(1e-9));
      CHECK(q == doctest::Approx(1.0).epsilon(1e-3));
    }
  }
  SUBCASE("running statistics follow momentum 0.1") {
    Tensor<double> x({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 4});
    BatchNormState<double> st(1);
    batchnorm2d_forward<double>(x, st, true);
    CHECK(st.running_mean[0] == doctest::Approx(0.25));
    // unbiased batch variance 5/3
    CHECK(st.running_var[0] == doctest::Approx(0.9 + 0.1 * 5.0 / 3.0));
  }
  SUBCASE("inference uses running statistics") {
    BatchNormState<double> st(1);
    st.running_mean[0] = 1.0;
    st.running_var[0] = 4.0;
    st.gamma[0] = 2.0;
    st.beta[0] = 0.5;
    Tensor<double> x({1, 1, 1, 1}, 5.0);
    auto y = batchnorm2d_forward<double>(x, st, false);
    CHECK(y[0] == doctest::Approx(2.0 * 4.0 / std::sqrt(4.0 + 1e-5) + 0.5));
  }
}

TEST_CASE("pointwise helpers") {
  CHECK(hard_sigmoid(0.0) == 0.5);
  CHECK(hard_sigmoid(3.0) == 1.0);
  CHECK(hard_sigmoid(-3.0) == 0.0);
  CHECK(hard_sigmoid(-10.0) == 0.0);
  CHECK(hard_sigmoid_grad(0.0) == doctest::Approx(1.0 / 6.0));
  CHECK(hard_sigmoid_grad(4.0) == 0.0);

  const std::vector<double> logits{1, 2, 3, 0, 0, 0};
  auto p = softmax_rows<double>(logits, 2, 3);
  CHECK(p[0] + p[1] + p[2] == doctest::Approx(1.0));
  CHECK(p[3] == doctest::Approx(1.0 / 3));

  const std::vector<double> v{3, 4};
  auto u = l2_normalize<double>(v);
  CHECK(u[0] == doctest::Approx(0.6));
  CHECK(u[1] == doctest::Approx(0.8));
  const std::vector<double> zero{0, 0};
  auto z = l2_normalize<double>(zero);
  CHECK(z[0] == 0.0);

  Tensor<double> x({1, 2, 2, 2}, std::vector<double>{1, 2, 3, 4, -1, -1, -1, -1});
  auto g = global_avg_pool(x);
  CHECK(g[0] == 2.5);
  CHECK(g[1] == -1.0);
  auto r = relu(x);
  CHECK(r[4] == 0.0);
  CHECK(r[3] == 4.0);
}

TEST_CASE("tensor channel concat and split invert each other") {
  Rng rng(9);
  Tensor<double> a = random_tensor({2, 3, 2, 2}, rng);
  Tensor<double> b = random_tensor({2, 2, 2, 2}, rng);
  auto c = concat_channels(a, b);
  CHECK(c.shape() == Shape{2, 5, 2, 2});
  auto [a2, b2] = split_channels(c, 3);
  CHECK(a2.values() == a.values());
  CHECK(b2.values() == b.values());
  CHECK_THROWS_AS(concat_channels(a, random_tensor({1, 2, 2, 2}, rng)), ShapeError);
}
