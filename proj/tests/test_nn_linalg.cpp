#include <doctest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "privpool/checks.hpp"
#include "privpool/linalg.hpp"
#include "privpool/nn.hpp"

using namespace privpool;
using testutil::random_tensor;

TEST_CASE("glorot bound and init") {
  const double b = std::sqrt(6.0 / (72.0 + 144.0));
  CHECK(nn::glorot_bound(72, 144) == doctest::Approx(b));
  CHECK(b == doctest::Approx(0.1667).epsilon(1e-3));

  std::mt19937_64 rng(1);
  nn::Conv2dLayer layer({8, 16, 3, 1, 1}, rng);
  CHECK(layer.kernel().shape() == Shape{3, 3, 8, 16});
  double peak = 0;
  for (Real v : layer.kernel().data()) peak = std::max(peak, std::abs(double(v)));
  CHECK(peak <= b);
  CHECK(peak > 0.9 * b);  // 1152 draws reach near the edge
  for (Real v : layer.bias().data()) CHECK(v == 0);
}

TEST_CASE("same seed gives identical parameters") {
  std::mt19937_64 r1(42), r2(42), r3(43);
  nn::Conv2dLayer a({3, 4, 3, 1, 1}, r1), b({3, 4, 3, 1, 1}, r2), c({3, 4, 3, 1, 1}, r3);
  CHECK(testutil::bitwise_equal(a.kernel(), b.kernel()));
  CHECK_FALSE(testutil::bitwise_equal(a.kernel(), c.kernel()));
  nn::LinearLayer l1(5, 3, r1), l2(5, 3, r2);
  CHECK(testutil::bitwise_equal(l1.weight(), l2.weight()));
}

TEST_CASE("conv layer on a constant image") {
  std::mt19937_64 rng(2);
  nn::Conv2dLayer layer({1, 1, 3, 1, 1}, rng);
  layer.kernel() = Tensor::full({3, 3, 1, 1}, 1, true);
  layer.bias() = Tensor::full({1}, 0.5, true);
  const double c = 0.7;
  auto y = layer.forward(Tensor::full({1, 5, 5, 1}, Real(c)));
  CHECK(y.shape() == Shape{1, 5, 5, 1});
  CHECK(y.at({0, 2, 2, 0}) == doctest::Approx(9 * c + 0.5));
  CHECK(y.at({0, 0, 0, 0}) == doctest::Approx(4 * c + 0.5));
  CHECK_THROWS_AS(layer.forward(Tensor::zeros({1, 5, 5, 2})), std::invalid_argument);
}

TEST_CASE("layer gradients") {
  std::mt19937_64 rng(3);
  nn::Conv2dLayer conv({2, 3, 3, 2, 1}, rng);
  nn::LinearLayer lin(4, 3, rng);
  auto x = random_tensor({2, 5, 5, 2}, -1, 1, rng, true);
  auto r = grad_check(
      [&](const std::vector<Tensor>& in) {
        conv.kernel() = in[1];
        conv.bias() = in[2];
        return testutil::project(conv.forward(in[0]), 1);
      },
      {x, conv.kernel(), random_tensor({3}, -1, 1, rng, true)}, testutil::kTol, testutil::kStep);
  CHECK(r.pass);
  auto v = random_tensor({3, 4}, -1, 1, rng, true);
  auto r2 = grad_check(
      [&](const std::vector<Tensor>& in) {
        lin.weight() = in[1];
        return testutil::project(lin.forward(in[0]), 2);
      },
      {v, lin.weight()}, testutil::kTol, testutil::kStep);
  CHECK(r2.pass);
}

TEST_CASE("ns_sqrt small examples") {
  CHECK(testutil::max_abs_diff(linalg::ns_sqrt(Tensor::eye(4)), Tensor::eye(4)) < 1e-5);
  auto d = linalg::ns_sqrt(Tensor::from({2, 2}, {4, 0, 0, 9}));
  CHECK(d.at({0, 0}) == doctest::Approx(2).epsilon(1e-3));
  CHECK(d.at({1, 1}) == doctest::Approx(3).epsilon(1e-3));
  CHECK(std::abs(d.at({0, 1})) < 1e-12);

  auto z = linalg::ns_sqrt(Tensor::zeros({3, 3}));
  for (Real v : z.data()) CHECK(v == 0);

  CHECK_THROWS_AS(linalg::ns_sqrt(Tensor::from({2, 2}, {1, 0.5, 0, 1})), std::invalid_argument);
}

TEST_CASE("ns_sqrt converges with more iterations") {
  std::mt19937_64 rng(4);
  auto a = checks::random_spd(16, 1e3, rng);
  double prev = INFINITY;
  for (int it : {3, 5, 10, 20}) {
    double r = linalg::sqrt_residual(linalg::ns_sqrt(a, it), a);
    CHECK(r < prev);
    prev = r;
  }
  CHECK(prev < 1e-10);
}

TEST_CASE("ns_sqrt is scale free and symmetric") {
  std::mt19937_64 rng(5);
  auto a = checks::random_spd(8, 1e2, rng);
  auto y = linalg::ns_sqrt(a);
  auto y4 = linalg::ns_sqrt(scale(a, 4));
  CHECK(testutil::max_abs_diff(y4, scale(y, 2)) < 1e-6);
  CHECK(linalg::symmetry_defect(y) < 1e-6);

  // batched slices agree with single calls
  auto b = checks::random_spd(8, 10, rng);
  auto both = linalg::ns_sqrt(concat({reshape(a, {1, 8, 8}), reshape(b, {1, 8, 8})}, 0));
  CHECK(testutil::bitwise_equal(reshape(slice(both, 0, 1, 1), {8, 8}), linalg::ns_sqrt(b)));
}

TEST_CASE("eigendecomposition oracle") {
  CHECK(testutil::max_abs_diff(linalg::eig_sqrt_oracle(Tensor::eye(3)), Tensor::eye(3)) < 1e-12);
  auto d = Tensor::from({2, 2}, {0, 0, 0, 1});
  CHECK(testutil::max_abs_diff(linalg::eig_sqrt_oracle(d), d) < 1e-12);

  std::mt19937_64 rng(6);
  const std::size_t n = 6;
  auto a = checks::random_spd(n, 50, rng);
  auto e = linalg::jacobi_eigen({a.data().begin(), a.data().end()}, n);
  for (std::size_t i = 0; i + 1 < n; ++i) CHECK(e.values[i] <= e.values[i + 1]);
  CHECK(e.values.front() == doctest::Approx(1).epsilon(1e-9));
  CHECK(e.values.back() == doctest::Approx(50).epsilon(1e-9));
  // Q Λ Qᵀ reconstructs A
  double worst = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < n; ++k) acc += e.vectors[i * n + k] * e.values[k] * e.vectors[j * n + k];
      worst = std::max(worst, std::abs(acc - a.at({i, j})));
    }
  CHECK(worst < 1e-10);
  CHECK(linalg::sqrt_residual(linalg::eig_sqrt_oracle(a), a) < 1e-12);
}

TEST_CASE("ns_sqrt gradient under symmetric perturbation") {
  std::mt19937_64 rng(7);
  auto a = checks::random_spd(5, 20, rng);
  auto x = Tensor::from({5, 5}, {a.data().begin(), a.data().end()}, true);
  auto r = grad_check(
      [](const std::vector<Tensor>& in) {
        auto s = scale(add(in[0], transpose(in[0])), 0.5);
        return testutil::project(linalg::ns_sqrt(s), 3);
      },
      {x}, 1e-3, testutil::kStep);
  CHECK(r.pass);
}
