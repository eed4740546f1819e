#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "helpers.hpp"
#include "privpool/linalg.hpp"
#include "privpool/pooling.hpp"

using namespace privpool;
using namespace privpool::pooling;
using testutil::random_tensor;

namespace {

// x[N,S,D] flattened; population covariance with joint mean, no ridge.
std::vector<double> loop_covariance(const Tensor& x, std::size_t b) {
  const std::size_t d = x.dim(x.ndim() - 1);
  const std::size_t s = x.size() / x.dim(0) / d;
  const Real* p = x.data().data() + b * s * d;
  std::vector<double> mu(d, 0), cov(d * d, 0);
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += p[i * d + j];
  for (auto& m : mu) m /= double(s);
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < d; ++k) cov[j * d + k] += (p[i * d + j] - mu[j]) * (p[i * d + k] - mu[k]);
  for (auto& c : cov) c /= double(s);
  return cov;
}

}  // namespace

TEST_CASE("pool mode names") {
  CHECK(parse_pool_mode("cov_pr") == PoolMode::CovPr);
  CHECK(to_string(PoolMode::AvgPr) == "avg_pr");
  CHECK_THROWS_WITH_AS(parse_pool_mode("max"), doctest::Contains("avg, avg_pr, cov, cov_pr"), std::invalid_argument);
  CHECK(uses_attention(PoolMode::AvgPr));
  CHECK_FALSE(uses_attention(PoolMode::Cov));
  CHECK(uses_covariance(PoolMode::CovPr));
}

TEST_CASE("expand matches the loop") {
  std::mt19937_64 rng(1);
  auto f = random_tensor({2, 3, 4, 5}, -1, 1, rng);
  auto a = random_tensor({2, 3, 4, 3}, 0, 1, rng);
  auto e = expand(f, a);
  CHECK(e.shape() == Shape{2, 3, 4, 3, 5});
  double worst = 0;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t h = 0; h < 3; ++h)
      for (std::size_t w = 0; w < 4; ++w)
        for (std::size_t m = 0; m < 3; ++m)
          for (std::size_t d = 0; d < 5; ++d)
            worst = std::max(worst, std::abs(e.at({n, h, w, m, d}) - f.at({n, h, w, d}) * a.at({n, h, w, m})));
  CHECK(worst == 0);

  auto ones = expand(f, Tensor::full({2, 3, 4, 1}, 1));
  CHECK(testutil::bitwise_equal(reshape(ones, {2, 3, 4, 5}), f));
  auto zeroed = expand(f, Tensor::zeros({2, 3, 4, 2}));
  for (Real v : zeroed.data()) CHECK(v == 0);
  CHECK_THROWS_AS(expand(f, Tensor::zeros({2, 3, 3, 1})), std::invalid_argument);
}

TEST_CASE("avg_pool") {
  CHECK(avg_pool(Tensor::full({1, 3, 3, 2}, 1.5)).at({0, 1}) == doctest::Approx(1.5));
  std::vector<Real> one(16, 0);
  one[5] = 8;
  CHECK(avg_pool(Tensor::from({1, 4, 4, 1}, one)).item() == doctest::Approx(0.5));

  std::mt19937_64 rng(2);
  auto f = random_tensor({2, 3, 5, 4}, -1, 1, rng);
  auto p = avg_pool(f);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t d = 0; d < 4; ++d) {
      double acc = 0;
      for (std::size_t h = 0; h < 3; ++h)
        for (std::size_t w = 0; w < 5; ++w) acc += f.at({n, h, w, d});
      CHECK(p.at({n, d}) == doctest::Approx(acc / 15).epsilon(1e-12));
    }
}

TEST_CASE("avg_pr_pool layout and values") {
  std::mt19937_64 rng(3);
  const std::size_t H = 3, W = 4, M = 2, D = 3;
  auto e = random_tensor({1, H, W, M, D}, -1, 1, rng);
  auto p = avg_pr_pool(e);
  CHECK(p.shape() == Shape{1, 2 * M * D});
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t d = 0; d < D; ++d) {
      double acc = 0, peak = -INFINITY;
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          acc += e.at({0, h, w, m, d});
          peak = std::max(peak, double(e.at({0, h, w, m, d})));
        }
      CHECK(p.at({0, m * 2 * D + d}) == doctest::Approx(acc / double(H * W)).epsilon(1e-12));
      CHECK(p.at({0, m * 2 * D + D + d}) == peak);
    }

  // constant F: mean slice = c·ā_m
  auto a = random_tensor({1, H, W, M}, 0, 1, rng);
  auto q = avg_pr_pool(expand(Tensor::full({1, H, W, D}, 2), a));
  for (std::size_t m = 0; m < M; ++m) {
    double abar = 0;
    for (std::size_t i = 0; i < H * W; ++i) abar += a.data()[i * M + m];
    abar /= double(H * W);
    CHECK(q.at({0, m * 2 * D}) == doctest::Approx(2 * abar).epsilon(1e-12));
  }
}

TEST_CASE("reduction identities with one all-ones map") {
  std::mt19937_64 rng(4);
  auto f = random_tensor({2, 4, 4, 6}, -1, 1, rng);
  auto ones = Tensor::full({2, 4, 4, 1}, 1);
  auto pr = avg_pr_pool(expand(f, ones));
  CHECK(testutil::bitwise_equal(slice(pr, 1, 0, 6), avg_pool(f)));
  CHECK(testutil::max_abs_diff(cov_pool(expand(f, ones)), cov_pool(f)) <= 1e-12);
}

TEST_CASE("covariance matches the loop and is PSD") {
  std::mt19937_64 rng(5);
  auto x = random_tensor({2, 3, 4, 2, 5}, -1, 1, rng);
  auto c = covariance(x);
  CHECK(c.shape() == Shape{2, 5, 5});
  for (std::size_t b = 0; b < 2; ++b) {
    auto ref = loop_covariance(x, b);
    double tr = 0;
    for (std::size_t i = 0; i < 5; ++i) tr += ref[i * 5 + i];
    const double ridge = kRidgeFactor * tr / 5;
    std::vector<double> block(25);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double want = ref[i * 5 + j] + (i == j ? ridge : 0);
        CHECK(c.at({b, i, j}) == doctest::Approx(want).epsilon(1e-10));
        CHECK(std::abs(c.at({b, i, j}) - c.at({b, j, i})) < 1e-12);
        block[i * 5 + j] = c.at({b, i, j});
      }
    auto e = linalg::jacobi_eigen(block, 5);
    CHECK(e.values.front() >= 0);
  }
  CHECK_THROWS_AS(covariance(Tensor::zeros({1, 1, 3})), std::invalid_argument);
}

TEST_CASE("cov_pool hand examples") {
  auto x = Tensor::from({1, 2, 2}, {1, 0, -1, 0});
  auto p = cov_pool(x, 20);
  CHECK(p.shape() == Shape{1, 4});
  CHECK(p.at({0, 0}) == doctest::Approx(1).epsilon(1e-3));
  CHECK(std::abs(p.at({0, 1})) < 1e-9);
  CHECK(std::abs(p.at({0, 3})) < 1e-2);  // ridge-level

  auto flat = cov_pool(Tensor::full({1, 5, 3}, 0.7));
  for (Real v : flat.data()) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("permuting maps permutes AvgPr blocks and leaves CovPr unchanged") {
  std::mt19937_64 rng(6);
  auto f = random_tensor({1, 4, 4, 3}, -1, 1, rng);
  auto a = random_tensor({1, 4, 4, 3}, 0, 1, rng);
  const std::vector<std::size_t> perm{2, 0, 1};
  std::vector<Tensor> parts;
  for (auto m : perm) parts.push_back(slice(a, 3, m, 1));
  auto ap = concat(parts, 3);

  auto p = avg_pr_pool(expand(f, a));
  auto pp = avg_pr_pool(expand(f, ap));
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(testutil::bitwise_equal(slice(pp, 1, i * 6, 6), slice(p, 1, perm[i] * 6, 6)));

  CHECK(testutil::max_abs_diff(cov_pool(expand(f, a)), cov_pool(expand(f, ap))) < 1e-12);
}

TEST_CASE("channel reducer") {
  std::mt19937_64 rng(7);
  auto x = random_tensor({2, 3, 3, 2, 4}, -1, 1, rng);
  auto id = ChannelReducer::identity(4);
  CHECK(testutil::bitwise_equal(reduce_channels(x, id), x));

  ChannelReducer r(4, 2, rng);
  CHECK(r.out_channels() == 2);
  auto y = reduce_channels(x, r);
  CHECK(y.shape() == Shape{2, 3, 3, 2, 2});
  CHECK(testutil::max_abs_diff(reduce_channels(scale(x, 3), r), scale(y, 3)) < 1e-12);

  // shared across m: slice m of the output only depends on slice m of the input
  auto y0 = reduce_channels(slice(x, 3, 1, 1), r);
  CHECK(testutil::bitwise_equal(y0, slice(y, 3, 1, 1)));
}

TEST_CASE("pooling gradients") {
  std::mt19937_64 rng(8);
  const double tol = testutil::kTol, h = testutil::kStep;
  auto f = random_tensor({1, 3, 3, 3}, -1, 1, rng, true);
  auto a = random_tensor({1, 3, 3, 2}, 0.1, 0.9, rng, true);
  CHECK(grad_check([](const std::vector<Tensor>& in) { return testutil::project(expand(in[0], in[1]), 1); }, {f, a}, tol, h).pass);
  CHECK(grad_check([](const std::vector<Tensor>& in) { return testutil::project(avg_pool(in[0]), 2); }, {f}, tol, h).pass);
  CHECK(grad_check([](const std::vector<Tensor>& in) { return testutil::project(avg_pr_pool(expand(in[0], in[1])), 3); },
                   {f, a}, tol, h)
            .pass);
  CHECK(grad_check([](const std::vector<Tensor>& in) { return testutil::project(covariance(in[0]), 4); }, {f}, tol, h).pass);
  CHECK(grad_check([](const std::vector<Tensor>& in) { return testutil::project(cov_pool(expand(in[0], in[1])), 5); },
                   {f, a}, 1e-3, h)
            .pass);
}
