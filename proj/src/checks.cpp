#include "privpool/checks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>

#include "privpool/attention.hpp"
#include "privpool/linalg.hpp"
#include "privpool/model.hpp"
#include "privpool/pooling.hpp"

namespace privpool::checks {

namespace {

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

#ifdef PRIVPOOL_FLOAT32
// Central differences in single precision cannot resolve 1e-4.
constexpr double kGradTol = 2e-2, kLooseTol = 5e-2, kStep = 1e-2;
#else
constexpr double kGradTol = 1e-4, kLooseTol = 1e-3, kStep = 1e-5;
#endif

Tensor random_tensor(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Real> v(n);
  for (auto& x : v) x = static_cast<Real>(u(rng));
  return Tensor::from(std::move(shape), std::move(v));
}

// Values in [lo,hi) with pairwise gaps of at least (hi-lo)/(2n), shuffled, so
// max-based ops have no near-ties.
Tensor distinct_tensor(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<Real> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<Real>(lo + (hi - lo) * (static_cast<double>(i) + 0.5) / static_cast<double>(n));
  std::shuffle(v.begin(), v.end(), rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// Projects an output onto a fixed random direction so every output element
// contributes to the checked scalar.
Fn project(std::function<Tensor(const std::vector<Tensor>&)> op, std::mt19937_64& rng, Shape out_shape) {
  const Tensor w = random_tensor(std::move(out_shape), -1, 1, rng);
  return [op = std::move(op), w](const std::vector<Tensor>& in) { return sum_all(mul(op(in), w)); };
}

CheckLine grad_line(const std::string& name, const Fn& fn, const std::vector<Tensor>& inputs, double tol) {
  const auto report = grad_check(fn, inputs, tol, kStep);
  return {name, report.worst, tol, report.pass, false};
}

CheckLine model_grad_line(const std::string& name, pooling::PoolMode mode, double tol, std::mt19937_64& rng) {
  model::ModelConfig mc;
  mc.widths = {4};
  mc.input_size = 8;
  mc.supervised_maps = 2;
  mc.complementary_maps = 1;
  mc.pool = mode;
  mc.reduced_dim = 3;
  mc.num_classes = 3;
  mc.seed = rng();
  model::Model model(mc);
  const Tensor x = random_tensor({2, 8, 8, 3}, 0, 1, rng);
  const std::vector<int> labels{0, 2};
  attention::KeypointTargets targets;
  std::vector<Real> target(2 * 4 * 4 * 2, 0);
  target[(1 * 4 + 1) * 2 + 0] = 1;
  target[(2 * 4 + 3) * 2 + 1] = 1;
  targets.maps = Tensor::from({2, 4, 4, 2}, std::move(target));
  targets.visible = {true, true, false, false};
  targets.annotated = {true, false};

  auto params = model.parameters();
  std::vector<Tensor> originals;
  for (auto& p : params) originals.push_back(*p.tensor);
  const Fn fn = [&](const std::vector<Tensor>& in) {
    for (std::size_t i = 0; i < params.size(); ++i) *params[i].tensor = in[i];
    const auto out = model.forward(x, true);
    return attention::total_loss(out.logits, labels, out.stack ? &*out.stack : nullptr, &targets).total;
  };
  const auto report = grad_check(fn, originals, tol, kStep);
  for (std::size_t i = 0; i < params.size(); ++i) *params[i].tensor = originals[i];
  return {name, report.worst, tol, report.pass, false};
}

double max_abs_diff(std::span<const Real> a, std::span<const Real> b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <typename F>
SuiteResult timed(const std::string& suite, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r;
  r.suite = suite;
  body(r.lines);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace

bool SuiteResult::pass() const {
  return std::all_of(lines.begin(), lines.end(), [](const CheckLine& l) { return l.pass || l.informational; });
}

Tensor random_spd(std::size_t n, double cond, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0, 1);
  std::vector<double> q(n * n);
  for (auto& v : q) v = g(rng);
  // Modified Gram-Schmidt on the columns.
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double dot = 0;
      for (std::size_t i = 0; i < n; ++i) dot += q[i * n + j] * q[i * n + k];
      for (std::size_t i = 0; i < n; ++i) q[i * n + j] -= dot * q[i * n + k];
    }
    double norm = 0;
    for (std::size_t i = 0; i < n; ++i) norm += q[i * n + j] * q[i * n + j];
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < n; ++i) q[i * n + j] /= norm;
  }
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> lambda(n);
  for (std::size_t i = 0; i < n; ++i) lambda[i] = std::pow(cond, i == 0 ? 0.0 : i == 1 ? 1.0 : u(rng));
  std::vector<Real> a(n * n, 0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = r; c < n; ++c) {
      double s = 0;
      for (std::size_t k = 0; k < n; ++k) s += q[r * n + k] * lambda[k] * q[c * n + k];
      a[r * n + c] = a[c * n + r] = static_cast<Real>(s);
    }
  return Tensor::from({n, n}, std::move(a));
}

SuiteResult grad_suite(std::uint64_t seed) {
  return timed("grad", [&](std::vector<CheckLine>& out) {
    std::mt19937_64 rng(seed);
    {
      const Tensor x = random_tensor({1, 5, 5, 2}, -1, 1, rng), k = random_tensor({3, 3, 2, 3}, -1, 1, rng);
      out.push_back(grad_line("conv2d 3x3 stride 1 pad 1",
                              project([](const auto& in) { return conv2d(in[0], in[1], 1, 1); }, rng, {1, 5, 5, 3}),
                              {x, k}, kGradTol));
      out.push_back(grad_line("conv2d 3x3 stride 2 pad 1",
                              project([](const auto& in) { return conv2d(in[0], in[1], 2, 1); }, rng, {1, 3, 3, 3}),
                              {x, k}, kGradTol));
    }
    out.push_back(grad_line("maxpool2d 2x2 stride 2",
                            project([](const auto& in) { return maxpool2d(in[0], 2, 2, 0); }, rng, {2, 2, 2, 3}),
                            {distinct_tensor({2, 4, 4, 3}, -1, 1, rng)}, kGradTol));
    out.push_back(grad_line("maxpool2d 3x3 stride 1 pad 1",
                            project([](const auto& in) { return maxpool2d(in[0], 3, 1, 1); }, rng, {1, 4, 4, 2}),
                            {distinct_tensor({1, 4, 4, 2}, -1, 1, rng)}, kGradTol));
    {
      // Keep every element at least 0.1 away from the kink.
      Tensor x = random_tensor({3, 4}, 0.1, 1, rng);
      auto d = x.mutable_data();
      for (std::size_t i = 0; i < d.size(); i += 2) d[i] = -d[i];
      out.push_back(grad_line("relu", project([](const auto& in) { return relu(in[0]); }, rng, {3, 4}), {x}, kGradTol));
    }
    out.push_back(grad_line("sigmoid", project([](const auto& in) { return sigmoid(in[0]); }, rng, {3, 4}),
                            {random_tensor({3, 4}, -4, 4, rng)}, kGradTol));
    {
      Tensor target = Tensor::zeros({5, 5});
      target.mutable_data()[12] = 1;
      target.mutable_data()[13] = 1;
      const Tensor logits = random_tensor({5, 5}, -2, 2, rng);
      out.push_back(grad_line("bce_loss(sigmoid)",
                              [target](const auto& in) { return attention::bce_loss(sigmoid(in[0]), target); }, {logits},
                              kGradTol));
      out.push_back(grad_line("multiscale_attention_loss",
                              [target](const auto& in) {
                                return attention::multiscale_attention_loss(sigmoid(in[0]), target);
                              },
                              {distinct_tensor({5, 5}, -2, 2, rng)}, kGradTol));
      out.push_back(grad_line("variance_regularizer",
                              [](const auto& in) { return attention::variance_regularizer(sigmoid(in[0])); },
                              {logits}, kGradTol));
    }
    {
      const Tensor f = random_tensor({2, 3, 3, 4}, -1, 1, rng), a = random_tensor({2, 3, 3, 2}, 0.05, 0.95, rng);
      out.push_back(grad_line("expand",
                              project([](const auto& in) { return pooling::expand(in[0], in[1]); }, rng, {2, 3, 3, 2, 4}),
                              {f, a}, kGradTol));
      out.push_back(grad_line("avg_pool", project([](const auto& in) { return pooling::avg_pool(in[0]); }, rng, {2, 4}),
                              {f}, kGradTol));
      out.push_back(grad_line("avg_pr_pool(expand)",
                              project([](const auto& in) { return pooling::avg_pr_pool(pooling::expand(in[0], in[1])); },
                                      rng, {2, 16}),
                              {distinct_tensor({2, 3, 3, 4}, -1, 1, rng), distinct_tensor({2, 3, 3, 2}, 0.1, 0.9, rng)},
                              kGradTol));
      const Tensor w = random_tensor({4, 3}, -1, 1, rng), b = random_tensor({3}, -1, 1, rng);
      out.push_back(grad_line("reduce_channels",
                              project(
                                  [](const auto& in) {
                                    pooling::ChannelReducer r = pooling::ChannelReducer::identity(4);
                                    r.layer().weight() = in[1];
                                    r.layer().bias() = in[2];
                                    return pooling::reduce_channels(in[0], r);
                                  },
                                  rng, {2, 3, 3, 3}),
                              {f, w, b}, kGradTol));
      out.push_back(grad_line("covariance",
                              project([](const auto& in) { return pooling::covariance(in[0]); }, rng, {2, 4, 4}), {f},
                              kGradTol));
      out.push_back(grad_line("cov_pool (ns_sqrt end-to-end)",
                              project([](const auto& in) { return pooling::cov_pool(pooling::expand(in[0], in[1])); },
                                      rng, {2, 16}),
                              {f, a}, kLooseTol));
    }
    {
      Tensor s = random_spd(4, 10, rng);
      out.push_back(grad_line("ns_sqrt",
                              project([](const auto& in) { return linalg::ns_sqrt(scale(add(in[0], transpose(in[0])), 0.5)); },
                                      rng, {4, 4}),
                              {s}, kLooseTol));
    }
    {
      const Tensor logits = random_tensor({3, 4}, -2, 2, rng);
      const std::vector<int> labels{0, 3, 1};
      out.push_back(grad_line("cross_entropy", [labels](const auto& in) { return cross_entropy(in[0], labels); },
                              {logits}, kGradTol));
    }
    out.push_back(model_grad_line("total_loss, toy avg_pr model", pooling::PoolMode::AvgPr, kGradTol, rng));
    out.push_back(model_grad_line("total_loss, toy cov_pr model", pooling::PoolMode::CovPr, kLooseTol, rng));
  });
}

SuiteResult sqrt_suite(int iterations, std::size_t trials, std::uint64_t seed) {
  return timed("sqrt", [&](std::vector<CheckLine>& out) {
    std::mt19937_64 rng(seed);
    double residual = 0, oracle_gap = 0, symmetry = 0, oracle_residual = 0;
    for (std::size_t t = 0; t < trials; ++t) {
      const Tensor a = random_spd(16, 1e3, rng);
      const Tensor y = linalg::ns_sqrt(a, iterations);
      const Tensor ref = linalg::eig_sqrt_oracle(a);
      residual = std::max(residual, linalg::sqrt_residual(y, a));
      oracle_residual = std::max(oracle_residual, linalg::sqrt_residual(ref, a));
      symmetry = std::max(symmetry, linalg::symmetry_defect(y));
      double num = 0, den = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        num += std::pow(static_cast<double>(y.data()[i]) - ref.data()[i], 2);
        den += std::pow(static_cast<double>(ref.data()[i]), 2);
      }
      oracle_gap = std::max(oracle_gap, std::sqrt(num / den));
    }
    const std::string tag = " (" + std::to_string(iterations) + " iters, " + std::to_string(trials) + " trials)";
    out.push_back({"eig oracle residual ||QsqrtLQ^2 - A||/||A||", oracle_residual, 1e-10, oracle_residual < 1e-10, false});
    out.push_back({"ns_sqrt residual ||YY - A||/||A||" + tag, residual, 1e-3, residual < 1e-3, false});
    out.push_back({"ns_sqrt symmetry defect" + tag, symmetry, 1e-6, symmetry < 1e-6, false});
    out.push_back({"ns_sqrt distance to oracle ||Y - S||/||S||" + tag, oracle_gap, 1e-3, oracle_gap < 1e-3, true});
  });
}

SuiteResult pool_identity_suite(std::uint64_t seed) {
  return timed("pool-identities", [&](std::vector<CheckLine>& out) {
    std::mt19937_64 rng(seed);
    const std::size_t n = 2, h = 4, w = 4, d = 6;
    const Tensor f = random_tensor({n, h, w, d}, -1, 1, rng);
    const Tensor ones = Tensor::full({n, h, w, 1}, 1);

    const Tensor pr = pooling::avg_pr_pool(pooling::expand(f, ones));
    const Tensor plain = pooling::avg_pool(f);
    const double mean_gap = max_abs_diff(slice(pr, 1, 0, d).data(), plain.data());
    out.push_back({"AvgPrPool mean block == AvgPool (a = 1)", mean_gap, 1e-12, mean_gap < 1e-12, false});

    const Tensor cov_pr = pooling::cov_pool(pooling::expand(f, ones));
    const Tensor cov = pooling::cov_pool(f);
    const double cov_gap = max_abs_diff(cov_pr.data(), cov.data());
    out.push_back({"CovPrPool == CovPool (a = 1)", cov_gap, 1e-12, cov_gap < 1e-12, false});

    // Expand against a loop oracle.
    const Tensor a = random_tensor({n, h, w, 3}, 0, 1, rng);
    const Tensor e = pooling::expand(f, a);
    double expand_gap = 0;
    for (std::size_t p = 0; p < n * h * w; ++p)
      for (std::size_t m = 0; m < 3; ++m)
        for (std::size_t c = 0; c < d; ++c)
          expand_gap = std::max(expand_gap, std::abs(static_cast<double>(e.data()[(p * 3 + m) * d + c]) -
                                                     static_cast<double>(f.data()[p * d + c]) * a.data()[p * 3 + m]));
    out.push_back({"expand == loop oracle", expand_gap, 1e-15, expand_gap < 1e-15, false});

    // Map permutation (2,0,1).
    const Tensor permuted = concat({slice(a, 3, 2, 1), slice(a, 3, 0, 1), slice(a, 3, 1, 1)}, 3);
    const Tensor base = pooling::avg_pr_pool(e);
    const Tensor moved = pooling::avg_pr_pool(pooling::expand(f, permuted));
    const Tensor reordered = concat({slice(base, 1, 4 * d, 2 * d), slice(base, 1, 0, 2 * d), slice(base, 1, 2 * d, 2 * d)}, 1);
    const double perm_gap = max_abs_diff(moved.data(), reordered.data());
    out.push_back({"AvgPrPool blocks follow map permutation", perm_gap, 1e-15, perm_gap < 1e-15, false});

    const double cov_perm = max_abs_diff(pooling::cov_pool(e).data(), pooling::cov_pool(pooling::expand(f, permuted)).data());
    out.push_back({"CovPrPool invariant to map permutation", cov_perm, 1e-10, cov_perm < 1e-10, false});

    // Identity reducer leaves the map unchanged.
    const auto identity = pooling::ChannelReducer::identity(d);
    const double red_gap = max_abs_diff(pooling::reduce_channels(f, identity).data(), f.data());
    out.push_back({"identity reducer is exact", red_gap, 1e-15, red_gap < 1e-15, false});
  });
}

std::string format_line(const CheckLine& l) {
  char buf[320];
  std::snprintf(buf, sizeof(buf), "%-5s %-62s %.3e (< %.0e)", l.informational ? "INFO" : l.pass ? "PASS" : "FAIL",
                l.name.c_str(), l.value, l.threshold);
  return buf;
}

}  // namespace privpool::checks
