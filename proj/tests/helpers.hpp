#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "privpool/tensor.hpp"

namespace testutil {

using privpool::Real;
using privpool::Shape;
using privpool::Tensor;

inline Tensor random_tensor(Shape shape, double lo, double hi, std::mt19937_64& rng, bool grad = false) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Real> v(n);
  for (auto& x : v) x = static_cast<Real>(u(rng));
  return Tensor::from(std::move(shape), std::move(v), grad);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

// Fixed random projection so every output element reaches the checked scalar.
inline Tensor project(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return privpool::sum_all(privpool::mul(y, random_tensor(y.shape(), -1, 1, rng)));
}

#ifdef PRIVPOOL_FLOAT32
inline constexpr double kTol = 1e-2, kStep = 1e-2;
#else
inline constexpr double kTol = 1e-4, kStep = 1e-5;
#endif

}  // namespace testutil
