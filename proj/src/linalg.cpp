#include "privpool/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace privpool::linalg {

namespace {

constexpr double kDegenerateTrace = 1e-12;

std::pair<std::size_t, std::size_t> batch_dims(const Tensor& a, const char* who) {
  if (a.ndim() == 2 && a.dim(0) == a.dim(1)) return {1, a.dim(0)};
  if (a.ndim() == 3 && a.dim(1) == a.dim(2)) return {a.dim(0), a.dim(1)};
  throw std::invalid_argument(std::string(who) + ": expects [D,D] or [B,D,D], got " + shape_str(a.shape()));
}

}  // namespace

void require_symmetric(const Tensor& a, const char* who) {
  const auto [batch, d] = batch_dims(a, who);
  const auto v = a.data();
  double scale = 1.0;
  for (Real x : v) scale = std::max(scale, std::abs(static_cast<double>(x)));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i + 1; j < d; ++j) {
        const double diff = std::abs(static_cast<double>(v[b * d * d + i * d + j] - v[b * d * d + j * d + i]));
        if (diff > kSymmetryTolerance * scale)
          throw std::invalid_argument(std::string(who) + ": matrix is not symmetric (entry " + std::to_string(i) +
                                      "," + std::to_string(j) + " differs by " + std::to_string(diff) + ")");
      }
}

Tensor ns_sqrt(const Tensor& a, int iterations) {
  if (iterations < 1) throw std::invalid_argument("ns_sqrt: iterations must be >= 1");
  const auto [batch, d] = batch_dims(a, "ns_sqrt");
  require_symmetric(a, "ns_sqrt");
  const Shape bdd{batch, d, d};
  const Tensor a3 = reshape(a, bdd);

  const Tensor eye = broadcast_to(reshape(Tensor::eye(d), {1, d, d}), bdd);
  const Tensor trace = sum(mul(a3, eye), {1, 2});  // [B]

  // Degenerate slices: normalize by 1 instead, then zero the result.
  std::vector<Real> keep(batch), patch(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const bool degenerate = trace.data()[b] <= kDegenerateTrace;
    keep[b] = degenerate ? 0 : 1;
    patch[b] = degenerate ? 1 : 0;
  }
  const Tensor keep_t = Tensor::from({batch}, keep);
  const Tensor safe_trace = add(mul(trace, keep_t), Tensor::from({batch}, patch));
  auto per_matrix = [&](const Tensor& v) { return broadcast_to(reshape(v, {batch, 1, 1}), bdd); };

  const Tensor three_eye = scale(eye, 3);
  Tensor y = div(a3, per_matrix(safe_trace));
  Tensor z = eye;
  for (int k = 0; k < iterations; ++k) {
    const Tensor t = scale(sub(three_eye, bmm(z, y)), Real(0.5));
    y = bmm(y, t);
    z = bmm(t, z);
  }
  Tensor out = mul(y, per_matrix(mul(sqrt(safe_trace), keep_t)));
  return reshape(out, a.shape());
}

Eigen jacobi_eigen(std::vector<double> a, std::size_t n, int max_sweeps) {
  if (a.size() != n * n) throw std::invalid_argument("jacobi_eigen: size mismatch");
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  auto off_norm = [&] {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a[i * n + j] * a[i * n + j];
    return std::sqrt(s);
  };
  double total = 0;
  for (double x : a) total += x * x;
  total = std::sqrt(total);

  const double tol = 1e-13 * std::max(total, 1e-300);
  Eigen result;
  int sweep = 0;
  bool converged = false;
  for (; sweep < max_sweeps; ++sweep) {
    if (off_norm() <= tol) {
      converged = true;
      break;
    }
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double app = a[p * n + p], aqq = a[q * n + q];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        // A <- Jᵀ A J on rows/cols p,q.
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
  }
  if (!converged && off_norm() > tol)
    throw std::runtime_error("jacobi_eigen: no convergence after " + std::to_string(max_sweeps) + " sweeps");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto i, auto j) { return a[i * n + i] < a[j * n + j]; });
  result.values.resize(n);
  result.vectors.resize(n * n);
  for (std::size_t j = 0; j < n; ++j) {
    result.values[j] = a[order[j] * n + order[j]];
    for (std::size_t k = 0; k < n; ++k) result.vectors[k * n + j] = v[k * n + order[j]];
  }
  result.sweeps = sweep;
  return result;
}

Tensor eig_sqrt_oracle(const Tensor& a) {
  if (a.ndim() != 2 || a.dim(0) != a.dim(1))
    throw std::invalid_argument("eig_sqrt_oracle: expects [D,D], got " + shape_str(a.shape()));
  require_symmetric(a, "eig_sqrt_oracle");
  const std::size_t n = a.dim(0);
  const auto eig = jacobi_eigen({a.data().begin(), a.data().end()}, n);
  std::vector<Real> out(n * n, 0);
  for (std::size_t j = 0; j < n; ++j) {
    const double r = std::sqrt(std::max(eig.values[j], 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < n; ++k)
        out[i * n + k] += static_cast<Real>(eig.vectors[i * n + j] * r * eig.vectors[k * n + j]);
  }
  return Tensor::from({n, n}, std::move(out));
}

double sqrt_residual(const Tensor& y, const Tensor& a) {
  const std::size_t n = a.dim(0);
  const auto yy = matmul(y.detach(), y.detach());
  double num = 0, den = 0;
  for (std::size_t i = 0; i < n * n; ++i) {
    const double diff = static_cast<double>(yy.data()[i]) - a.data()[i];
    num += diff * diff;
    den += static_cast<double>(a.data()[i]) * a.data()[i];
  }
  return std::sqrt(num) / std::sqrt(den);
}

double symmetry_defect(const Tensor& y) {
  const std::size_t n = y.dim(0);
  double worst = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      worst = std::max(worst, std::abs(static_cast<double>(y.data()[i * n + j] - y.data()[j * n + i])));
  return worst;
}

}  // namespace privpool::linalg
