#pragma once

#include <vector>

#include "privpool/tensor.hpp"

namespace privpool::linalg {

inline constexpr int kDefaultNsIterations = 5;
inline constexpr double kSymmetryTolerance = 1e-9;

/// Throws if any [D,D] slice of `a` ([D,D] or [B,D,D]) is not symmetric
/// within kSymmetryTolerance (scaled by the largest entry when that exceeds 1).
void require_symmetric(const Tensor& a, const char* who);

/// Matrix square root of symmetric PSD matrices by the coupled Newton-Schulz
/// iteration, unrolled on the tape so gradients flow through every step.
///
/// Input is pre-normalized by its trace and the result rescaled by sqrt(trace);
/// slices with trace <= 1e-12 map to the zero matrix. Accepts [D,D] or [B,D,D].
Tensor ns_sqrt(const Tensor& a, int iterations = kDefaultNsIterations);

struct Eigen {
  std::vector<double> values;   // ascending
  std::vector<double> vectors;  // column j is the eigenvector of values[j], row-major [n,n]
  int sweeps = 0;
};

/// Cyclic Jacobi eigendecomposition of a symmetric row-major n×n matrix.
/// Throws if the off-diagonal mass has not vanished after `max_sweeps`.
Eigen jacobi_eigen(std::vector<double> a, std::size_t n, int max_sweeps = 100);

/// Q sqrt(max(Λ,0)) Qᵀ via jacobi_eigen; the reference for ns_sqrt.
Tensor eig_sqrt_oracle(const Tensor& a);

/// ‖Y·Y − A‖_F / ‖A‖_F for square [D,D] tensors.
double sqrt_residual(const Tensor& y, const Tensor& a);
/// max |y_ij − y_ji|.
double symmetry_defect(const Tensor& y);

}  // namespace privpool::linalg
