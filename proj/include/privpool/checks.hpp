#pragma once

#include <random>
#include <string>
#include <vector>

#include "privpool/tensor.hpp"

namespace privpool::checks {

struct CheckLine {
  std::string name;
  double value = 0;      // worst observed error
  double threshold = 0;  // pass iff value < threshold
  bool pass = false;
  bool informational = false;  // reported, never fails the suite
};

struct SuiteResult {
  std::string suite;
  std::vector<CheckLine> lines;
  double seconds = 0;
  bool pass() const;
};

/// Random symmetric positive definite n×n matrix: random orthogonal basis and
/// log-uniform eigenvalues in [1, cond] with both endpoints present.
Tensor random_spd(std::size_t n, double cond, std::mt19937_64& rng);

/// Central-difference checks of every differentiable operation and of the
/// full model loss on a toy model.
SuiteResult grad_suite(std::uint64_t seed = 7);

/// ns_sqrt(iterations) against the eigendecomposition oracle over `trials`
/// random SPD 16×16 matrices with cond ≤ 1e3.
SuiteResult sqrt_suite(int iterations, std::size_t trials = 100, std::uint64_t seed = 11);

/// Pooling reduction identities and permutation properties.
SuiteResult pool_identity_suite(std::uint64_t seed = 13);

std::string format_line(const CheckLine& line);

}  // namespace privpool::checks
