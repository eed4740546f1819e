#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "privpool/linalg.hpp"
#include "privpool/nn.hpp"
#include "privpool/tensor.hpp"

namespace privpool::pooling {

enum class PoolMode { Avg, AvgPr, Cov, CovPr };

std::string to_string(PoolMode mode);
/// Throws std::invalid_argument listing the valid names.
PoolMode parse_pool_mode(const std::string& name);
bool uses_attention(PoolMode mode);
bool uses_covariance(PoolMode mode);

/// F'[n,h,w,m,d] = F[n,h,w,d] · a[n,h,w,m]
Tensor expand(const Tensor& features, const Tensor& maps);

/// [N,H,W,D] -> [N,D], per-channel spatial mean.
Tensor avg_pool(const Tensor& features);

/// [N,H,W,M,D] -> [N,2MD]: per slice m the spatial mean block then the
/// spatial max block, slices in map order.
Tensor avg_pr_pool(const Tensor& expanded);

/// Learned 1×1 convolution over the last axis, shared across all leading
/// positions (h, w and m).
class ChannelReducer {
 public:
  ChannelReducer() = default;
  ChannelReducer(std::size_t in, std::size_t out, std::mt19937_64& rng);
  /// Square identity reducer with zero bias.
  static ChannelReducer identity(std::size_t channels);

  Tensor forward(const Tensor& x) const;
  std::size_t out_channels() const { return layer_.weight().dim(1); }
  nn::LinearLayer& layer() { return layer_; }
  void collect(const std::string& prefix, std::vector<nn::NamedParam>& out);

 private:
  nn::LinearLayer layer_;
};

Tensor reduce_channels(const Tensor& x, const ChannelReducer& reducer);

inline constexpr double kRidgeFactor = 1e-5;

/// Covariance of the S = (product of middle axes) samples of x[N,...,D]
/// (mean over all samples jointly), plus ridge (1e-5·tr/D)·I.
/// Returns [N,D,D]. Throws if S < 2.
Tensor covariance(const Tensor& x);

/// sqrt(covariance(x)) flattened row-major to [N, D²].
Tensor cov_pool(const Tensor& x, int ns_iterations = linalg::kDefaultNsIterations);

}  // namespace privpool::pooling
