#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "privpool/tensor.hpp"

namespace privpool::nn {

/// A trainable tensor with a stable checkpoint name.
struct NamedParam {
  std::string name;
  Tensor* tensor;
};

/// Glorot-uniform bound sqrt(6 / (fan_in + fan_out)).
double glorot_bound(std::size_t fan_in, std::size_t fan_out);

struct Conv2dSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;  // odd
  std::size_t stride = 1;
  std::size_t pad = 1;
};

class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(const Conv2dSpec& spec, std::mt19937_64& rng);

  /// x: [N,H,W,Cin] -> [N,H',W',Cout]
  Tensor forward(const Tensor& x) const;

  const Conv2dSpec& spec() const { return spec_; }
  Tensor& kernel() { return kernel_; }
  Tensor& bias() { return bias_; }
  const Tensor& kernel() const { return kernel_; }
  const Tensor& bias() const { return bias_; }
  void collect(const std::string& prefix, std::vector<NamedParam>& out);

 private:
  Conv2dSpec spec_;
  Tensor kernel_;  // [kh,kw,Cin,Cout]
  Tensor bias_;    // [Cout]
};

class LinearLayer {
 public:
  LinearLayer() = default;
  LinearLayer(std::size_t in, std::size_t out, std::mt19937_64& rng);

  /// x: [N,Din] -> [N,Dout]
  Tensor forward(const Tensor& x) const;

  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }
  void collect(const std::string& prefix, std::vector<NamedParam>& out);

 private:
  Tensor weight_;  // [Din,Dout]
  Tensor bias_;    // [Dout]
};

/// Uniform(-bound, bound) samples as a trainable leaf.
Tensor uniform_param(Shape shape, double bound, std::mt19937_64& rng);

}  // namespace privpool::nn
