#include "privpool/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace privpool::nn {

double glorot_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

Tensor uniform_param(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Real> v(numel(shape));
  for (auto& x : v) x = static_cast<Real>(dist(rng));
  return Tensor::from(std::move(shape), std::move(v), true);
}

Conv2dLayer::Conv2dLayer(const Conv2dSpec& spec, std::mt19937_64& rng) : spec_(spec) {
  if (spec.kernel % 2 == 0) throw std::invalid_argument("Conv2dLayer: kernel size must be odd");
  if (spec.in_channels == 0 || spec.out_channels == 0 || spec.stride == 0)
    throw std::invalid_argument("Conv2dLayer: channels and stride must be positive");
  const std::size_t k2 = spec.kernel * spec.kernel;
  const double bound = glorot_bound(k2 * spec.in_channels, k2 * spec.out_channels);
  kernel_ = uniform_param({spec.kernel, spec.kernel, spec.in_channels, spec.out_channels}, bound, rng);
  bias_ = Tensor::zeros({spec.out_channels}, true);
}

Tensor Conv2dLayer::forward(const Tensor& x) const {
  if (x.ndim() != 4 || x.dim(3) != spec_.in_channels)
    throw std::invalid_argument("Conv2dLayer: expected " + std::to_string(spec_.in_channels) +
                                " input channels, got input " + shape_str(x.shape()));
  return add_bias(conv2d(x, kernel_, spec_.stride, spec_.pad), bias_);
}

void Conv2dLayer::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  out.push_back({prefix + ".kernel", &kernel_});
  out.push_back({prefix + ".bias", &bias_});
}

LinearLayer::LinearLayer(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  if (in == 0 || out == 0) throw std::invalid_argument("LinearLayer: sizes must be positive");
  weight_ = uniform_param({in, out}, glorot_bound(in, out), rng);
  bias_ = Tensor::zeros({out}, true);
}

Tensor LinearLayer::forward(const Tensor& x) const {
  if (x.ndim() != 2 || x.dim(1) != weight_.dim(0))
    throw std::invalid_argument("LinearLayer: expected [N," + std::to_string(weight_.dim(0)) + "], got " +
                                shape_str(x.shape()));
  return add_bias(matmul(x, weight_), bias_);
}

void LinearLayer::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  out.push_back({prefix + ".weight", &weight_});
  out.push_back({prefix + ".bias", &bias_});
}

}  // namespace privpool::nn
