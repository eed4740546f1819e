#include "privpool/pooling.hpp"

#include <stdexcept>

namespace privpool::pooling {

std::string to_string(PoolMode mode) {
  switch (mode) {
    case PoolMode::Avg: return "avg";
    case PoolMode::AvgPr: return "avg_pr";
    case PoolMode::Cov: return "cov";
    case PoolMode::CovPr: return "cov_pr";
  }
  return "?";
}

PoolMode parse_pool_mode(const std::string& name) {
  if (name == "avg") return PoolMode::Avg;
  if (name == "avg_pr") return PoolMode::AvgPr;
  if (name == "cov") return PoolMode::Cov;
  if (name == "cov_pr") return PoolMode::CovPr;
  throw std::invalid_argument("unknown pool mode '" + name + "' (valid: avg, avg_pr, cov, cov_pr)");
}

bool uses_attention(PoolMode mode) { return mode == PoolMode::AvgPr || mode == PoolMode::CovPr; }

bool uses_covariance(PoolMode mode) { return mode == PoolMode::Cov || mode == PoolMode::CovPr; }

Tensor expand(const Tensor& features, const Tensor& maps) {
  if (features.ndim() != 4 || maps.ndim() != 4 || features.dim(0) != maps.dim(0) ||
      features.dim(1) != maps.dim(1) || features.dim(2) != maps.dim(2))
    throw std::invalid_argument("expand: spatial mismatch between features " + shape_str(features.shape()) +
                                " and attention " + shape_str(maps.shape()));
  const std::size_t n = features.dim(0), h = features.dim(1), w = features.dim(2), d = features.dim(3);
  const std::size_t m = maps.dim(3);
  const Shape full{n, h, w, m, d};
  const Tensor f = broadcast_to(reshape(features, {n, h, w, 1, d}), full);
  const Tensor a = broadcast_to(reshape(maps, {n, h, w, m, 1}), full);
  return mul(f, a);
}

Tensor avg_pool(const Tensor& features) {
  if (features.ndim() != 4) throw std::invalid_argument("avg_pool: expects [N,H,W,D], got " + shape_str(features.shape()));
  return mean(features, {1, 2});
}

Tensor avg_pr_pool(const Tensor& expanded) {
  if (expanded.ndim() != 5)
    throw std::invalid_argument("avg_pr_pool: expects [N,H,W,M,D], got " + shape_str(expanded.shape()));
  const std::size_t n = expanded.dim(0), m = expanded.dim(3), d = expanded.dim(4);
  const Tensor avg = reshape(mean(expanded, {1, 2}), {n, m, 1, d});
  const Tensor mx = reshape(max(expanded, {1, 2}), {n, m, 1, d});
  return reshape(concat({avg, mx}, 2), {n, 2 * m * d});
}

ChannelReducer::ChannelReducer(std::size_t in, std::size_t out, std::mt19937_64& rng) : layer_(in, out, rng) {
  if (out > in) throw std::invalid_argument("ChannelReducer: reduced width must not exceed input width");
}

ChannelReducer ChannelReducer::identity(std::size_t channels) {
  std::mt19937_64 rng(0);
  ChannelReducer r(channels, channels, rng);
  auto w = r.layer_.weight().mutable_data();
  std::fill(w.begin(), w.end(), Real(0));
  for (std::size_t i = 0; i < channels; ++i) w[i * channels + i] = 1;
  return r;
}

Tensor ChannelReducer::forward(const Tensor& x) const {
  const std::size_t in = layer_.weight().dim(0);
  if (x.ndim() < 2 || x.shape().back() != in)
    throw std::invalid_argument("reduce_channels: expected last axis " + std::to_string(in) + ", got " +
                                shape_str(x.shape()));
  const std::size_t rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_channels();
  return reshape(layer_.forward(reshape(x, {rows, in})), std::move(out_shape));
}

void ChannelReducer::collect(const std::string& prefix, std::vector<nn::NamedParam>& out) {
  layer_.collect(prefix, out);
}

Tensor reduce_channels(const Tensor& x, const ChannelReducer& reducer) { return reducer.forward(x); }

Tensor covariance(const Tensor& x) {
  if (x.ndim() < 3) throw std::invalid_argument("covariance: expects [N,...,D], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.shape().back();
  const std::size_t s = x.size() / (n * d);
  if (s < 2) throw std::invalid_argument("covariance: needs at least 2 samples, got " + std::to_string(s));
  const Shape nsd{n, s, d};
  const Tensor samples = reshape(x, nsd);
  const Tensor centered = sub(samples, broadcast_to(mean(samples, {1}, true), nsd));
  const Tensor sigma = scale(bmm(transpose(centered), centered), Real(1) / static_cast<Real>(s));  // [N,D,D]
  const Shape ndd{n, d, d};
  const Tensor eye = broadcast_to(reshape(Tensor::eye(d), {1, d, d}), ndd);
  const Tensor trace = sum(mul(sigma, eye), {1, 2}, true);  // [N,1,1]
  const Tensor ridge = mul(broadcast_to(scale(trace, Real(kRidgeFactor / static_cast<double>(d))), ndd), eye);
  return add(sigma, ridge);
}

Tensor cov_pool(const Tensor& x, int ns_iterations) {
  const Tensor sigma = covariance(x);
  const std::size_t n = sigma.dim(0), d = sigma.dim(1);
  return reshape(linalg::ns_sqrt(sigma, ns_iterations), {n, d * d});
}

}  // namespace privpool::pooling
