#include "privpool/attention.hpp"

#include <stdexcept>

namespace privpool::attention {

Tensor AttentionStack::supervised_maps() const { return slice(maps, 3, 0, supervised); }

Tensor AttentionStack::complementary_maps() const { return slice(maps, 3, supervised, complementary); }

AttentionHead::AttentionHead(std::size_t channels, std::size_t supervised, std::size_t complementary,
                             std::mt19937_64& rng)
    : supervised_(supervised), complementary_(complementary) {
  if (supervised == 0 || complementary == 0)
    throw std::invalid_argument("AttentionHead: needs K >= 1 supervised and Q >= 1 complementary maps");
  const std::size_t mid = std::max<std::size_t>(1, channels / 4);
  hidden_ = nn::Conv2dLayer({channels, mid, 3, 1, 1}, rng);
  output_ = nn::Conv2dLayer({mid, supervised + complementary, 3, 1, 1}, rng);
}

AttentionStack AttentionHead::forward(const Tensor& features) const {
  const Tensor h = relu(hidden_.forward(features));
  return {sigmoid(output_.forward(h)), supervised_, complementary_};
}

void AttentionHead::collect(const std::string& prefix, std::vector<nn::NamedParam>& out) {
  hidden_.collect(prefix + ".hidden", out);
  output_.collect(prefix + ".output", out);
}

Tensor bce_terms(const Tensor& attention, const Tensor& target) {
  if (attention.shape() != target.shape())
    throw std::invalid_argument("bce_loss: shape mismatch " + shape_str(attention.shape()) + " vs " +
                                shape_str(target.shape()));
  const Tensor a = clamp(attention, kLogClamp, Real(1) - kLogClamp);
  const Tensor one_minus_a = add_scalar(scale(a, -1), 1);
  const Tensor one_minus_x = add_scalar(scale(target, -1), 1);
  return scale(add(mul(target, log(a)), mul(one_minus_x, log(one_minus_a))), -1);
}

Tensor bce_loss(const Tensor& attention, const Tensor& target) { return mean_all(bce_terms(attention, target)); }

void validate_scales(const std::vector<std::size_t>& scales) {
  if (scales.empty()) throw std::invalid_argument("attention loss: at least one scale is required");
  for (auto k : scales)
    if (k % 2 == 0)
      throw std::invalid_argument("attention loss: max-pool kernel sizes must be odd, got " + std::to_string(k));
}

Tensor multiscale_attention_loss(const Tensor& attention, const Tensor& target,
                                 const std::vector<std::size_t>& scales) {
  if (attention.ndim() != 2 || attention.shape() != target.shape())
    throw std::invalid_argument("multiscale_attention_loss: expects two [H,W] maps, got " +
                                shape_str(attention.shape()) + " and " + shape_str(target.shape()));
  const Shape nhwc{1, attention.dim(0), attention.dim(1), 1};
  return reshape(multiscale_attention_loss_batched(reshape(attention, nhwc), reshape(target, nhwc), scales), {1});
}

Tensor multiscale_attention_loss_batched(const Tensor& attention, const Tensor& target,
                                         const std::vector<std::size_t>& scales) {
  validate_scales(scales);
  if (attention.ndim() != 4 || attention.shape() != target.shape())
    throw std::invalid_argument("multiscale_attention_loss: expects matching [N,H,W,K], got " +
                                shape_str(attention.shape()) + " and " + shape_str(target.shape()));
  Tensor total;
  for (auto k : scales) {
    const Tensor a = k == 1 ? attention : maxpool2d(attention, k, 1, k / 2);
    const Tensor x = k == 1 ? target : maxpool2d(target, k, 1, k / 2);
    const Tensor term = mean(bce_terms(a, x), {1, 2});  // [N,K]
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Tensor variance_regularizer(const Tensor& map) {
  const Tensor abar = mean_all(map);
  return mul(abar, add_scalar(scale(abar, -1), 1));
}

LossTerms total_loss(const Tensor& logits, std::span<const int> labels, const AttentionStack* stack,
                     const KeypointTargets* targets, const LossConfig& config) {
  LossTerms terms;
  terms.ce = cross_entropy(logits, labels);
  terms.attention = Tensor::scalar(0);
  terms.regularizer = Tensor::scalar(0);
  terms.total = terms.ce;
  if (!stack) return terms;

  const std::size_t n = stack->maps.dim(0);
  const Real k = static_cast<Real>(stack->supervised);
  if (config.keypoint_loss && targets) {
    if (targets->annotated.size() != n)
      throw std::invalid_argument("total_loss: annotation mask does not match batch size");
    std::size_t annotated = 0;
    for (bool a : targets->annotated) annotated += a ? 1 : 0;
    if (annotated > 0) {
      const Tensor per_map = multiscale_attention_loss_batched(stack->supervised_maps(), targets->maps,
                                                               config.scales);  // [N,K]
      const Tensor per_sample = scale(sum(per_map, {1}), Real(1) / k);   // [N]
      std::vector<Real> weights(n, 0);
      for (std::size_t i = 0; i < n; ++i)
        if (targets->annotated[i]) weights[i] = Real(1) / static_cast<Real>(annotated);
      terms.attention = sum_all(mul(per_sample, Tensor::from({n}, std::move(weights))));
    }
  }
  if (config.variance_regularizer && stack->complementary > 0) {
    const Tensor abar = mean(stack->complementary_maps(), {1, 2});  // [N,Q]
    const Tensor var = mul(abar, add_scalar(scale(abar, -1), 1));
    terms.regularizer = scale(sum_all(var), Real(1) / static_cast<Real>(n * stack->complementary));
  }
  terms.total = sub(add(terms.ce, terms.attention), terms.regularizer);
  return terms;
}

}  // namespace privpool::attention
