#pragma once

#include <random>
#include <vector>

#include "privpool/nn.hpp"
#include "privpool/tensor.hpp"

namespace privpool::attention {

inline constexpr Real kLogClamp = Real(1e-7);

/// K keypoint-supervised maps followed by Q complementary maps.
struct AttentionStack {
  Tensor maps;  // [N,H,W,M], sigmoid outputs
  std::size_t supervised = 0;     // K
  std::size_t complementary = 0;  // Q

  std::size_t count() const { return supervised + complementary; }
  Tensor supervised_maps() const;     // [N,H,W,K]
  Tensor complementary_maps() const;  // [N,H,W,Q]
};

/// Binary keypoint maps at feature resolution.
struct KeypointTargets {
  Tensor maps;                 // [N,H,W,K]
  std::vector<bool> visible;   // N*K, row-major
  std::vector<bool> annotated; // N; false = sample carries no keypoints at all
};

/// Two same-padded 3×3 convs (D -> max(1,D/4), ReLU, -> M) and a sigmoid.
class AttentionHead {
 public:
  AttentionHead() = default;
  AttentionHead(std::size_t channels, std::size_t supervised, std::size_t complementary, std::mt19937_64& rng);

  AttentionStack forward(const Tensor& features) const;

  nn::Conv2dLayer& hidden() { return hidden_; }
  nn::Conv2dLayer& output() { return output_; }
  void collect(const std::string& prefix, std::vector<nn::NamedParam>& out);

 private:
  nn::Conv2dLayer hidden_;
  nn::Conv2dLayer output_;
  std::size_t supervised_ = 0;
  std::size_t complementary_ = 0;
};

/// Mean binary cross-entropy −(1/n)Σ[x log a + (1−x) log(1−a)], with a
/// clamped to [1e-7, 1−1e-7]. Any matching shapes; reduces over all elements.
Tensor bce_loss(const Tensor& attention, const Tensor& target);

/// Elementwise BCE terms (same shape as inputs), before averaging.
Tensor bce_terms(const Tensor& attention, const Tensor& target);

/// Throws unless every scale is an odd kernel size.
void validate_scales(const std::vector<std::size_t>& scales);

/// Σ_j bce(maxpool_j(a), maxpool_j(x*)) for one map pair [H,W], stride-1
/// same-padded max-pools with the given odd kernel sizes.
Tensor multiscale_attention_loss(const Tensor& attention, const Tensor& target,
                                 const std::vector<std::size_t>& scales = {1, 3, 7});

/// Per-sample, per-map multi-scale loss for batched maps [N,H,W,K] -> [N,K].
Tensor multiscale_attention_loss_batched(const Tensor& attention, const Tensor& target,
                                         const std::vector<std::size_t>& scales);

/// ā(1−ā) for a single map (any shape); in [0, 0.25].
Tensor variance_regularizer(const Tensor& map);

struct LossConfig {
  std::vector<std::size_t> scales{1, 3, 7};
  bool keypoint_loss = true;
  bool variance_regularizer = true;
};

struct LossTerms {
  Tensor total;
  Tensor ce;
  Tensor attention;  // keypoint term, averaged over K and annotated samples
  Tensor regularizer;  // (1/Q)Σ ā(1−ā), batch mean; enters total with a minus sign
};

/// CE + (1/K)Σ_k l_attention − (1/Q)Σ_q l_reg. Attention terms come only from
/// annotated samples; `targets` may be null when no supervision is available.
LossTerms total_loss(const Tensor& logits, std::span<const int> labels, const AttentionStack* stack,
                     const KeypointTargets* targets, const LossConfig& config = {});

}  // namespace privpool::attention
