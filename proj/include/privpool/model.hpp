#pragma once

#include <optional>
#include <string>
#include <vector>

#include "privpool/attention.hpp"
#include "privpool/nn.hpp"
#include "privpool/pooling.hpp"

namespace privpool::model {

struct ModelConfig {
  std::vector<std::size_t> widths{16, 32, 64, 128};  // one conv+ReLU+maxpool(2) block each
  std::size_t input_size = 64;
  std::size_t supervised_maps = 3;     // K
  std::size_t complementary_maps = 1;  // Q
  pooling::PoolMode pool = pooling::PoolMode::AvgPr;
  std::size_t reduced_dim = 64;  // D̃
  std::size_t num_classes = 8;
  int ns_iterations = linalg::kDefaultNsIterations;
  std::uint64_t seed = 0;

  std::size_t feature_size() const;      // spatial side of F
  std::size_t feature_channels() const;  // D
  std::size_t pooled_width() const;      // P
  void validate() const;
};

struct ModelOutput {
  Tensor logits;    // [N,C]
  std::optional<attention::AttentionStack> stack;
  Tensor features;  // F [N,h,w,D]
  Tensor pooled;    // p [N,P]
};

struct ParamEntry {
  std::string name;
  Tensor* tensor;
  bool backbone;
};

class Model {
 public:
  explicit Model(const ModelConfig& config);

  /// x: [N, S, S, 3] with S = input_size.
  ModelOutput forward(const Tensor& x, bool train_mode = false) const;
  /// softmax(logits) rows.
  Tensor predict_proba(const Tensor& x) const;

  const ModelConfig& config() const { return config_; }
  std::vector<ParamEntry> parameters();
  std::size_t parameter_count();

  void save(const std::string& dir);
  static Model load(const std::string& dir);

 private:
  ModelConfig config_;
  std::vector<nn::Conv2dLayer> backbone_;
  std::optional<attention::AttentionHead> head_;
  std::optional<pooling::ChannelReducer> reducer_;
  nn::LinearLayer classifier_;
};

std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

}  // namespace privpool::model
