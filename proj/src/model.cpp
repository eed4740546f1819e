#include "privpool/model.hpp"

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <random>
#include <stdexcept>

namespace privpool::model {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::size_t ModelConfig::feature_size() const { return input_size >> widths.size(); }

std::size_t ModelConfig::feature_channels() const { return widths.empty() ? 3 : widths.back(); }

std::size_t ModelConfig::pooled_width() const {
  const std::size_t m = supervised_maps + complementary_maps;
  switch (pool) {
    case pooling::PoolMode::Avg: return feature_channels();
    case pooling::PoolMode::AvgPr: return 2 * m * feature_channels();
    case pooling::PoolMode::Cov:
    case pooling::PoolMode::CovPr: return reduced_dim * reduced_dim;
  }
  return 0;
}

void ModelConfig::validate() const {
  if (widths.empty()) throw std::invalid_argument("ModelConfig: backbone needs at least one block");
  const std::size_t stride = std::size_t{1} << widths.size();
  if (input_size == 0 || input_size % stride != 0)
    throw std::invalid_argument("ModelConfig: input size " + std::to_string(input_size) +
                                " is not divisible by the backbone stride " + std::to_string(stride));
  if (num_classes < 2) throw std::invalid_argument("ModelConfig: need at least 2 classes");
  if (pooling::uses_attention(pool) && (supervised_maps == 0 || complementary_maps == 0))
    throw std::invalid_argument("ModelConfig: attention pooling needs K >= 1 and Q >= 1");
  if (pooling::uses_covariance(pool) && (reduced_dim == 0 || reduced_dim > feature_channels()))
    throw std::invalid_argument("ModelConfig: reduced_dim must be in [1, D]");
  if (ns_iterations < 1) throw std::invalid_argument("ModelConfig: ns_iterations must be >= 1");
}

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  std::size_t in = 3;
  for (auto width : config_.widths) {
    backbone_.emplace_back(nn::Conv2dSpec{in, width, 3, 1, 1}, rng);
    in = width;
  }
  if (pooling::uses_attention(config_.pool))
    head_.emplace(in, config_.supervised_maps, config_.complementary_maps, rng);
  if (pooling::uses_covariance(config_.pool)) reducer_.emplace(in, config_.reduced_dim, rng);
  classifier_ = nn::LinearLayer(config_.pooled_width(), config_.num_classes, rng);
}

ModelOutput Model::forward(const Tensor& x, bool /*train_mode*/) const {
  const std::size_t s = config_.input_size;
  if (x.ndim() != 4 || x.dim(1) != s || x.dim(2) != s || x.dim(3) != 3)
    throw std::invalid_argument("Model::forward: expected input [N," + std::to_string(s) + "," + std::to_string(s) +
                                ",3], got " + shape_str(x.shape()));
  ModelOutput out;
  Tensor h = x;
  for (const auto& conv : backbone_) h = maxpool2d(relu(conv.forward(h)), 2, 2, 0);
  out.features = h;
  switch (config_.pool) {
    case pooling::PoolMode::Avg:
      out.pooled = pooling::avg_pool(h);
      break;
    case pooling::PoolMode::Cov:
      out.pooled = pooling::cov_pool(reducer_->forward(h), config_.ns_iterations);
      break;
    case pooling::PoolMode::AvgPr:
      out.stack = head_->forward(h);
      out.pooled = pooling::avg_pr_pool(pooling::expand(h, out.stack->maps));
      break;
    case pooling::PoolMode::CovPr:
      out.stack = head_->forward(h);
      out.pooled = pooling::cov_pool(reducer_->forward(pooling::expand(h, out.stack->maps)), config_.ns_iterations);
      break;
  }
  out.logits = classifier_.forward(out.pooled);
  return out;
}

Tensor Model::predict_proba(const Tensor& x) const { return softmax(forward(x).logits.detach()); }

std::vector<ParamEntry> Model::parameters() {
  std::vector<nn::NamedParam> named;
  for (std::size_t i = 0; i < backbone_.size(); ++i) backbone_[i].collect("backbone.conv" + std::to_string(i), named);
  const std::size_t backbone_count = named.size();
  if (head_) head_->collect("attention", named);
  if (reducer_) reducer_->collect("reduce", named);
  classifier_.collect("classifier", named);
  std::vector<ParamEntry> out;
  for (std::size_t i = 0; i < named.size(); ++i) out.push_back({named[i].name, named[i].tensor, i < backbone_count});
  return out;
}

std::size_t Model::parameter_count() {
  std::size_t n = 0;
  for (auto& p : parameters()) n += p.tensor->size();
  return n;
}

std::string config_to_json(const ModelConfig& c) {
  json j{{"widths", c.widths},
         {"input_size", c.input_size},
         {"supervised_maps", c.supervised_maps},
         {"complementary_maps", c.complementary_maps},
         {"pool", pooling::to_string(c.pool)},
         {"reduced_dim", c.reduced_dim},
         {"num_classes", c.num_classes},
         {"ns_iterations", c.ns_iterations},
         {"seed", c.seed}};
  return j.dump(2);
}

ModelConfig config_from_json(const std::string& text) {
  const json j = json::parse(text);
  ModelConfig c;
  c.widths = j.at("widths").get<std::vector<std::size_t>>();
  c.input_size = j.at("input_size").get<std::size_t>();
  c.supervised_maps = j.at("supervised_maps").get<std::size_t>();
  c.complementary_maps = j.at("complementary_maps").get<std::size_t>();
  c.pool = pooling::parse_pool_mode(j.at("pool").get<std::string>());
  c.reduced_dim = j.at("reduced_dim").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.ns_iterations = j.at("ns_iterations").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

void Model::save(const std::string& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["config"] = json::parse(config_to_json(config_));
  manifest["tensors"] = json::array();
  for (auto& p : parameters()) {
    const std::string file = p.name + ".ptns";
    save_tensor((fs::path(dir) / file).string(), *p.tensor);
    manifest["tensors"].push_back({{"name", p.name}, {"file", file}, {"shape", p.tensor->shape()}});
  }
  std::ofstream os(fs::path(dir) / "model.json");
  if (!os) throw std::runtime_error("cannot write checkpoint manifest in " + dir);
  os << manifest.dump(2) << '\n';
}

Model Model::load(const std::string& dir) {
  const fs::path manifest_path = fs::path(dir) / "model.json";
  std::ifstream is(manifest_path);
  if (!is) throw std::runtime_error("checkpoint not found: " + manifest_path.string());
  const json manifest = json::parse(is);
  Model model(config_from_json(manifest.at("config").dump()));
  for (auto& p : model.parameters()) {
    const fs::path file = fs::path(dir) / (p.name + ".ptns");
    const Tensor t = load_tensor(file.string());
    if (t.shape() != p.tensor->shape())
      throw std::runtime_error("checkpoint tensor " + p.name + " has shape " + shape_str(t.shape()) + ", expected " +
                               shape_str(p.tensor->shape()));
    auto dst = p.tensor->mutable_data();
    std::copy(t.data().begin(), t.data().end(), dst.begin());
  }
  return model;
}

}  // namespace privpool::model
