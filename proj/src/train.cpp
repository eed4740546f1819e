#include "privpool/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <random>
#include <stdexcept>

#include "privpool/image.hpp"

namespace privpool::train {

namespace fs = std::filesystem;
using json = nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("TrainConfig: lr must be positive");
  if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("TrainConfig: momentum must lie in [0,1)");
  if (!(weight_decay >= 0)) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
  if (batch == 0) throw std::invalid_argument("TrainConfig: batch must be positive");
  if (!(backbone_lr_multiplier >= 0)) throw std::invalid_argument("TrainConfig: backbone_lr_multiplier must be >= 0");
  if (!(decay_factor > 0 && decay_factor <= 1)) throw std::invalid_argument("TrainConfig: decay_factor must lie in (0,1]");
  if (decay_every == 0) throw std::invalid_argument("TrainConfig: decay_every must be >= 1");
  if (epochs == 0) throw std::invalid_argument("TrainConfig: epochs must be positive");
  attention::validate_scales(loss.scales);
}

std::string train_config_to_json(const TrainConfig& c) {
  return json{{"lr", c.lr},
              {"momentum", c.momentum},
              {"weight_decay", c.weight_decay},
              {"batch", c.batch},
              {"backbone_lr_multiplier", c.backbone_lr_multiplier},
              {"decay_factor", c.decay_factor},
              {"decay_every", c.decay_every},
              {"epochs", c.epochs},
              {"seed", c.seed},
              {"augment", c.augment},
              {"scales", c.loss.scales},
              {"keypoint_loss", c.loss.keypoint_loss},
              {"variance_regularizer", c.loss.variance_regularizer},
              {"checkpoint_every", c.checkpoint_every},
              {"log_wall_time", c.log_wall_time}}
      .dump(2);
}

TrainConfig train_config_from_json(const std::string& text, TrainConfig c) {
  const json j = json::parse(text);
  for (const auto& [key, v] : j.items()) {
    if (key == "lr") c.lr = v.get<double>();
    else if (key == "momentum") c.momentum = v.get<double>();
    else if (key == "weight_decay") c.weight_decay = v.get<double>();
    else if (key == "batch") c.batch = v.get<std::size_t>();
    else if (key == "backbone_lr_multiplier") c.backbone_lr_multiplier = v.get<double>();
    else if (key == "decay_factor") c.decay_factor = v.get<double>();
    else if (key == "decay_every") c.decay_every = v.get<std::size_t>();
    else if (key == "epochs") c.epochs = v.get<std::size_t>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "augment") c.augment = v.get<bool>();
    else if (key == "scales") c.loss.scales = v.get<std::vector<std::size_t>>();
    else if (key == "keypoint_loss") c.loss.keypoint_loss = v.get<bool>();
    else if (key == "variance_regularizer") c.loss.variance_regularizer = v.get<bool>();
    else if (key == "checkpoint_every") c.checkpoint_every = v.get<std::size_t>();
    else if (key == "log_wall_time") c.log_wall_time = v.get<bool>();
    else throw std::invalid_argument("unknown training option '" + key + "'");
  }
  return c;
}

double learning_rate(const TrainConfig& cfg, std::size_t iteration) {
  return cfg.lr * std::pow(cfg.decay_factor, static_cast<double>(iteration / cfg.decay_every));
}

void sgd_update(std::span<Real> p, std::span<const Real> g, std::span<Real> v, double lr, double momentum,
                double weight_decay) {
  if (g.size() != p.size() || v.size() != p.size()) throw std::invalid_argument("sgd_update: size mismatch");
  const Real m = static_cast<Real>(momentum), wd = static_cast<Real>(weight_decay), step = static_cast<Real>(lr);
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = m * v[i] + (g[i] + wd * p[i]);
    p[i] -= step * v[i];
  }
}

void sgd_step(std::vector<model::ParamEntry>& params, SgdState& state, const TrainConfig& cfg) {
  for (const auto& p : params) {
    if (!p.tensor->has_grad()) continue;
    for (Real g : p.tensor->grad())
      if (std::isnan(g)) throw std::runtime_error("NaN gradient in parameter '" + p.name + "' at iteration " +
                                                  std::to_string(state.iteration));
  }
  if (state.velocity.size() != params.size()) state.velocity.resize(params.size());
  const double lr = learning_rate(cfg, state.iteration);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& t = *params[i].tensor;
    auto& v = state.velocity[i];
    if (v.size() != t.size()) v.assign(t.size(), Real(0));
    std::vector<Real> zeros;
    std::span<const Real> g;
    if (t.has_grad()) {
      g = t.grad();
    } else {
      zeros.assign(t.size(), Real(0));
      g = zeros;
    }
    const double group_lr = params[i].backbone ? lr * cfg.backbone_lr_multiplier : lr;
    sgd_update(t.mutable_data(), g, v, group_lr, cfg.momentum, cfg.weight_decay);
  }
  ++state.iteration;
}

std::string metrics_line(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g,%.10g,%.10g,%.10g,%.3f", r.iteration, r.lr, r.ce, r.attn, r.reg,
                r.total, r.wall_ms);
  return buf;
}

TrainResult train_loop(model::Model& model, const data::Dataset& dataset, const TrainConfig& cfg,
                       const std::string& out_dir, const std::function<void(const MetricsRow&)>& on_step) {
  cfg.validate();
  const auto& mc = model.config();
  const auto train_idx = dataset.split("train");
  const std::size_t keypoints = dataset.manifest.keypoint_names.size();
  const bool attention = pooling::uses_attention(mc.pool);
  if (attention && mc.supervised_maps != keypoints)
    throw std::invalid_argument("model has K=" + std::to_string(mc.supervised_maps) + " supervised maps but the dataset has " +
                                std::to_string(keypoints) + " keypoints");
  if (mc.num_classes != dataset.manifest.classes.size())
    throw std::invalid_argument("model has " + std::to_string(mc.num_classes) + " classes but the dataset has " +
                                std::to_string(dataset.manifest.classes.size()));

  std::ofstream metrics;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    metrics.open(fs::path(out_dir) / "metrics.csv", std::ios::binary);
    if (!metrics) throw std::runtime_error("cannot write metrics.csv in " + out_dir);
    metrics << kMetricsHeader << '\n';
  }

  auto params = model.parameters();
  SgdState state;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_idx);
  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      std::vector<data::Sample> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = dataset.samples[order[i]];
        batch.push_back(cfg.augment ? data::augment(s, rng) : s);
      }
      std::vector<const Image*> images;
      std::vector<const data::Sample*> ptrs;
      std::vector<int> labels;
      for (const auto& s : batch) {
        images.push_back(&s.image);
        ptrs.push_back(&s);
        labels.push_back(s.label);
      }
      const Tensor x = images_to_tensor(images);
      const auto out = model.forward(x, true);
      attention::KeypointTargets targets;
      if (attention) targets = data::make_targets(ptrs, keypoints, mc.feature_size());
      const auto terms = attention::total_loss(out.logits, labels, out.stack ? &*out.stack : nullptr,
                                               attention ? &targets : nullptr, cfg.loss);
      for (auto& p : params) p.tensor->zero_grad();
      terms.total.backward();

      MetricsRow row;
      row.iteration = state.iteration;
      row.lr = learning_rate(cfg, state.iteration);
      row.ce = terms.ce.item();
      row.attn = terms.attention.item();
      row.reg = terms.regularizer.item();
      row.total = terms.total.item();
      if (!std::isfinite(row.total))
        throw std::runtime_error("non-finite loss at iteration " + std::to_string(state.iteration));
      sgd_step(params, state, cfg);
      if (cfg.log_wall_time)
        row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      if (metrics) metrics << metrics_line(row) << '\n';
      if (on_step) on_step(row);
      result.history.push_back(row);
    }
    if (!out_dir.empty() && cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs)
      model.save((fs::path(out_dir) / ("checkpoint_epoch" + std::to_string(epoch))).string());
  }
  for (auto& p : params) p.tensor->zero_grad();
  if (!out_dir.empty()) model.save((fs::path(out_dir) / "checkpoint").string());
  result.iterations = state.iteration;
  return result;
}

}  // namespace privpool::train
