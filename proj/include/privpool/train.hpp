#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "privpool/attention.hpp"
#include "privpool/data.hpp"
#include "privpool/model.hpp"

namespace privpool::train {

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch = 10;
  double backbone_lr_multiplier = 1.0;  // 0.01 when the backbone is pretrained
  double decay_factor = 0.9;
  std::size_t decay_every = 1000;       // iterations
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  bool augment = true;
  attention::LossConfig loss;
  std::size_t checkpoint_every = 0;     // epochs; 0 = final checkpoint only
  bool log_wall_time = false;           // off keeps metrics.csv reproducible (wall_ms = 0)

  void validate() const;
};

std::string train_config_to_json(const TrainConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig train_config_from_json(const std::string& text, TrainConfig base = {});

/// lr · decay_factor^⌊iteration / decay_every⌋
double learning_rate(const TrainConfig& cfg, std::size_t iteration);

/// One momentum-SGD update of a flat parameter:
/// v ← m·v + (g + wd·p); p ← p − lr·v.
void sgd_update(std::span<Real> param, std::span<const Real> grad, std::span<Real> velocity, double lr,
                double momentum, double weight_decay);

struct SgdState {
  std::size_t iteration = 0;
  std::vector<std::vector<Real>> velocity;  // one per parameter, zero-initialised lazily
};

/// Applies sgd_update to every parameter with its group learning rate and
/// advances the iteration counter. Parameters without a gradient are treated
/// as g = 0. Throws std::runtime_error naming the first parameter whose
/// gradient holds a NaN, before anything is modified.
void sgd_step(std::vector<model::ParamEntry>& params, SgdState& state, const TrainConfig& cfg);

struct MetricsRow {
  std::size_t iteration = 0;
  double lr = 0;
  double ce = 0;
  double attn = 0;
  double reg = 0;
  double total = 0;
  double wall_ms = 0;
};

inline constexpr const char* kMetricsHeader = "iteration,lr,ce,attn,reg,total,wall_ms";
std::string metrics_line(const MetricsRow& row);

struct TrainResult {
  std::vector<MetricsRow> history;
  std::size_t iterations = 0;
};

/// Trains on the "train" split. With a non-empty `out_dir` writes
/// metrics.csv, checkpoint/ (final) and checkpoint_epoch<E>/ every
/// checkpoint_every epochs. `on_step` (optional) sees every logged row.
TrainResult train_loop(model::Model& model, const data::Dataset& dataset, const TrainConfig& cfg,
                       const std::string& out_dir = {},
                       const std::function<void(const MetricsRow&)>& on_step = {});

}  // namespace privpool::train
