#include "privpool/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

#include "privpool/image.hpp"

namespace privpool::eval {

namespace fs = std::filesystem;
using json = nlohmann::json;

SplitReport summarize(const std::string& split, const std::vector<int>& labels, const std::vector<int>& predicted,
                      std::size_t classes) {
  if (labels.size() != predicted.size()) throw std::invalid_argument("summarize: label/prediction count mismatch");
  SplitReport r;
  r.split = split;
  r.samples = labels.size();
  r.support.assign(classes, 0);
  r.per_class.assign(classes, 0);
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]), p = static_cast<std::size_t>(predicted[i]);
    if (y >= classes || p >= classes) throw std::invalid_argument("summarize: class id out of range");
    ++r.support[y];
    ++r.confusion[y][p];
    correct += y == p ? 1 : 0;
  }
  r.top1 = r.samples ? static_cast<double>(correct) / static_cast<double>(r.samples) : 0;
  double sum = 0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (r.support[c] == 0) continue;
    r.per_class[c] = static_cast<double>(r.confusion[c][c]) / static_cast<double>(r.support[c]);
    sum += r.per_class[c];
    ++present;
  }
  r.mean_per_class = present ? sum / static_cast<double>(present) : 0;
  return r;
}

namespace {

json split_json(const SplitReport& r) {
  return json{{"split", r.split},
              {"samples", r.samples},
              {"top1", r.top1},
              {"mean_per_class", r.mean_per_class},
              {"per_class", r.per_class},
              {"support", r.support},
              {"confusion", r.confusion}};
}

std::vector<Real> sample_maps(const Tensor& maps, std::size_t n) {
  const std::size_t plane = maps.dim(1) * maps.dim(2) * maps.dim(3);
  const auto d = maps.data();
  return {d.begin() + static_cast<long>(n * plane), d.begin() + static_cast<long>((n + 1) * plane)};
}

// Bilinear, pixel-centre aligned, edge-clamped upsampling of the mean map.
std::vector<double> upsampled_mean(const std::vector<Real>& maps, std::size_t h, std::size_t w, std::size_t m,
                                   std::size_t size) {
  std::vector<double> mean(h * w, 0);
  for (std::size_t i = 0; i < h * w; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < m; ++k) s += maps[i * m + k];
    mean[i] = s / static_cast<double>(m);
  }
  std::vector<double> up(size * size);
  auto coord = [size](std::size_t o, std::size_t cells, std::size_t& i0, std::size_t& i1, double& t) {
    const double f = std::clamp((static_cast<double>(o) + 0.5) * static_cast<double>(cells) / static_cast<double>(size) - 0.5,
                                0.0, static_cast<double>(cells - 1));
    i0 = static_cast<std::size_t>(f);
    i1 = std::min(i0 + 1, cells - 1);
    t = f - static_cast<double>(i0);
  };
  for (std::size_t oy = 0; oy < size; ++oy) {
    std::size_t y0, y1;
    double ty;
    coord(oy, h, y0, y1, ty);
    for (std::size_t ox = 0; ox < size; ++ox) {
      std::size_t x0, x1;
      double tx;
      coord(ox, w, x0, x1, tx);
      const double top = mean[y0 * w + x0] * (1 - tx) + mean[y0 * w + x1] * tx;
      const double bot = mean[y1 * w + x0] * (1 - tx) + mean[y1 * w + x1] * tx;
      up[oy * size + ox] = top * (1 - ty) + bot * ty;
    }
  }
  return up;
}

std::uint8_t to_gray(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

std::string report_to_json(const EvalReport& report) {
  json j{{"crop_refeed", report.crop_refeed}, {"overall", split_json(report.overall)}, {"splits", json::array()}};
  for (const auto& s : report.splits) j["splits"].push_back(split_json(s));
  return j.dump(2);
}

std::string confusion_to_csv(const SplitReport& report, const std::vector<std::string>& names) {
  std::ostringstream os;
  os << "true\\predicted";
  for (const auto& n : names) os << ',' << n;
  os << '\n';
  for (std::size_t i = 0; i < report.confusion.size(); ++i) {
    os << names.at(i);
    for (auto v : report.confusion[i]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

AttentionBox attention_box(const std::vector<Real>& maps, std::size_t h, std::size_t w, std::size_t m,
                           std::size_t size, double threshold_frac) {
  if (maps.size() != h * w * m || m == 0 || size == 0)
    throw std::invalid_argument("attention_box: maps do not match [" + std::to_string(h) + "," + std::to_string(w) + "," +
                                std::to_string(m) + "]");
  const auto up = upsampled_mean(maps, h, w, m, size);
  const double peak = *std::max_element(up.begin(), up.end());
  const double threshold = threshold_frac * peak;
  AttentionBox box{size, size, 0, 0};
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      if (!(up[y * size + x] >= threshold)) continue;
      box.x0 = std::min(box.x0, x);
      box.y0 = std::min(box.y0, y);
      box.x1 = std::max(box.x1, x + 1);
      box.y1 = std::max(box.y1, y + 1);
    }
  if (box.x1 == 0) return {0, 0, size, size};
  return box;
}

Tensor predict(const model::Model& model, const std::vector<const Image*>& images, bool crop_refeed,
               std::vector<AttentionBox>* boxes, double threshold_frac) {
  const auto out = model.forward(images_to_tensor(images));
  const Tensor proba = softmax(out.logits.detach());
  if (!crop_refeed) return proba;
  if (!out.stack) throw std::invalid_argument("crop re-feeding needs an attention pooling mode (avg_pr or cov_pr)");
  const Tensor& maps = out.stack->maps;
  const std::size_t size = model.config().input_size;
  std::vector<Image> crops;
  crops.reserve(images.size());
  if (boxes) boxes->clear();
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto box = attention_box(sample_maps(maps, n), maps.dim(1), maps.dim(2), maps.dim(3), size,
                                   threshold_frac);
    if (boxes) boxes->push_back(box);
    crops.push_back(crop_resize_bilinear(*images[n], box.x0, box.y0, box.x1, box.y1, size, size));
  }
  std::vector<const Image*> ptrs;
  for (const auto& c : crops) ptrs.push_back(&c);
  const Tensor refed = softmax(model.forward(images_to_tensor(ptrs)).logits.detach());
  return scale(add(proba, refed), Real(0.5));
}

EvalReport evaluate(const model::Model& model, const data::Dataset& dataset, const std::vector<std::string>& splits,
                    bool crop_refeed, std::size_t batch, double threshold_frac) {
  if (batch == 0) throw std::invalid_argument("evaluate: batch must be positive");
  const std::size_t classes = model.config().num_classes;
  if (classes != dataset.manifest.classes.size())
    throw std::invalid_argument("evaluate: model has " + std::to_string(classes) + " classes, dataset has " +
                                std::to_string(dataset.manifest.classes.size()));
  EvalReport report;
  report.crop_refeed = crop_refeed;
  std::vector<int> all_labels, all_pred;
  for (const auto& name : splits) {
    const auto idx = dataset.split(name);
    std::vector<int> labels, pred;
    for (std::size_t start = 0; start < idx.size(); start += batch) {
      const std::size_t end = std::min(idx.size(), start + batch);
      std::vector<const Image*> images;
      for (std::size_t i = start; i < end; ++i) {
        images.push_back(&dataset.samples[idx[i]].image);
        labels.push_back(dataset.samples[idx[i]].label);
      }
      const Tensor p = predict(model, images, crop_refeed, nullptr, threshold_frac);
      const auto d = p.data();
      for (std::size_t n = 0; n < images.size(); ++n) {
        const auto row = d.subspan(n * classes, classes);
        pred.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
      }
    }
    report.splits.push_back(summarize(name, labels, pred, classes));
    all_labels.insert(all_labels.end(), labels.begin(), labels.end());
    all_pred.insert(all_pred.end(), pred.begin(), pred.end());
  }
  std::string joined;
  for (const auto& s : splits) joined += (joined.empty() ? "" : "+") + s;
  report.overall = summarize(joined, all_labels, all_pred, classes);
  return report;
}

std::vector<std::string> export_attention(const model::Model& model, const std::vector<const data::Sample*>& samples,
                                          const std::vector<std::string>& keypoint_names, const std::string& out_dir) {
  const auto& mc = model.config();
  if (!pooling::uses_attention(mc.pool))
    throw std::invalid_argument("export_attention: model uses pooling mode '" + pooling::to_string(mc.pool) +
                                "' which has no attention maps");
  if (keypoint_names.size() != mc.supervised_maps)
    throw std::invalid_argument("export_attention: " + std::to_string(keypoint_names.size()) + " keypoint names for " +
                                std::to_string(mc.supervised_maps) + " supervised maps");
  fs::create_directories(out_dir);
  const std::size_t size = mc.input_size;
  std::vector<std::string> written;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Image& image = samples[i]->image;
    const auto out = model.forward(images_to_tensor({&image}));
    const Tensor& maps = out.stack->maps;
    const std::size_t h = maps.dim(1), w = maps.dim(2), m = maps.dim(3);
    const auto values = sample_maps(maps, 0);
    const auto box = attention_box(values, h, w, m, size);
    const std::string stem = (fs::path(out_dir) / std::to_string(i)).string();
    auto emit_gray = [&](const std::string& suffix, const std::vector<double>& cells) {
      std::vector<std::uint8_t> px(size * size);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) px[y * size + x] = to_gray(cells[(y * h / size) * w + x * w / size]);
      const std::string path = stem + "_" + suffix + ".png";
      write_gray_png(path, size, size, px);
      written.push_back(path);
    };

    write_png(stem + "_input.png", image);
    written.push_back(stem + "_input.png");
    Image overlay = image;
    for (std::size_t x = box.x0; x < box.x1; ++x)
      for (std::size_t y : {box.y0, box.y1 - 1}) {
        auto* p = overlay.at(x, y);
        p[0] = 255, p[1] = 0, p[2] = 0;
      }
    for (std::size_t y = box.y0; y < box.y1; ++y)
      for (std::size_t x : {box.x0, box.x1 - 1}) {
        auto* p = overlay.at(x, y);
        p[0] = 255, p[1] = 0, p[2] = 0;
      }
    write_png(stem + "_overlay.png", overlay);
    written.push_back(stem + "_overlay.png");

    std::vector<double> mean(h * w, 0);
    for (std::size_t k = 0; k < m; ++k) {
      std::vector<double> cells(h * w);
      for (std::size_t c = 0; c < h * w; ++c) {
        cells[c] = values[c * m + k];
        mean[c] += cells[c] / static_cast<double>(m);
      }
      emit_gray(k < mc.supervised_maps ? keypoint_names[k] : "comp" + std::to_string(k - mc.supervised_maps), cells);
    }
    emit_gray("mean", mean);
  }
  return written;
}

}  // namespace privpool::eval
