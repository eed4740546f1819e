#pragma once

#include <string>
#include <vector>

#include "privpool/data.hpp"
#include "privpool/model.hpp"

namespace privpool::eval {

struct SplitReport {
  std::string split;
  std::size_t samples = 0;
  double top1 = 0;
  std::vector<double> per_class;     // NaN-free: classes without support report 0
  std::vector<std::size_t> support;
  double mean_per_class = 0;         // over classes with support > 0
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

/// Builds a report from true and predicted labels.
SplitReport summarize(const std::string& split, const std::vector<int>& labels, const std::vector<int>& predicted,
                      std::size_t classes);

struct EvalReport {
  bool crop_refeed = false;
  SplitReport overall;              // all evaluated samples pooled
  std::vector<SplitReport> splits;  // one per requested split
};

std::string report_to_json(const EvalReport& report);
std::string confusion_to_csv(const SplitReport& report, const std::vector<std::string>& class_names);

/// Half-open pixel box [x0,x1)×[y0,y1).
struct AttentionBox {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool operator==(const AttentionBox&) const = default;
};

/// Mean over the M maps of one sample ([H,W,M] row-major values), bilinear
/// upsampling (pixel-centre aligned, edge-clamped) to size×size, threshold at
/// threshold_frac·max, tight box around the mask; full image if empty.
AttentionBox attention_box(const std::vector<Real>& maps, std::size_t h, std::size_t w, std::size_t m,
                           std::size_t size, double threshold_frac = 0.5);

/// Class probabilities [N,C] for a batch of images. With crop_refeed each
/// image is cropped to its attention box, resized back, classified again and
/// the two softmax outputs are averaged. `boxes` (optional) receives the boxes.
/// threshold_frac = 0 always selects the full image.
Tensor predict(const model::Model& model, const std::vector<const Image*>& images, bool crop_refeed,
               std::vector<AttentionBox>* boxes = nullptr, double threshold_frac = 0.5);

/// Evaluates the named splits; throws if a split is missing or empty.
EvalReport evaluate(const model::Model& model, const data::Dataset& dataset, const std::vector<std::string>& splits,
                    bool crop_refeed, std::size_t batch = 25, double threshold_frac = 0.5);

/// Writes, per sample i: <i>_input.png, <i>_overlay.png (input with the
/// predicted box), one grayscale map per attention map (supervised maps named
/// after the keypoints, complementary maps comp<q>) and <i>_mean.png. Maps are
/// nearest-upsampled to the input size with value v stored as round(255·v).
/// Returns the written paths.
std::vector<std::string> export_attention(const model::Model& model, const std::vector<const data::Sample*>& samples,
                                          const std::vector<std::string>& keypoint_names, const std::string& out_dir);

}  // namespace privpool::eval
