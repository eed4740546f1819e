#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "privpool/attention.hpp"
#include "privpool/image.hpp"

namespace privpool::data {

inline const std::vector<std::string> kSplits{"train", "val_cis", "val_trans", "test_cis", "test_trans"};
inline const std::vector<std::string> kKeypointNames{"head", "body", "tail"};
inline constexpr std::size_t kTrainContexts = 8;
inline constexpr std::size_t kHeldOutContexts = 4;

struct GenConfig {
  std::size_t classes = 8;
  std::size_t per_class = 20;       // train samples per class
  std::size_t val_per_class = 10;   // per val split
  std::size_t test_per_class = 25;  // per test split
  std::size_t image_size = 64;
  double bias = 0.9;                // β: P(context = class's preferred context) on cis splits
  std::uint64_t seed = 0;
  double keypoint_fraction = 1.0;   // share of train samples that keep their keypoints

  void validate() const;
};

std::string gen_config_to_json(const GenConfig& cfg);
GenConfig gen_config_from_json(const std::string& text);

struct Keypoint {
  std::string name;
  double x = 0;  // pixel units, x to the right
  double y = 0;  // pixel units, y downwards
  bool visible = false;
};

struct Sample {
  Image image;
  int label = 0;
  std::optional<std::vector<Keypoint>> keypoints;  // absent = no privileged info
  std::string split;
  std::string path;  // relative to the dataset root
  int context_id = 0;
};

struct DatasetManifest {
  std::vector<std::string> classes;
  std::vector<std::string> keypoint_names;
  std::map<std::string, std::size_t> splits;  // name -> sample count
  GenConfig config;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> samples;

  /// Indices of the samples in `split`; throws if the split is unknown or empty.
  std::vector<std::size_t> split(const std::string& name) const;
};

/// Builds every split in memory; deterministic in `cfg`.
Dataset generate(const GenConfig& cfg);
/// Writes images/<split>/<index>.png, annotations.jsonl and manifest.json.
void write_dataset(const Dataset& dataset, const std::string& dir);
Dataset load_dataset(const std::string& dir);

std::string sample_to_jsonl(const Sample& sample);
std::string manifest_to_json(const DatasetManifest& manifest);

/// K maps of feature_size² cells: the cell containing each visible keypoint
/// plus its 3×3 neighbourhood set to 1; invisible keypoints give all-zero maps.
/// Returns row-major [h, w, K] values.
std::vector<Real> rasterize_keypoints(const std::vector<Keypoint>& keypoints, std::size_t image_size,
                                      std::size_t feature_size);

/// Batched targets for total_loss; samples without keypoints are marked
/// unannotated and get all-zero maps.
attention::KeypointTargets make_targets(const std::vector<const Sample*>& batch, std::size_t keypoint_count,
                                        std::size_t feature_size);

/// Crops the square window of side scale·S at (x0, y0) and resizes it back to
/// S×S with nearest-neighbour sampling: output pixel i reads source pixel
/// floor(x0 + (i + 0.5)·scale). Keypoints map to (x − x0)/scale and become
/// invisible when they leave the frame.
Sample crop_resize(const Sample& sample, double x0, double y0, double scale);

/// Random scale in [0.5, 1] and random crop position, then crop_resize.
Sample augment(const Sample& sample, std::mt19937_64& rng);

// Dataset diagnostics --------------------------------------------------------

/// Nearest class-centroid classifier on colour histograms of the image border
/// (background only). Fit on the train split.
class TextureOracle {
 public:
  explicit TextureOracle(const Dataset& dataset);
  int predict(const Image& image) const;
  double accuracy(const Dataset& dataset, const std::string& split) const;

 private:
  std::vector<std::vector<double>> centroids_;
};

/// Nearest class-centroid classifier on mean colours of the 5×5 patches at the
/// true head and tail keypoints. Fit on annotated train samples.
class KeypointPatchOracle {
 public:
  explicit KeypointPatchOracle(const Dataset& dataset);
  int predict(const Sample& sample) const;
  double accuracy(const Dataset& dataset, const std::string& split) const;

 private:
  std::vector<std::vector<double>> centroids_;
};

}  // namespace privpool::data
