#include "privpool/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace privpool::data {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

using Rgb = std::array<double, 3>;

enum class Pattern { Stripes, Checker, Dots, Plaid, Blobs, Rings };

struct Texture {
  Pattern pattern;
  Rgb a;
  Rgb b;
  double period;
  double angle_deg;
};

// Contexts 0..7 appear on cis splits; 8..11 only on trans splits.
const std::array<Texture, kTrainContexts + kHeldOutContexts> kTextures{{
    {Pattern::Stripes, {0.25, 0.55, 0.25}, {0.15, 0.35, 0.15}, 8, 0},
    {Pattern::Checker, {0.85, 0.78, 0.55}, {0.70, 0.60, 0.40}, 8, 0},
    {Pattern::Dots, {0.30, 0.45, 0.80}, {0.70, 0.80, 0.95}, 10, 0},
    {Pattern::Stripes, {0.60, 0.60, 0.60}, {0.35, 0.35, 0.35}, 6, 45},
    {Pattern::Plaid, {0.55, 0.35, 0.60}, {0.85, 0.60, 0.80}, 12, 0},
    {Pattern::Blobs, {0.50, 0.35, 0.20}, {0.75, 0.60, 0.40}, 16, 0},
    {Pattern::Stripes, {0.20, 0.55, 0.55}, {0.50, 0.80, 0.75}, 12, 90},
    {Pattern::Rings, {0.90, 0.55, 0.25}, {0.70, 0.30, 0.15}, 9, 0},
    {Pattern::Dots, {0.50, 0.50, 0.20}, {0.75, 0.75, 0.45}, 7, 0},
    {Pattern::Stripes, {0.15, 0.20, 0.40}, {0.85, 0.85, 0.90}, 9, 135},
    {Pattern::Blobs, {0.40, 0.50, 0.45}, {0.65, 0.75, 0.60}, 10, 0},
    {Pattern::Checker, {0.50, 0.15, 0.20}, {0.85, 0.60, 0.65}, 5, 0},
}};

const Rgb kBodyColor{0.55, 0.50, 0.45};
const std::array<Rgb, 2> kTailColors{{{0.97, 0.97, 0.97}, {0.05, 0.05, 0.05}}};

// Creature geometry at scale 1 for a 64-pixel image.
constexpr double kBodyLength = 11, kBodyWidth = 6.5;
constexpr double kHeadOffset = 14, kHeadRadius = 5;
constexpr double kTailStart = 9, kTailEnd = 21, kTailHalfWidth = 3.5, kTailKeypoint = 15;
constexpr double kExtent = 22;
constexpr double kMargin = 4;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

Rgb hsv(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h * 6.0, 6.0);
  const double x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  Rgb rgb{0, 0, 0};
  if (hp < 1) rgb = {c, x, 0};
  else if (hp < 2) rgb = {x, c, 0};
  else if (hp < 3) rgb = {0, c, x};
  else if (hp < 4) rgb = {0, x, c};
  else if (hp < 5) rgb = {x, 0, c};
  else rgb = {c, 0, x};
  const double m = v - c;
  return {rgb[0] + m, rgb[1] + m, rgb[2] + m};
}

std::size_t head_variants(std::size_t classes) { return (classes + 1) / 2; }

Rgb head_color(int label, std::size_t classes) {
  const std::size_t n = head_variants(classes);
  return hsv(static_cast<double>(static_cast<std::size_t>(label) % n) / static_cast<double>(n), 0.9, 0.95);
}

Rgb tail_color(int label, std::size_t classes) {
  return kTailColors[(static_cast<std::size_t>(label) / head_variants(classes)) % kTailColors.size()];
}

Rgb lerp(const Rgb& a, const Rgb& b, double t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

double frac(double v) { return v - std::floor(v); }

// Smooth value noise on a lattice with the given spacing.
class ValueNoise {
 public:
  ValueNoise(std::size_t size, double spacing, std::mt19937_64& rng) : spacing_(spacing) {
    cells_ = static_cast<std::size_t>(std::ceil(static_cast<double>(size) / spacing)) + 2;
    std::uniform_real_distribution<double> u(0, 1);
    values_.resize(cells_ * cells_);
    for (auto& v : values_) v = u(rng);
  }
  double operator()(double x, double y) const {
    const double gx = x / spacing_, gy = y / spacing_;
    const auto ix = static_cast<std::size_t>(gx), iy = static_cast<std::size_t>(gy);
    auto smooth = [](double t) { return t * t * (3 - 2 * t); };
    const double tx = smooth(gx - static_cast<double>(ix)), ty = smooth(gy - static_cast<double>(iy));
    auto at = [&](std::size_t i, std::size_t j) { return values_[std::min(j, cells_ - 1) * cells_ + std::min(i, cells_ - 1)]; };
    const double top = at(ix, iy) * (1 - tx) + at(ix + 1, iy) * tx;
    const double bot = at(ix, iy + 1) * (1 - tx) + at(ix + 1, iy + 1) * tx;
    return top * (1 - ty) + bot * ty;
  }

 private:
  double spacing_;
  std::size_t cells_ = 0;
  std::vector<double> values_;
};

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

struct Pose {
  double cx, cy, angle, scale;
};

Sample render_sample(const GenConfig& cfg, int label, int context, std::mt19937_64& rng) {
  const std::size_t size = cfg.image_size;
  const double unit = static_cast<double>(size) / 64.0;
  std::uniform_real_distribution<double> u01(0, 1);

  const Texture& tex = kTextures[static_cast<std::size_t>(context)];
  const double ox = u01(rng) * tex.period * 4, oy = u01(rng) * tex.period * 4;
  const double rad = tex.angle_deg * std::numbers::pi / 180.0;
  const double ring_cx = u01(rng) * static_cast<double>(size), ring_cy = u01(rng) * static_cast<double>(size);
  const ValueNoise noise(size, tex.period * unit, rng);

  Pose pose{};
  pose.scale = 0.6 + 0.4 * u01(rng);
  pose.angle = 2 * std::numbers::pi * u01(rng);
  const double reach = (kExtent * pose.scale + kMargin) * unit;
  pose.cx = reach + u01(rng) * (static_cast<double>(size) - 2 * reach);
  pose.cy = reach + u01(rng) * (static_cast<double>(size) - 2 * reach);
  const double ux = std::cos(pose.angle), uy = std::sin(pose.angle);
  const double s = pose.scale * unit;

  Rgb body = kBodyColor;
  for (auto& c : body) c += (u01(rng) - 0.5) * 0.1;
  const Rgb head = head_color(label, cfg.classes);
  const Rgb tail = tail_color(label, cfg.classes);

  Sample sample;
  sample.label = label;
  sample.context_id = context;
  sample.image = Image(size, size);
  for (std::size_t py = 0; py < size; ++py)
    for (std::size_t px = 0; px < size; ++px) {
      const double x = static_cast<double>(px) + 0.5, y = static_cast<double>(py) + 0.5;
      const double tx = x / unit + ox, ty = y / unit + oy;
      Rgb c{};
      switch (tex.pattern) {
        case Pattern::Stripes:
          c = frac((tx * std::cos(rad) + ty * std::sin(rad)) / tex.period) < 0.5 ? tex.a : tex.b;
          break;
        case Pattern::Checker:
          c = (static_cast<long>(std::floor(tx / tex.period)) + static_cast<long>(std::floor(ty / tex.period))) % 2 == 0
                  ? tex.a
                  : tex.b;
          break;
        case Pattern::Dots: {
          const double dx = frac(tx / tex.period) - 0.5, dy = frac(ty / tex.period) - 0.5;
          c = dx * dx + dy * dy < 0.09 ? tex.b : tex.a;
          break;
        }
        case Pattern::Plaid:
          c = lerp(tex.a, tex.b,
                   0.5 + 0.25 * std::sin(2 * std::numbers::pi * tx / tex.period) +
                       0.25 * std::sin(2 * std::numbers::pi * ty / tex.period));
          break;
        case Pattern::Blobs:
          c = lerp(tex.a, tex.b, noise(x, y));
          break;
        case Pattern::Rings:
          c = frac(std::hypot(x - ring_cx, y - ring_cy) / (tex.period * unit)) < 0.5 ? tex.a : tex.b;
          break;
      }
      // Creature, in its own frame: along = towards the head.
      const double rx = x - pose.cx, ry = y - pose.cy;
      const double along = rx * ux + ry * uy, across = -rx * uy + ry * ux;
      const double hd = along - kHeadOffset * s;
      if (hd * hd + across * across <= kHeadRadius * s * kHeadRadius * s) {
        c = head;
      } else if ((along / (kBodyLength * s)) * (along / (kBodyLength * s)) +
                     (across / (kBodyWidth * s)) * (across / (kBodyWidth * s)) <=
                 1.0) {
        c = body;
      } else if (along <= -kTailStart * s && along >= -kTailEnd * s && std::abs(across) <= kTailHalfWidth * s) {
        c = tail;
      }
      std::uint8_t* p = sample.image.at(px, py);
      for (std::size_t k = 0; k < 3; ++k) p[k] = to_byte(c[k] + (u01(rng) - 0.5) * 0.06);
    }

  sample.keypoints = std::vector<Keypoint>{
      {"head", pose.cx + ux * kHeadOffset * s, pose.cy + uy * kHeadOffset * s, true},
      {"body", pose.cx, pose.cy, true},
      {"tail", pose.cx - ux * kTailKeypoint * s, pose.cy - uy * kTailKeypoint * s, true},
  };
  return sample;
}

std::size_t split_size(const GenConfig& cfg, const std::string& split) {
  if (split == "train") return cfg.per_class * cfg.classes;
  if (split.rfind("val", 0) == 0) return cfg.val_per_class * cfg.classes;
  return cfg.test_per_class * cfg.classes;
}

bool is_trans(const std::string& split) { return split.find("trans") != std::string::npos; }

json keypoints_json(const std::optional<std::vector<Keypoint>>& kps) {
  if (!kps) return nullptr;
  json arr = json::array();
  for (const auto& k : *kps) arr.push_back({{"name", k.name}, {"x", k.x}, {"y", k.y}, {"visible", k.visible}});
  return arr;
}

std::vector<double> border_histogram(const Image& image) {
  constexpr std::size_t kBins = 4, kBorder = 4;
  std::vector<double> hist(kBins * kBins * kBins, 0);
  double count = 0;
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) {
      if (x >= kBorder && y >= kBorder && x + kBorder < image.width && y + kBorder < image.height) continue;
      const std::uint8_t* p = image.at(x, y);
      const std::size_t bin = (p[0] * kBins / 256) * kBins * kBins + (p[1] * kBins / 256) * kBins + p[2] * kBins / 256;
      hist[bin] += 1;
      count += 1;
    }
  for (auto& h : hist) h /= count;
  return hist;
}

std::vector<double> patch_features(const Sample& sample) {
  std::vector<double> f;
  for (std::size_t k : {std::size_t{0}, std::size_t{2}}) {  // head, tail
    const Keypoint& kp = sample.keypoints->at(k);
    const long cx = static_cast<long>(std::floor(kp.x)), cy = static_cast<long>(std::floor(kp.y));
    std::array<double, 3> sum{0, 0, 0};
    double n = 0;
    for (long dy = -2; dy <= 2; ++dy)
      for (long dx = -2; dx <= 2; ++dx) {
        const long x = cx + dx, y = cy + dy;
        if (x < 0 || y < 0 || x >= static_cast<long>(sample.image.width) || y >= static_cast<long>(sample.image.height))
          continue;
        const std::uint8_t* p = sample.image.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
        for (std::size_t c = 0; c < 3; ++c) sum[c] += p[c] / 255.0;
        n += 1;
      }
    for (double v : sum) f.push_back(n > 0 ? v / n : 0);
  }
  return f;
}

int nearest(const std::vector<std::vector<double>>& centroids, const std::vector<double>& f, bool l1) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    if (centroids[c].empty()) continue;
    double d = 0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      const double diff = f[i] - centroids[c][i];
      d += l1 ? std::abs(diff) : diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

std::vector<std::vector<double>> fit_centroids(std::size_t classes,
                                               const std::vector<std::pair<int, std::vector<double>>>& rows) {
  std::vector<std::vector<double>> sums(classes);
  std::vector<double> counts(classes, 0);
  for (const auto& [label, f] : rows) {
    auto& s = sums[static_cast<std::size_t>(label)];
    if (s.empty()) s.assign(f.size(), 0);
    for (std::size_t i = 0; i < f.size(); ++i) s[i] += f[i];
    counts[static_cast<std::size_t>(label)] += 1;
  }
  for (std::size_t c = 0; c < classes; ++c)
    for (auto& v : sums[c]) v /= counts[c];
  return sums;
}

}  // namespace

void GenConfig::validate() const {
  if (classes < 2) throw std::invalid_argument("GenConfig: need at least 2 classes");
  if (per_class == 0) throw std::invalid_argument("GenConfig: per_class must be positive");
  if (image_size < 32 || image_size % 16 != 0)
    throw std::invalid_argument("GenConfig: image size must be a multiple of 16 and at least 32");
  if (!(bias >= 0 && bias <= 1)) throw std::invalid_argument("GenConfig: bias must lie in [0,1]");
  if (!(keypoint_fraction > 0 && keypoint_fraction <= 1))
    throw std::invalid_argument("GenConfig: keypoint fraction must lie in (0,1]");
}

std::string gen_config_to_json(const GenConfig& c) {
  return json{{"classes", c.classes},
              {"per_class", c.per_class},
              {"val_per_class", c.val_per_class},
              {"test_per_class", c.test_per_class},
              {"image_size", c.image_size},
              {"bias", c.bias},
              {"seed", c.seed},
              {"keypoint_fraction", c.keypoint_fraction}}
      .dump();
}

GenConfig gen_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  GenConfig c;
  c.classes = j.value("classes", c.classes);
  c.per_class = j.value("per_class", c.per_class);
  c.val_per_class = j.value("val_per_class", c.val_per_class);
  c.test_per_class = j.value("test_per_class", c.test_per_class);
  c.image_size = j.value("image_size", c.image_size);
  c.bias = j.value("bias", c.bias);
  c.seed = j.value("seed", c.seed);
  c.keypoint_fraction = j.value("keypoint_fraction", c.keypoint_fraction);
  return c;
}

std::vector<std::size_t> Dataset::split(const std::string& name) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].split == name) idx.push_back(i);
  if (idx.empty()) throw std::invalid_argument("dataset has no samples in split '" + name + "'");
  return idx;
}

Dataset generate(const GenConfig& cfg) {
  cfg.validate();
  Dataset ds;
  for (std::size_t c = 0; c < cfg.classes; ++c) ds.manifest.classes.push_back("class_" + std::to_string(c));
  ds.manifest.keypoint_names = kKeypointNames;
  ds.manifest.config = cfg;

  for (std::size_t s = 0; s < kSplits.size(); ++s) {
    const std::string& split = kSplits[s];
    const std::size_t n = split_size(cfg, split);
    ds.manifest.splits[split] = n;
    const std::size_t first = ds.samples.size();
    for (std::size_t i = 0; i < n; ++i) {
      std::mt19937_64 rng(splitmix64(cfg.seed ^ splitmix64((s + 1) * 0x100000000ULL + i)));
      const int label = static_cast<int>(i % cfg.classes);
      int context;
      if (is_trans(split)) {
        context = static_cast<int>(kTrainContexts + std::uniform_int_distribution<std::size_t>(0, kHeldOutContexts - 1)(rng));
      } else if (std::uniform_real_distribution<double>(0, 1)(rng) < cfg.bias) {
        context = static_cast<int>(static_cast<std::size_t>(label) % kTrainContexts);
      } else {
        context = static_cast<int>(std::uniform_int_distribution<std::size_t>(0, kTrainContexts - 1)(rng));
      }
      Sample sample = render_sample(cfg, label, context, rng);
      sample.split = split;
      char name[32];
      std::snprintf(name, sizeof(name), "%05zu.png", i);
      sample.path = "images/" + split + "/" + name;
      ds.samples.push_back(std::move(sample));
    }
    if (split == "train") {
      const auto strip = static_cast<std::size_t>(std::llround((1.0 - cfg.keypoint_fraction) * static_cast<double>(n)));
      std::vector<std::size_t> order(n);
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      std::mt19937_64 rng(splitmix64(cfg.seed ^ 0x5EEDF00DULL));
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t i = 0; i < strip; ++i) ds.samples[first + order[i]].keypoints.reset();
    }
  }
  return ds;
}

std::string sample_to_jsonl(const Sample& s) {
  return json{{"path", s.path},
              {"split", s.split},
              {"class", s.label},
              {"keypoints", keypoints_json(s.keypoints)},
              {"context_id", s.context_id}}
      .dump();
}

std::string manifest_to_json(const DatasetManifest& m) {
  json splits = json::object();
  for (const auto& [name, count] : m.splits) splits[name] = count;
  return json{{"classes", m.classes},
              {"keypoint_names", m.keypoint_names},
              {"splits", splits},
              {"gen_config", json::parse(gen_config_to_json(m.config))}}
      .dump(2);
}

void write_dataset(const Dataset& ds, const std::string& dir) {
  for (const auto& split : kSplits) fs::create_directories(fs::path(dir) / "images" / split);
  std::ofstream ann(fs::path(dir) / "annotations.jsonl", std::ios::binary);
  if (!ann) throw std::runtime_error("cannot write annotations in " + dir);
  for (const auto& s : ds.samples) {
    write_png((fs::path(dir) / s.path).string(), s.image);
    ann << sample_to_jsonl(s) << '\n';
  }
  std::ofstream man(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!man) throw std::runtime_error("cannot write manifest in " + dir);
  man << manifest_to_json(ds.manifest) << '\n';
}

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  std::ifstream man(fs::path(dir) / "manifest.json");
  if (!man) throw std::runtime_error("no manifest.json in " + dir);
  const json m = json::parse(man);
  ds.manifest.classes = m.at("classes").get<std::vector<std::string>>();
  ds.manifest.keypoint_names = m.at("keypoint_names").get<std::vector<std::string>>();
  for (const auto& [name, count] : m.at("splits").items()) ds.manifest.splits[name] = count.get<std::size_t>();
  ds.manifest.config = gen_config_from_json(m.at("gen_config").dump());

  std::ifstream ann(fs::path(dir) / "annotations.jsonl");
  if (!ann) throw std::runtime_error("no annotations.jsonl in " + dir);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ann, line)) {
    ++line_no;
    if (line.empty()) continue;
    json r;
    try {
      r = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("annotations.jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
    Sample s;
    s.path = r.at("path").get<std::string>();
    s.split = r.at("split").get<std::string>();
    s.label = r.at("class").get<int>();
    s.context_id = r.value("context_id", 0);
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= ds.manifest.classes.size())
      throw std::runtime_error("annotations.jsonl line " + std::to_string(line_no) + ": class out of range");
    if (r.contains("keypoints") && !r["keypoints"].is_null()) {
      std::vector<Keypoint> kps;
      for (const auto& k : r["keypoints"])
        kps.push_back({k.at("name").get<std::string>(), k.at("x").get<double>(), k.at("y").get<double>(),
                       k.at("visible").get<bool>()});
      if (kps.size() != ds.manifest.keypoint_names.size())
        throw std::runtime_error("annotations.jsonl line " + std::to_string(line_no) + ": expected " +
                                 std::to_string(ds.manifest.keypoint_names.size()) + " keypoints");
      s.keypoints = std::move(kps);
    }
    s.image = read_png((fs::path(dir) / s.path).string());
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::vector<Real> rasterize_keypoints(const std::vector<Keypoint>& keypoints, std::size_t image_size,
                                      std::size_t feature_size) {
  const std::size_t k = keypoints.size();
  std::vector<Real> maps(feature_size * feature_size * k, 0);
  const double cell = static_cast<double>(image_size) / static_cast<double>(feature_size);
  for (std::size_t j = 0; j < k; ++j) {
    const Keypoint& kp = keypoints[j];
    if (!kp.visible) continue;
    const long last = static_cast<long>(feature_size) - 1;
    const long cx = std::clamp(static_cast<long>(std::floor(kp.x / cell)), 0L, last);
    const long cy = std::clamp(static_cast<long>(std::floor(kp.y / cell)), 0L, last);
    for (long dy = -1; dy <= 1; ++dy)
      for (long dx = -1; dx <= 1; ++dx) {
        const long x = cx + dx, y = cy + dy;
        if (x < 0 || y < 0 || x > last || y > last) continue;
        maps[(static_cast<std::size_t>(y) * feature_size + static_cast<std::size_t>(x)) * k + j] = 1;
      }
  }
  return maps;
}

attention::KeypointTargets make_targets(const std::vector<const Sample*>& batch, std::size_t keypoint_count,
                                        std::size_t feature_size) {
  attention::KeypointTargets t;
  const std::size_t plane = feature_size * feature_size * keypoint_count;
  std::vector<Real> maps(batch.size() * plane, 0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Sample& s = *batch[i];
    const bool annotated = s.keypoints.has_value();
    t.annotated.push_back(annotated);
    for (std::size_t k = 0; k < keypoint_count; ++k) t.visible.push_back(annotated && s.keypoints->at(k).visible);
    if (!annotated) continue;
    if (s.keypoints->size() != keypoint_count)
      throw std::invalid_argument("make_targets: sample has " + std::to_string(s.keypoints->size()) + " keypoints, expected " +
                                  std::to_string(keypoint_count));
    const auto m = rasterize_keypoints(*s.keypoints, s.image.width, feature_size);
    std::copy(m.begin(), m.end(), maps.begin() + static_cast<long>(i * plane));
  }
  t.maps = Tensor::from({batch.size(), feature_size, feature_size, keypoint_count}, std::move(maps));
  return t;
}

Sample crop_resize(const Sample& sample, double x0, double y0, double scale) {
  const std::size_t w = sample.image.width, h = sample.image.height;
  Sample out = sample;
  for (std::size_t oy = 0; oy < h; ++oy) {
    const auto sy = std::min(h - 1, static_cast<std::size_t>(std::max(0.0, std::floor(y0 + (static_cast<double>(oy) + 0.5) * scale))));
    for (std::size_t ox = 0; ox < w; ++ox) {
      const auto sx = std::min(w - 1, static_cast<std::size_t>(std::max(0.0, std::floor(x0 + (static_cast<double>(ox) + 0.5) * scale))));
      std::copy_n(sample.image.at(sx, sy), 3, out.image.at(ox, oy));
    }
  }
  if (out.keypoints)
    for (auto& kp : *out.keypoints) {
      kp.x = (kp.x - x0) / scale;
      kp.y = (kp.y - y0) / scale;
      if (kp.x < 0 || kp.y < 0 || kp.x >= static_cast<double>(w) || kp.y >= static_cast<double>(h)) kp.visible = false;
    }
  return out;
}

Sample augment(const Sample& sample, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0, 1);
  const double scale = 0.5 + 0.5 * u01(rng);
  const double x0 = u01(rng) * static_cast<double>(sample.image.width) * (1 - scale);
  const double y0 = u01(rng) * static_cast<double>(sample.image.height) * (1 - scale);
  return crop_resize(sample, x0, y0, scale);
}

TextureOracle::TextureOracle(const Dataset& ds) {
  std::vector<std::pair<int, std::vector<double>>> rows;
  for (auto i : ds.split("train")) rows.emplace_back(ds.samples[i].label, border_histogram(ds.samples[i].image));
  centroids_ = fit_centroids(ds.manifest.classes.size(), rows);
}

int TextureOracle::predict(const Image& image) const { return nearest(centroids_, border_histogram(image), true); }

double TextureOracle::accuracy(const Dataset& ds, const std::string& split) const {
  const auto idx = ds.split(split);
  double correct = 0;
  for (auto i : idx) correct += predict(ds.samples[i].image) == ds.samples[i].label ? 1 : 0;
  return correct / static_cast<double>(idx.size());
}

KeypointPatchOracle::KeypointPatchOracle(const Dataset& ds) {
  std::vector<std::pair<int, std::vector<double>>> rows;
  for (auto i : ds.split("train"))
    if (ds.samples[i].keypoints) rows.emplace_back(ds.samples[i].label, patch_features(ds.samples[i]));
  if (rows.empty()) throw std::invalid_argument("KeypointPatchOracle: no annotated train samples");
  centroids_ = fit_centroids(ds.manifest.classes.size(), rows);
}

int KeypointPatchOracle::predict(const Sample& sample) const {
  if (!sample.keypoints) throw std::invalid_argument("KeypointPatchOracle: sample has no keypoints");
  return nearest(centroids_, patch_features(sample), false);
}

double KeypointPatchOracle::accuracy(const Dataset& ds, const std::string& split) const {
  double correct = 0, total = 0;
  for (auto i : ds.split(split)) {
    if (!ds.samples[i].keypoints) continue;
    correct += predict(ds.samples[i]) == ds.samples[i].label ? 1 : 0;
    total += 1;
  }
  return total > 0 ? correct / total : 0;
}

}  // namespace privpool::data
