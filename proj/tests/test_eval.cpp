#include <doctest.h>

#include <filesystem>
#include <json.hpp>
#include <random>

#include "helpers.hpp"
#include "privpool/eval.hpp"

using namespace privpool;
using namespace privpool::eval;

namespace {

std::vector<Real> impulse(std::size_t h, std::size_t w, std::size_t m, std::size_t y, std::size_t x) {
  std::vector<Real> v(h * w * m, 0);
  for (std::size_t k = 0; k < m; ++k) v[(y * w + x) * m + k] = 1;
  return v;
}

model::ModelConfig small_model() {
  model::ModelConfig c;
  c.widths = {4, 8};
  c.input_size = 32;
  c.num_classes = 3;
  c.pool = pooling::PoolMode::AvgPr;
  c.seed = 2;
  return c;
}

data::Dataset small_dataset() {
  data::GenConfig g;
  g.classes = 3;
  g.per_class = 2;
  g.val_per_class = 1;
  g.test_per_class = 3;
  g.image_size = 32;
  return data::generate(g);
}

}  // namespace

TEST_CASE("summarize counts") {
  auto perfect = summarize("s", {0, 1, 2, 2}, {0, 1, 2, 2}, 3);
  CHECK(perfect.top1 == 1.0);
  for (double a : perfect.per_class) CHECK(a == 1.0);

  // majority predictor on an imbalanced two-class split, third class absent
  auto major = summarize("s", {0, 0, 0, 1}, {0, 0, 0, 0}, 3);
  CHECK(major.top1 == 0.75);
  CHECK(major.per_class == std::vector<double>{1.0, 0.0, 0.0});
  CHECK(major.support == std::vector<std::size_t>{3, 1, 0});
  CHECK(major.mean_per_class == 0.5);
  CHECK(major.confusion[1][0] == 1);

  auto mixed = summarize("s", {0, 0, 1, 1, 1, 2}, {0, 1, 1, 1, 0, 0}, 3);
  double weighted = 0;
  for (std::size_t c = 0; c < 3; ++c) weighted += mixed.per_class[c] * double(mixed.support[c]) / 6;
  CHECK(mixed.top1 == doctest::Approx(weighted).epsilon(1e-12));
  CHECK_THROWS(summarize("s", {0, 1}, {0}, 2));
}

TEST_CASE("report serialization") {
  EvalReport r;
  r.splits.push_back(summarize("test_cis", {0, 1}, {0, 0}, 2));
  r.overall = r.splits.front();
  auto j = nlohmann::json::parse(report_to_json(r));
  CHECK(j["splits"][0]["split"] == "test_cis");
  CHECK(j["overall"]["top1"] == 0.5);
  CHECK(confusion_to_csv(r.splits.front(), {"a", "b"}) == "true\\predicted,a,b\na,1,0\nb,1,0\n");
}

TEST_CASE("attention box covers a single cell's footprint") {
  const std::size_t h = 4, w = 4, m = 2, size = 64, cell = 16;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      CAPTURE(y);
      CAPTURE(x);
      auto box = attention_box(impulse(h, w, m, y, x), h, w, m, size);
      CHECK(box == AttentionBox{x * cell, y * cell, (x + 1) * cell, (y + 1) * cell});
    }
}

TEST_CASE("attention box is translation equivariant on the grid") {
  const std::size_t h = 8, w = 8, m = 1, size = 64;
  auto base = attention_box(impulse(h, w, m, 3, 2), h, w, m, size);
  auto moved = attention_box(impulse(h, w, m, 4, 4), h, w, m, size);
  CHECK(moved.x0 == base.x0 + 16);
  CHECK(moved.x1 == base.x1 + 16);
  CHECK(moved.y0 == base.y0 + 8);
  CHECK(moved.y1 == base.y1 + 8);
}

TEST_CASE("uniform maps and zero threshold give the full image") {
  const AttentionBox full{0, 0, 64, 64};
  CHECK(attention_box(std::vector<Real>(16 * 3, 0.3), 4, 4, 3, 64) == full);
  CHECK(attention_box(impulse(4, 4, 1, 1, 1), 4, 4, 1, 64, 0.0) == full);
  CHECK(attention_box(std::vector<Real>(16, 0), 4, 4, 1, 64) == full);
}

TEST_CASE("crop re-feeding with a full-image box is bit-identical") {
  auto ds = small_dataset();
  model::Model m(small_model());
  auto plain = evaluate(m, ds, {"test_cis", "test_trans"}, false);
  auto refed = evaluate(m, ds, {"test_cis", "test_trans"}, true, 25, 0.0);
  for (std::size_t s = 0; s < 2; ++s) CHECK(plain.splits[s].confusion == refed.splits[s].confusion);

  std::vector<const Image*> images;
  for (auto i : ds.split("test_trans")) images.push_back(&ds.samples[i].image);
  auto p0 = predict(m, images, false);
  std::vector<AttentionBox> boxes;
  auto p1 = predict(m, images, true, &boxes, 0.0);
  CHECK(testutil::bitwise_equal(p0, p1));
  CHECK(boxes.size() == images.size());

  // a real threshold still yields rows on the simplex
  auto p2 = predict(m, images, true, &boxes);
  for (std::size_t n = 0; n < images.size(); ++n) {
    double s = 0;
    for (std::size_t c = 0; c < 3; ++c) s += p2.at({n, c});
    CHECK(s == doctest::Approx(1).epsilon(1e-12));
    CHECK(boxes[n].x1 > boxes[n].x0);
    CHECK(boxes[n].y1 <= 32);
  }
}

TEST_CASE("evaluation errors") {
  auto ds = small_dataset();
  model::Model m(small_model());
  CHECK_THROWS_AS(evaluate(m, ds, {"nope"}, false), std::invalid_argument);
  auto c = small_model();
  c.pool = pooling::PoolMode::Avg;
  model::Model avg(c);
  std::vector<const Image*> one{&ds.samples[0].image};
  CHECK_THROWS_AS(predict(avg, one, true), std::invalid_argument);
  auto e = evaluate(m, ds, {"test_cis"}, false);
  CHECK(e.overall.samples == 9);
}

TEST_CASE("export writes M+3 files per sample with saturated values") {
  auto ds = small_dataset();
  model::Model m(small_model());
  for (auto& p : m.parameters()) {
    if (p.name.rfind("attention", 0) != 0) continue;
    auto d = p.tensor->mutable_data();
    std::fill(d.begin(), d.end(), Real(0));
    if (p.name == "attention.output.bias") {
      d[0] = 1000;  // head ≡ 1, body ≡ 0, tail ≡ 1, comp0 ≡ 0
      d[1] = -1000;
      d[2] = 1000;
      d[3] = -1000;
    }
  }
  const auto dir = std::filesystem::temp_directory_path() / "privpool_export_test";
  std::filesystem::remove_all(dir);
  std::vector<const data::Sample*> samples{&ds.samples[0], &ds.samples[1]};
  auto paths = export_attention(m, samples, data::kKeypointNames, dir.string());
  CHECK(paths.size() == 2 * (4 + 3));
  for (const char* name : {"0_input.png", "0_overlay.png", "0_head.png", "0_body.png", "0_tail.png", "0_comp0.png",
                           "0_mean.png", "1_head.png"})
    CHECK(std::filesystem::exists(dir / name));

  auto head = read_png((dir / "0_head.png").string());
  auto body = read_png((dir / "0_body.png").string());
  auto mean = read_png((dir / "0_mean.png").string());
  CHECK(head.width == 32);
  for (std::size_t i = 0; i < head.rgb.size(); ++i) {
    CHECK(head.rgb[i] == 255);
    CHECK(body.rgb[i] == 0);
    CHECK(mean.rgb[i] == 128);  // round(255 · 0.5)
  }
  std::filesystem::remove_all(dir);

  auto c = small_model();
  c.pool = pooling::PoolMode::Cov;
  c.reduced_dim = 4;
  model::Model cov(c);
  CHECK_THROWS_AS(export_attention(cov, samples, data::kKeypointNames, dir.string()), std::invalid_argument);
}
