#include <doctest.h>

#include <filesystem>
#include <random>

#include "helpers.hpp"
#include "privpool/model.hpp"

using namespace privpool;
using namespace privpool::model;
using testutil::random_tensor;

namespace {

ModelConfig small(pooling::PoolMode pool) {
  ModelConfig c;
  c.widths = {4, 8};
  c.input_size = 16;
  c.pool = pool;
  c.reduced_dim = 4;
  c.num_classes = 5;
  c.seed = 3;
  return c;
}

bool has_prefix(Model& m, const std::string& prefix) {
  for (auto& p : m.parameters())
    if (p.name.rfind(prefix, 0) == 0) return true;
  return false;
}

}  // namespace

TEST_CASE("default backbone gives a 4x4x128 feature map") {
  ModelConfig c;
  CHECK(c.feature_size() == 64 / 16);
  CHECK(c.feature_channels() == 128);
  c.pool = pooling::PoolMode::Avg;
  Model m(c);
  auto out = m.forward(Tensor::zeros({1, 64, 64, 3}));
  CHECK(out.features.shape() == Shape{1, 4, 4, 128});
  CHECK(out.logits.shape() == Shape{1, 8});
}

TEST_CASE("output shapes per pooling mode") {
  std::mt19937_64 rng(1);
  auto x = random_tensor({3, 16, 16, 3}, 0, 1, rng);
  for (auto mode : {pooling::PoolMode::Avg, pooling::PoolMode::AvgPr, pooling::PoolMode::Cov, pooling::PoolMode::CovPr}) {
    CAPTURE(pooling::to_string(mode));
    Model m(small(mode));
    auto out = m.forward(x);
    CHECK(out.logits.shape() == Shape{3, 5});
    CHECK(out.pooled.shape() == Shape{3, m.config().pooled_width()});
    CHECK(out.stack.has_value() == pooling::uses_attention(mode));
    if (out.stack) CHECK(out.stack->maps.shape() == Shape{3, 4, 4, 4});
    for (Real v : out.logits.data()) CHECK(std::isfinite(v));
  }
  CHECK(small(pooling::PoolMode::AvgPr).pooled_width() == 2 * 4 * 8);
  CHECK(small(pooling::PoolMode::CovPr).pooled_width() == 16);
}

TEST_CASE("parameter sets follow the pooling mode") {
  Model avg(small(pooling::PoolMode::Avg));
  Model avg_pr(small(pooling::PoolMode::AvgPr));
  Model cov(small(pooling::PoolMode::Cov));
  Model cov_pr(small(pooling::PoolMode::CovPr));
  CHECK_FALSE(has_prefix(avg, "attention"));
  CHECK_FALSE(has_prefix(avg, "reduce"));
  CHECK(has_prefix(avg_pr, "attention"));
  CHECK_FALSE(has_prefix(avg_pr, "reduce"));
  CHECK_FALSE(has_prefix(cov, "attention"));
  CHECK(has_prefix(cov, "reduce"));
  CHECK(has_prefix(cov_pr, "attention"));
  CHECK(has_prefix(cov_pr, "reduce"));

  // backbone 3·3·3·4+4 + 3·3·4·8+8, classifier 8·5+5
  CHECK(avg.parameter_count() == 112 + 296 + 45);
  for (auto& p : avg.parameters()) CHECK(p.backbone == (p.name.rfind("backbone", 0) == 0));
}

TEST_CASE("avg mode ignores the attention stack") {
  std::mt19937_64 rng(2);
  auto x = random_tensor({2, 16, 16, 3}, 0, 1, rng);
  Model m(small(pooling::PoolMode::Avg));
  auto out = m.forward(x);
  CHECK_FALSE(out.stack.has_value());
  CHECK(testutil::max_abs_diff(out.logits, m.forward(x).logits) == 0);
}

TEST_CASE("deterministic construction and forward") {
  std::mt19937_64 rng(3);
  auto x = random_tensor({2, 16, 16, 3}, 0, 1, rng);
  Model a(small(pooling::PoolMode::CovPr)), b(small(pooling::PoolMode::CovPr));
  CHECK(testutil::bitwise_equal(a.forward(x).logits, b.forward(x).logits));
  auto c = small(pooling::PoolMode::CovPr);
  c.seed = 4;
  CHECK_FALSE(testutil::bitwise_equal(a.forward(x).logits, Model(c).forward(x).logits));
}

TEST_CASE("predict_proba") {
  std::mt19937_64 rng(4);
  auto x = random_tensor({4, 16, 16, 3}, 0, 1, rng);
  Model m(small(pooling::PoolMode::AvgPr));
  auto p = m.predict_proba(x);
  auto logits = m.forward(x).logits;
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0;
    std::size_t arg_p = 0, arg_l = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      s += p.at({i, j});
      if (p.at({i, j}) > p.at({i, arg_p})) arg_p = j;
      if (logits.at({i, j}) > logits.at({i, arg_l})) arg_l = j;
    }
    CHECK(s == doctest::Approx(1).epsilon(1e-6));
    CHECK(arg_p == arg_l);
  }
  auto u = softmax(Tensor::zeros({1, 5}));
  for (Real v : u.data()) CHECK(v == doctest::Approx(0.2));
}

TEST_CASE("config validation and input checks") {
  auto c = small(pooling::PoolMode::AvgPr);
  c.input_size = 18;
  CHECK_THROWS_AS(Model{c}, std::invalid_argument);
  c = small(pooling::PoolMode::CovPr);
  c.reduced_dim = 9;
  CHECK_THROWS_AS(Model{c}, std::invalid_argument);
  c = small(pooling::PoolMode::AvgPr);
  c.complementary_maps = 0;
  CHECK_THROWS_AS(Model{c}, std::invalid_argument);

  Model m(small(pooling::PoolMode::Avg));
  CHECK_THROWS_WITH_AS(m.forward(Tensor::zeros({1, 32, 32, 3})), doctest::Contains("[1,32,32,3]"), std::invalid_argument);
}

TEST_CASE("config json round trip") {
  auto c = small(pooling::PoolMode::CovPr);
  c.ns_iterations = 7;
  auto back = config_from_json(config_to_json(c));
  CHECK(back.widths == c.widths);
  CHECK(back.pool == c.pool);
  CHECK(back.reduced_dim == c.reduced_dim);
  CHECK(back.ns_iterations == 7);
  CHECK(back.seed == c.seed);
}

TEST_CASE("save and load reproduce the logits") {
  std::mt19937_64 rng(5);
  auto x = random_tensor({2, 16, 16, 3}, 0, 1, rng);
  const auto dir = std::filesystem::temp_directory_path() / "privpool_model_test";
  std::filesystem::remove_all(dir);
  Model m(small(pooling::PoolMode::CovPr));
  m.save(dir.string());
  CHECK(std::filesystem::exists(dir / "model.json"));
  auto loaded = Model::load(dir.string());
  CHECK(testutil::bitwise_equal(m.forward(x).logits, loaded.forward(x).logits));
  std::filesystem::remove_all(dir);
  CHECK_THROWS(Model::load(dir.string()));
}
