// privpool command-line tool: gen-data, train, eval, check, export-attention.
#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "privpool/checks.hpp"
#include "privpool/data.hpp"
#include "privpool/eval.hpp"
#include "privpool/model.hpp"
#include "privpool/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace privpool;

namespace {

// Bad flags or config contents: exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (text.empty() || text.back() != '\n') os << '\n';
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// gen-data ---------------------------------------------------------------------

struct GenArgs {
  std::string out;
  std::string config;
  data::GenConfig cfg;
  bool force = false;
};

void add_gen(CLI::App& app, GenArgs& a) {
  auto* c = app.add_subcommand("gen-data", "Generate the synthetic biased dataset");
  c->add_option("--out", a.out, "Output directory")->required();
  c->add_option("--config", a.config, "JSON file with generator settings (flags override)");
  c->add_option("--classes", a.cfg.classes, "Number of classes")->capture_default_str();
  c->add_option("--per-class", a.cfg.per_class, "Train samples per class")->capture_default_str();
  c->add_option("--val-per-class", a.cfg.val_per_class, "Samples per class in each val split")->capture_default_str();
  c->add_option("--test-per-class", a.cfg.test_per_class, "Samples per class in each test split")->capture_default_str();
  c->add_option("--image-size", a.cfg.image_size, "Image side in pixels")->capture_default_str();
  c->add_option("--bias", a.cfg.bias, "Probability that a cis sample shows its class's context")->capture_default_str();
  c->add_option("--seed", a.cfg.seed, "Generator seed")->capture_default_str();
  c->add_option("--kp-frac", a.cfg.keypoint_fraction, "Fraction of train samples that keep keypoints")
      ->capture_default_str();
  c->add_flag("--force", a.force, "Overwrite generated files in an existing directory");
}

int run_gen(const CLI::App& sub, GenArgs& a) {
  data::GenConfig cfg = a.cfg;
  if (!a.config.empty()) {
    // File values first, then any flag given explicitly on the command line.
    data::GenConfig file = data::gen_config_from_json(read_file(a.config));
    auto given = [&](const char* flag) { return sub.count(flag) > 0; };
    if (!given("--classes")) cfg.classes = file.classes;
    if (!given("--per-class")) cfg.per_class = file.per_class;
    if (!given("--val-per-class")) cfg.val_per_class = file.val_per_class;
    if (!given("--test-per-class")) cfg.test_per_class = file.test_per_class;
    if (!given("--image-size")) cfg.image_size = file.image_size;
    if (!given("--bias")) cfg.bias = file.bias;
    if (!given("--seed")) cfg.seed = file.seed;
    if (!given("--kp-frac")) cfg.keypoint_fraction = file.keypoint_fraction;
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const fs::path out(a.out);
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!a.force) throw std::runtime_error(out.string() + " exists and is not empty (use --force to overwrite)");
    for (const char* name : {"images", "annotations.jsonl", "manifest.json", "config.json"}) fs::remove_all(out / name);
  }
  fs::create_directories(out);
  const data::Dataset ds = data::generate(cfg);
  data::write_dataset(ds, out.string());
  write_file(out / "config.json", json::parse(data::gen_config_to_json(cfg)).dump(2));

  std::printf("wrote %zu samples to %s\n", ds.samples.size(), out.string().c_str());
  for (const auto& [split, n] : ds.manifest.splits) std::printf("  %-10s %zu\n", split.c_str(), n);
  const data::TextureOracle texture(ds);
  std::printf("texture oracle   train %.3f  test_cis %.3f  test_trans %.3f\n", texture.accuracy(ds, "train"),
              texture.accuracy(ds, "test_cis"), texture.accuracy(ds, "test_trans"));
  const data::KeypointPatchOracle patch(ds);
  std::printf("keypoint oracle  test_cis %.3f  test_trans %.3f\n", patch.accuracy(ds, "test_cis"),
              patch.accuracy(ds, "test_trans"));
  return 0;
}

// train ------------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  std::string config;
  std::string pool = "avg_pr";
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  std::string widths;
  std::size_t reduced_dim = 64;
  std::size_t complementary = 1;
  double lr = 0.01;
  std::size_t batch = 10;
  double backbone_lr_multiplier = 1.0;
  std::size_t checkpoint_every = 0;
  bool no_augment = false;
  bool no_keypoint_loss = false;
  bool no_regularizer = false;
  bool log_wall_time = false;
};

void add_train(CLI::App& app, TrainArgs& a) {
  auto* c = app.add_subcommand("train", "Train a model on the train split");
  c->add_option("--data", a.data, "Dataset directory")->required();
  c->add_option("--out", a.out, "Run directory (default runs/<pool>-seed<seed>)");
  c->add_option("--config", a.config, R"(JSON file {"model": {...}, "train": {...}}; flags override)");
  c->add_option("--pool", a.pool, "Pooling mode")
      ->check(CLI::IsMember({"avg", "avg_pr", "cov", "cov_pr"}))
      ->capture_default_str();
  c->add_option("--epochs", a.epochs, "Training epochs")->capture_default_str();
  c->add_option("--seed", a.seed, "Seed for initialisation, shuffling and augmentation")->capture_default_str();
  c->add_option("--widths", a.widths, "Backbone widths, comma separated (default 16,32,64,128)");
  c->add_option("--reduced-dim", a.reduced_dim, "Channels after the 1x1 reduction (cov modes)")->capture_default_str();
  c->add_option("--complementary", a.complementary, "Number of complementary attention maps")->capture_default_str();
  c->add_option("--lr", a.lr, "Initial learning rate")->capture_default_str();
  c->add_option("--batch", a.batch, "Batch size")->capture_default_str();
  c->add_option("--backbone-lr-mult", a.backbone_lr_multiplier, "Learning-rate multiplier for the backbone")
      ->capture_default_str();
  c->add_option("--checkpoint-every", a.checkpoint_every, "Extra checkpoint every E epochs (0 = final only)")
      ->capture_default_str();
  c->add_flag("--no-augment", a.no_augment, "Disable random scale/crop augmentation");
  c->add_flag("--no-keypoint-loss", a.no_keypoint_loss, "Drop the keypoint attention loss (regularizer only)");
  c->add_flag("--no-regularizer", a.no_regularizer, "Drop the variance regularizer");
  c->add_flag("--log-wall-time", a.log_wall_time, "Record elapsed milliseconds in metrics.csv (breaks byte-identity)");
}

int run_train(const CLI::App& sub, const TrainArgs& a) {
  const data::Dataset ds = data::load_dataset(a.data);
  model::ModelConfig mc;
  train::TrainConfig tc;
  json file_model = json::object();
  if (!a.config.empty()) {
    json j;
    try {
      j = json::parse(read_file(a.config));
      if (j.contains("train")) tc = train::train_config_from_json(j["train"].dump());
      if (j.contains("model")) file_model = j["model"];
    } catch (const std::exception& e) {
      throw UsageError(a.config + ": " + e.what());
    }
  }
  auto given = [&](const char* flag) { return sub.count(flag) > 0; };
  try {
    if (file_model.contains("widths")) mc.widths = file_model["widths"].get<std::vector<std::size_t>>();
    if (file_model.contains("reduced_dim")) mc.reduced_dim = file_model["reduced_dim"].get<std::size_t>();
    if (file_model.contains("complementary_maps")) mc.complementary_maps = file_model["complementary_maps"].get<std::size_t>();
    if (file_model.contains("ns_iterations")) mc.ns_iterations = file_model["ns_iterations"].get<int>();
    if (file_model.contains("pool")) mc.pool = pooling::parse_pool_mode(file_model["pool"].get<std::string>());
    if (given("--pool") || !file_model.contains("pool")) mc.pool = pooling::parse_pool_mode(a.pool);
    if (given("--widths")) {
      mc.widths.clear();
      for (const auto& w : split_list(a.widths)) mc.widths.push_back(std::stoul(w));
    }
    if (given("--reduced-dim")) mc.reduced_dim = a.reduced_dim;
    if (given("--complementary")) mc.complementary_maps = a.complementary;
    if (given("--epochs")) tc.epochs = a.epochs;
    if (given("--seed") || a.config.empty()) tc.seed = a.seed;
    if (given("--lr")) tc.lr = a.lr;
    if (given("--batch")) tc.batch = a.batch;
    if (given("--backbone-lr-mult")) tc.backbone_lr_multiplier = a.backbone_lr_multiplier;
    if (given("--checkpoint-every")) tc.checkpoint_every = a.checkpoint_every;
    if (a.no_augment) tc.augment = false;
    if (a.no_keypoint_loss) tc.loss.keypoint_loss = false;
    if (a.no_regularizer) tc.loss.variance_regularizer = false;
    if (a.log_wall_time) tc.log_wall_time = true;
    if (a.config.empty() && !given("--epochs")) tc.epochs = a.epochs;
    mc.seed = tc.seed;
    mc.input_size = ds.manifest.config.image_size;
    mc.num_classes = ds.manifest.classes.size();
    mc.supervised_maps = ds.manifest.keypoint_names.size();
    if (mc.reduced_dim > mc.feature_channels()) mc.reduced_dim = mc.feature_channels();
    mc.validate();
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const std::string out =
      a.out.empty() ? "runs/" + pooling::to_string(mc.pool) + "-seed" + std::to_string(tc.seed) : a.out;
  fs::create_directories(out);
  json resolved{{"data", a.data},
                {"model", json::parse(model::config_to_json(mc))},
                {"train", json::parse(train::train_config_to_json(tc))}};
  write_file(fs::path(out) / "config.json", resolved.dump(2));

  model::Model model(mc);
  std::printf("training %s: %zu parameters, %zu epochs -> %s\n", pooling::to_string(mc.pool).c_str(),
              model.parameter_count(), tc.epochs, out.c_str());
  const std::size_t per_epoch = (ds.split("train").size() + tc.batch - 1) / tc.batch;
  double ce_sum = 0;
  std::size_t ce_n = 0;
  const auto result = train::train_loop(model, ds, tc, out, [&](const train::MetricsRow& r) {
    ce_sum += r.ce;
    ++ce_n;
    if ((r.iteration + 1) % per_epoch == 0) {
      std::printf("epoch %3zu  ce %.4f  attn %.4f  reg %.4f\n", (r.iteration + 1) / per_epoch, ce_sum / ce_n, r.attn,
                  r.reg);
      std::fflush(stdout);
      ce_sum = 0;
      ce_n = 0;
    }
  });
  std::printf("done: %zu iterations, checkpoint in %s\n", result.iterations, (fs::path(out) / "checkpoint").c_str());
  return 0;
}

// eval -------------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::vector<std::string> splits;
  std::string out;
  bool crop_refeed = false;
};

void add_eval(CLI::App& app, EvalArgs& a) {
  auto* c = app.add_subcommand("eval", "Evaluate a checkpoint");
  c->add_option("--ckpt", a.ckpt, "Checkpoint directory")->required();
  c->add_option("--data", a.data, "Dataset directory")->required();
  c->add_option("--split", a.splits, "Split name(s); repeat or comma-separate (default test_cis,test_trans)")
      ->delimiter(',');
  c->add_option("--out", a.out, "Report directory (default <ckpt>/eval or <ckpt>/eval_refeed)");
  c->add_flag("--crop-refeed", a.crop_refeed, "Average with the prediction on the attention crop");
}

int run_eval(const EvalArgs& a) {
  if (!fs::exists(fs::path(a.ckpt) / "model.json")) throw std::runtime_error("checkpoint not found: " + a.ckpt);
  const model::Model model = model::Model::load(a.ckpt);
  const data::Dataset ds = data::load_dataset(a.data);
  const std::vector<std::string> splits = a.splits.empty() ? std::vector<std::string>{"test_cis", "test_trans"} : a.splits;
  for (const auto& s : splits)
    if (!ds.manifest.splits.contains(s)) throw UsageError("unknown split '" + s + "'");
  const auto report = eval::evaluate(model, ds, splits, a.crop_refeed);
  const fs::path out = a.out.empty() ? fs::path(a.ckpt) / (a.crop_refeed ? "eval_refeed" : "eval") : fs::path(a.out);
  fs::create_directories(out);
  write_file(out / "report.json", eval::report_to_json(report));
  write_file(out / "confusion.csv", eval::confusion_to_csv(report.overall, ds.manifest.classes));
  for (const auto& s : report.splits) {
    std::printf("%-12s top1 %.4f  mean/class %.4f  (n=%zu)\n", s.split.c_str(), s.top1, s.mean_per_class, s.samples);
    if (splits.size() > 1)
      write_file(out / ("confusion_" + s.split + ".csv"), eval::confusion_to_csv(s, ds.manifest.classes));
  }
  std::printf("report written to %s\n", out.c_str());
  return 0;
}

// check ------------------------------------------------------------------------

struct CheckArgs {
  std::string suite = "all";
  int ns_iters = 15;
};

void add_check(CLI::App& app, CheckArgs& a) {
  auto* c = app.add_subcommand("check", "Run the numerical property suites");
  c->add_option("--suite", a.suite, "Suite to run")
      ->check(CLI::IsMember({"grad", "sqrt", "pool-identities", "all"}))
      ->capture_default_str();
  c->add_option("--ns-iters", a.ns_iters, "Newton-Schulz iterations for the sqrt suite")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
}

int run_check(const CheckArgs& a) {
  std::vector<checks::SuiteResult> results;
  if (a.suite == "grad" || a.suite == "all") results.push_back(checks::grad_suite());
  if (a.suite == "sqrt" || a.suite == "all") {
    results.push_back(checks::sqrt_suite(a.ns_iters));
    if (a.ns_iters != linalg::kDefaultNsIterations) {
      // The model's default iteration count, for reference.
      auto info = checks::sqrt_suite(linalg::kDefaultNsIterations);
      for (auto& l : info.lines) l.informational = true;
      info.suite = "sqrt@default";
      results.push_back(info);
    }
  }
  if (a.suite == "pool-identities" || a.suite == "all") results.push_back(checks::pool_identity_suite());
  bool ok = true;
  for (const auto& r : results) {
    std::printf("[%s] %.2fs\n", r.suite.c_str(), r.seconds);
    for (const auto& l : r.lines) std::printf("  %s\n", checks::format_line(l).c_str());
    ok = ok && r.pass();
  }
  std::printf("%s\n", ok ? "all checks passed" : "CHECKS FAILED");
  return ok ? 0 : 1;
}

// export-attention -------------------------------------------------------------

struct ExportArgs {
  std::string ckpt;
  std::string data;
  std::string split = "test_trans";
  std::size_t n = 8;
  std::string out;
  std::uint64_t seed = 0;
};

void add_export(CLI::App& app, ExportArgs& a) {
  auto* c = app.add_subcommand("export-attention", "Write attention maps of random samples as PNGs");
  c->add_option("--ckpt", a.ckpt, "Checkpoint directory")->required();
  c->add_option("--data", a.data, "Dataset directory")->required();
  c->add_option("--split", a.split, "Split to sample from")->capture_default_str();
  c->add_option("--n", a.n, "Number of samples")->capture_default_str();
  c->add_option("--out", a.out, "Output directory")->required();
  c->add_option("--seed", a.seed, "Sample selection seed")->capture_default_str();
}

int run_export(const ExportArgs& a) {
  if (!fs::exists(fs::path(a.ckpt) / "model.json")) throw std::runtime_error("checkpoint not found: " + a.ckpt);
  const model::Model model = model::Model::load(a.ckpt);
  const data::Dataset ds = data::load_dataset(a.data);
  if (!ds.manifest.splits.contains(a.split)) throw UsageError("unknown split '" + a.split + "'");
  auto idx = ds.split(a.split);
  std::size_t n = a.n;
  if (n > idx.size()) {
    std::fprintf(stderr, "warning: --n %zu exceeds the %zu samples in %s; exporting %zu\n", n, idx.size(),
                 a.split.c_str(), idx.size());
    n = idx.size();
  }
  std::mt19937_64 rng(a.seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<const data::Sample*> picked;
  for (std::size_t i = 0; i < n; ++i) picked.push_back(&ds.samples[idx[i]]);
  const auto files = eval::export_attention(model, picked, ds.manifest.keypoint_names, a.out);
  std::printf("wrote %zu files for %zu samples to %s\n", files.size(), n, a.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"privpool: privileged pooling experiments"};
  app.require_subcommand(1);
  GenArgs gen;
  TrainArgs train;
  EvalArgs ev;
  CheckArgs check;
  ExportArgs exp;
  add_gen(app, gen);
  add_train(app, train);
  add_eval(app, ev);
  add_check(app, check);
  add_export(app, exp);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    if (const auto* sub = app.get_subcommand("gen-data"); sub->parsed()) return run_gen(*sub, gen);
    if (const auto* sub = app.get_subcommand("train"); sub->parsed()) return run_train(*sub, train);
    if (app.get_subcommand("eval")->parsed()) return run_eval(ev);
    if (app.get_subcommand("check")->parsed()) return run_check(check);
    if (app.get_subcommand("export-attention")->parsed()) return run_export(exp);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
