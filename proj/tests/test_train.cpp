#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "xma/trainer.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

using namespace xma;

namespace {

RunConfig micro_run_config() {
  RunConfig cfg;
  cfg.dataset = "synthetic";
  cfg.patch_size = 4;
  cfg.input_side = 16;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.depth = 2;
  cfg.cross_depth = 1;
  cfg.mlp_ratio = 2;
  cfg.head_hidden = 16;
  cfg.head_out = 8;
  cfg.mask_ratio = 0.75;
  cfg.num_masks = 2;
  cfg.chunk_images = 3;
  cfg.batch_size = 4;
  cfg.knn_gallery = 16;
  cfg.knn_query = 8;
  cfg.knn_k = 3;
  cfg.deterministic_timing = true;
  return cfg;
}

template <typename S>
std::vector<ViewPair> make_batch(const RunConfig& cfg, int count, uint64_t seed) {
  SyntheticSpec spec;
  spec.count = count;
  spec.side = cfg.input_side;
  auto images = make_synthetic_shapes(spec, Rng(seed));
  AugmentConfig acfg = augment_config_from(cfg);
  std::vector<ViewPair> batch;
  for (int i = 0; i < count; ++i)
    batch.push_back(make_view_pair(images[size_t(i)], Rng(seed).derive(uint64_t(i)),
                                   parse_augment_scheme(cfg.augment), acfg));
  return batch;
}

std::vector<MaskSet> make_masks(const RunConfig& cfg, int count, uint64_t seed) {
  const ViTConfig vit = vit_config_from(cfg);
  std::vector<MaskSet> masks;
  for (int i = 0; i < count; ++i)
    masks.push_back(sample_multi_masks(vit.tokens(), mask_spec_from(cfg),
                                       Rng(seed).derive(uint64_t(i))));
  return masks;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::string temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  return p.string();
}

}  // namespace

TEST_CASE("ema momentum schedule endpoints and midpoint") {
  CHECK(ema_momentum_at(0, 1000, 0.996) == 0.996);
  CHECK(ema_momentum_at(1000, 1000, 0.996) == 1.0);
  CHECK(ema_momentum_at(500, 1000, 0.996) == doctest::Approx(0.998).epsilon(1e-12));
  // non-decreasing over the run
  double prev = 0.0;
  for (int t = 0; t <= 100; ++t) {
    const double m = ema_momentum_at(t, 100, 0.996);
    CHECK(m >= prev);
    prev = m;
  }
  CHECK_THROWS_AS(ema_momentum_at(-1, 10, 0.996), ValueError);
  CHECK_THROWS_AS(ema_momentum_at(11, 10, 0.996), ValueError);
}

TEST_CASE("learning rate schedule") {
  CHECK(lr_at(0, 10, 100, 3.0) == 0.0);
  CHECK(lr_at(10, 10, 100, 3.0) == 3.0);
  CHECK(lr_at(100, 10, 100, 3.0) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(lr_at(55, 10, 100, 3.0) == doctest::Approx(1.5).epsilon(1e-12));
  CHECK_THROWS_AS(lr_at(5, 100, 100, 3.0), ValueError);
  CHECK_THROWS_AS(lr_at(5, 101, 100, 3.0), ValueError);
}

TEST_CASE("ema_update arithmetic") {
  ViTConfig vit;
  vit.patch = 4;
  vit.input_side = 8;
  vit.dim = 4;
  vit.heads = 2;
  vit.depth = 1;
  vit.cross_depth = 1;
  ParamStore<float> student;
  init_encoder_params(student, vit, Rng(1).derive(streams::kInit));
  ParamStore<float> teacher = make_teacher_copy(student);

  // drift the student
  for (auto& [name, t] : student) t.raw().array() += 1.0f;

  // m = 1 leaves the teacher bitwise unchanged
  std::map<std::string, Mat<float>> before;
  for (auto& [name, t] : teacher) before[name] = t.value();
  ema_update(teacher, student, 1.0f);
  for (auto& [name, t] : teacher)
    CHECK(std::memcmp(before[name].data(), t.value().data(),
                      sizeof(float) * size_t(t.size())) == 0);

  // m = 0 copies the student
  ema_update(teacher, student, 0.0f);
  for (auto& [name, t] : teacher)
    CHECK((t.value() - student.at(name).value()).cwiseAbs().maxCoeff() == 0.0f);

  // m = 0.5 with theta_t = 2, theta_s = 4 gives 3
  for (auto& [name, t] : teacher) t.raw().setConstant(2.0f);
  for (auto& [name, t] : student) t.raw().setConstant(4.0f);
  ema_update(teacher, student, 0.5f);
  for (auto& [name, t] : teacher) CHECK((t.value().array() == 3.0f).all());

  ParamStore<float> broken;
  broken.add("stray", Mat<float>::Zero(1, 2), 1, false);
  CHECK_THROWS_AS(ema_update(broken, student, 0.5f), ValueError);
}

TEST_CASE("adamw closed-form steps") {
  ParamStore<double> params;
  params.add("w", Mat<double>::Ones(1, 1) * 1.0, 2, true);
  AdamState<double> opt;

  // zero gradient, zero decay: parameters unchanged
  params.at("w").node()->accumulate(Mat<double>::Zero(1, 1));
  adamw_step(params, opt, 0.1, 0.0, false);
  CHECK(params.at("w").value()(0, 0) == 1.0);
  params.clear_grads();

  // first real step with g=1: bias-corrected update is ~ -lr * sign(g)
  ParamStore<double> p2;
  p2.add("w", Mat<double>::Ones(1, 1), 2, true);
  AdamState<double> o2;
  p2.at("w").node()->accumulate(Mat<double>::Ones(1, 1));
  adamw_step(p2, o2, 0.1, 0.0, false);
  CHECK(p2.at("w").value()(0, 0) == doctest::Approx(0.9).epsilon(1e-6));

  // decay-only step: w <- 0.99 w
  ParamStore<double> p3;
  p3.add("w", Mat<double>::Ones(1, 1), 2, true);
  AdamState<double> o3;
  p3.at("w").node()->accumulate(Mat<double>::Zero(1, 1));
  adamw_step(p3, o3, 0.1, 0.1, false);
  CHECK(p3.at("w").value()(0, 0) == doctest::Approx(0.99).epsilon(1e-12));

  // exclude_1d skips decay on vectors
  ParamStore<double> p4;
  p4.add("b", Mat<double>::Ones(1, 3), 1, true);
  AdamState<double> o4;
  p4.at("b").node()->accumulate(Mat<double>::Zero(1, 3));
  adamw_step(p4, o4, 0.1, 0.1, true);
  CHECK((p4.at("b").value().array() == 1.0).all());
}

TEST_CASE("train_step: m=1 freezes the teacher bitwise; teacher gets no grads") {
  RunConfig cfg = micro_run_config();
  cfg.num_masks = 1;
  TrainState<float> state = init_train_state<float>(cfg);
  auto batch = make_batch<float>(cfg, cfg.batch_size, 5);
  auto masks = make_masks(cfg, cfg.batch_size, 6);

  std::map<std::string, Mat<float>> before;
  for (auto& [name, t] : state.teacher) before[name] = t.value();

  StepMetrics m = train_step(state, batch, masks, cfg, 1e-3f, 1.0f);
  CHECK(std::isfinite(m.loss));
  CHECK(state.step == 1);
  for (auto& [name, t] : state.teacher) {
    CHECK(std::memcmp(before[name].data(), t.value().data(), sizeof(float) * size_t(t.size())) == 0);
    CHECK_FALSE(t.has_grad());
    CHECK((t.grad_or_zero().array() == 0.0f).all());
  }
  // optimizer state tracks student parameters only
  for (const auto& [name, mm] : state.opt.m) CHECK(state.student.contains(name));
}

TEST_CASE("teacher forward count equals batch size for K in {1,2,4}") {
  for (int k : {1, 2, 4}) {
    RunConfig cfg = micro_run_config();
    cfg.num_masks = k;
    TrainState<float> state = init_train_state<float>(cfg);
    auto batch = make_batch<float>(cfg, cfg.batch_size, 7);
    auto masks = make_masks(cfg, cfg.batch_size, 8);
    StepMetrics m = compute_batch_gradients(state, batch, masks, cfg);
    CHECK(m.teacher_forwards == cfg.batch_size);
  }
}

TEST_CASE("K=2 gradient equals the mean of the two K=1 gradients (64-bit)") {
  RunConfig cfg = micro_run_config();
  cfg.num_masks = 2;
  auto batch = make_batch<double>(cfg, cfg.batch_size, 11);
  auto masks = make_masks(cfg, cfg.batch_size, 12);

  auto run = [&](const std::vector<MaskSet>& use_masks, int num_masks) {
    RunConfig c = cfg;
    c.num_masks = num_masks;
    TrainState<double> state = init_train_state<double>(c);
    compute_batch_gradients(state, batch, use_masks, c);
    std::map<std::string, Mat<double>> grads;
    for (auto& [name, t] : state.student) grads[name] = t.grad_or_zero();
    return grads;
  };

  auto g2 = run(masks, 2);
  std::vector<MaskSet> only0, only1;
  for (const auto& ms : masks) {
    only0.push_back({ms[0]});
    only1.push_back({ms[1]});
  }
  auto ga = run(only0, 1);
  auto gb = run(only1, 1);

  double worst = 0.0;
  for (const auto& [name, g] : g2) {
    Mat<double> mean = 0.5 * (ga.at(name) + gb.at(name));
    worst = std::max(worst, (g - mean).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("infonce objective trains without predictor when disabled") {
  RunConfig cfg = micro_run_config();
  cfg.objective = "infonce";
  cfg.infonce_predictor = false;
  TrainState<float> state = init_train_state<float>(cfg);
  auto batch = make_batch<float>(cfg, cfg.batch_size, 13);
  auto masks = make_masks(cfg, cfg.batch_size, 14);
  StepMetrics m = compute_batch_gradients(state, batch, masks, cfg);
  CHECK(std::isfinite(m.loss));
  CHECK(m.loss > 0.0);
  // predictor received no gradient
  CHECK_FALSE(state.student.at("pred.out.w").has_grad());
  CHECK(state.student.at("proj.out.w").has_grad());
}

TEST_CASE("checkpoint save -> load -> save is byte-identical") {
  RunConfig cfg = micro_run_config();
  TrainState<float> state = init_train_state<float>(cfg);
  auto batch = make_batch<float>(cfg, cfg.batch_size, 15);
  auto masks = make_masks(cfg, cfg.batch_size, 16);
  train_step(state, batch, masks, cfg, 1e-3f, 0.996f);

  const std::string p1 = temp_dir("xma_ck") + ".xma";
  write_checkpoint(p1, checkpoint_from_state(state));
  TrainState<float> loaded = state_from_checkpoint(read_checkpoint(p1), cfg);
  const std::string p2 = p1 + ".again";
  write_checkpoint(p2, checkpoint_from_state(loaded));
  CHECK(read_file(p1) == read_file(p2));
  CHECK(loaded.step == state.step);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("checkpoint rejects foreign files and wrong shapes") {
  const std::string bad = temp_dir("xma_bad") + ".xma";
  {
    std::ofstream out(bad, std::ios::binary);
    out << "NOPE this is not a checkpoint";
  }
  CHECK_THROWS_AS(read_checkpoint(bad), IoError);
  std::remove(bad.c_str());

  RunConfig cfg = micro_run_config();
  TrainState<float> state = init_train_state<float>(cfg);
  const std::string p = temp_dir("xma_shape") + ".xma";
  write_checkpoint(p, checkpoint_from_state(state));
  RunConfig other = cfg;
  other.dim = 12;
  other.heads = 2;
  CHECK_THROWS_AS(state_from_checkpoint(read_checkpoint(p), other), IoError);
  std::remove(p.c_str());
}

TEST_CASE("train_loop epochs=0 writes the initial checkpoint only") {
  RunConfig cfg = micro_run_config();
  cfg.epochs = 0;
  cfg.warmup_epochs = 0;
  cfg.synth_train = 16;
  cfg.synth_val = 8;
  cfg.out_dir = temp_dir("xma_zero");
  TrainSummary s = train_loop(cfg, nullptr);
  CHECK(s.final_step == 0);
  CHECK(std::filesystem::exists(cfg.out_dir + "/ckpt-final.xma"));
  CHECK(std::filesystem::exists(cfg.out_dir + "/config.resolved"));
  CheckpointData ck = read_checkpoint(cfg.out_dir + "/ckpt-final.xma");
  CHECK(ck.step == 0);
  std::filesystem::remove_all(cfg.out_dir);
}

TEST_CASE("two identical runs produce byte-identical metrics and checkpoints") {
  RunConfig cfg = micro_run_config();
  cfg.epochs = 3;
  cfg.warmup_epochs = 1;
  cfg.synth_train = 24;
  cfg.synth_val = 24;
  cfg.batch_size = 8;
  cfg.eval_every = 1;
  cfg.ckpt_every = 10;
  cfg.knn_gallery = 12;
  cfg.knn_query = 8;

  RunConfig a = cfg;
  a.out_dir = temp_dir("xma_det_a");
  RunConfig b = cfg;
  b.out_dir = temp_dir("xma_det_b");
  train_loop(a, nullptr);
  train_loop(b, nullptr);
  CHECK(read_file(a.out_dir + "/metrics.csv") == read_file(b.out_dir + "/metrics.csv"));
  CHECK(read_file(a.out_dir + "/ckpt-final.xma") == read_file(b.out_dir + "/ckpt-final.xma"));
  std::filesystem::remove_all(a.out_dir);
  std::filesystem::remove_all(b.out_dir);
}

TEST_CASE("resumed run matches the uninterrupted run bit-exactly") {
  RunConfig cfg = micro_run_config();
  cfg.epochs = 4;
  cfg.warmup_epochs = 1;
  cfg.synth_train = 24;
  cfg.synth_val = 16;
  cfg.batch_size = 8;
  cfg.eval_every = 2;
  cfg.ckpt_every = 2;
  cfg.knn_gallery = 12;
  cfg.knn_query = 4;

  RunConfig full = cfg;
  full.out_dir = temp_dir("xma_res_full");
  train_loop(full, nullptr);

  RunConfig resumed = cfg;
  resumed.out_dir = temp_dir("xma_res_part");
  resumed.resume = full.out_dir + "/ckpt-2.xma";
  train_loop(resumed, nullptr);

  CHECK(read_file(full.out_dir + "/ckpt-final.xma") ==
        read_file(resumed.out_dir + "/ckpt-final.xma"));
  std::filesystem::remove_all(full.out_dir);
  std::filesystem::remove_all(resumed.out_dir);
}

TEST_CASE("config parsing round trip and errors") {
  const std::string path = temp_dir("xma_cfg") + ".cfg";
  {
    std::ofstream out(path);
    out << "# comment line\n";
    out << "mask_ratio = 0.8\n";
    out << "epochs = 5   # trailing comment\n";
    out << "augment = shared-crop+color\n";
  }
  RunConfig cfg = parse_config(path);
  CHECK(cfg.mask_ratio == 0.8);
  CHECK(cfg.epochs == 5);
  CHECK(cfg.augment == "shared-crop+color");

  {
    std::ofstream out(path);
    out << "mask_ratio = 1.5\n";
  }
  CHECK_THROWS_WITH_AS(parse_config(path), doctest::Contains("mask_ratio"), ValueError);

  {
    std::ofstream out(path);
    out << "no_such_key = 1\n";
  }
  CHECK_THROWS_WITH_AS(parse_config(path), doctest::Contains("no_such_key"), ValueError);

  RunConfig cfg2;
  apply_override(cfg2, "num_masks", "4");
  CHECK(cfg2.num_masks == 4);
  CHECK_THROWS_AS(apply_override(cfg2, "num_masks", "banana"), ValueError);

  // resolved config covers every key and reparses to the same values
  const std::string resolved = temp_dir("xma_resolved") + ".cfg";
  {
    std::ofstream out(resolved);
    out << resolved_config(cfg2);
  }
  RunConfig cfg3 = parse_config(resolved);
  CHECK(resolved_config(cfg3) == resolved_config(cfg2));
  CHECK(config_key_names().size() > 60);
  std::remove(path.c_str());
  std::remove(resolved.c_str());
}

TEST_CASE("validate catches cross-field mistakes") {
  RunConfig cfg = micro_run_config();
  cfg.dim = 9;
  CHECK_THROWS_AS(validate(cfg), ValueError);
  cfg = micro_run_config();
  cfg.epochs = 5;
  cfg.warmup_epochs = 5;
  CHECK_THROWS_AS(validate(cfg), ValueError);
  cfg = micro_run_config();
  cfg.mask_ratio = 0.99;  // keeps zero of 16 tokens
  CHECK_THROWS_AS(validate(cfg), ValueError);
}
