#pragma once

#include "xma/checkpoint.hpp"
#include "xma/config.hpp"
#include "xma/eval.hpp"
#include "xma/heads.hpp"
#include "xma/optim.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace xma {

// Raised when a step produces a non-finite loss; carries the diagnostic dump.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

inline ViTConfig vit_config_from(const RunConfig& cfg) {
  ViTConfig v;
  v.patch = cfg.patch_size;
  v.input_side = cfg.input_side;
  v.dim = cfg.dim;
  v.heads = cfg.heads;
  v.depth = cfg.depth;
  v.cross_depth = cfg.cross_depth;
  v.layer_scale = cfg.layer_scale;
  v.mlp_ratio = cfg.mlp_ratio;
  v.aggregation = parse_aggregation(cfg.aggregation);
  return v;
}

inline HeadConfig head_config_from(const RunConfig& cfg) {
  HeadConfig h;
  h.hidden = cfg.head_hidden;
  h.out = cfg.head_out;
  h.proj_layers = cfg.proj_layers;
  h.pred_layers = cfg.pred_layers;
  return h;
}

inline AugmentConfig augment_config_from(const RunConfig& cfg) {
  AugmentConfig a;
  a.crop_scale_min = cfg.crop_scale_min;
  a.crop_scale_max = cfg.crop_scale_max;
  a.flip_prob = cfg.flip_prob;
  a.brightness = cfg.jitter_brightness;
  a.contrast = cfg.jitter_contrast;
  a.saturation = cfg.jitter_saturation;
  a.hue = cfg.jitter_hue;
  a.p_gray = cfg.p_gray;
  a.out_side = cfg.input_side;
  return a;
}

inline MaskSpec mask_spec_from(const RunConfig& cfg) {
  MaskSpec m;
  m.ratio = cfg.mask_ratio;
  m.num_masks = cfg.num_masks;
  m.mode = cfg.mask_mode == "partition" ? MaskMode::kPartition : MaskMode::kIndependent;
  return m;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct Dataset {
  std::vector<ImageRecord> train;
  std::vector<ImageRecord> val;
};

inline Dataset load_dataset(const RunConfig& cfg) {
  Dataset data;
  if (cfg.dataset == "cifar10") {
    namespace fs = std::filesystem;
    for (int i = 1; i <= 5; ++i) {
      const std::string path = cat(cfg.data_dir, "/data_batch_", i, ".bin");
      if (!fs::exists(path)) continue;
      auto records = load_cifar10(path);
      data.train.insert(data.train.end(), records.begin(), records.end());
    }
    if (data.train.empty())
      throw IoError(cat("no CIFAR-10 train batches (data_batch_*.bin) under ", cfg.data_dir));
    const std::string test_path = cat(cfg.data_dir, "/test_batch.bin");
    if (fs::exists(test_path)) data.val = load_cifar10(test_path);
  } else {
    Rng root = Rng(cfg.seed).derive(streams::kSynthetic);
    SyntheticSpec spec;
    spec.side = cfg.input_side;
    spec.noise = cfg.synth_noise;
    spec.count = cfg.synth_train;
    data.train = make_synthetic_shapes(spec, root.derive(0));
    spec.count = cfg.synth_val;
    data.val = make_synthetic_shapes(spec, root.derive(1));
  }
  if (cfg.train_limit > 0 && static_cast<int>(data.train.size()) > cfg.train_limit)
    data.train.resize(static_cast<size_t>(cfg.train_limit));
  return data;
}

// ---------------------------------------------------------------------------
// Train state
// ---------------------------------------------------------------------------

template <typename S>
struct TrainState {
  ParamStore<S> student;  // encoder + projector + predictor
  ParamStore<S> teacher;  // encoder + projector, no gradients
  AdamState<S> opt;
  uint64_t step = 0;
  Rng root = Rng(0);
};

template <typename S>
TrainState<S> init_train_state(const RunConfig& cfg) {
  const ViTConfig vit = vit_config_from(cfg);
  const HeadConfig head = head_config_from(cfg);
  TrainState<S> state;
  state.root = Rng(cfg.seed);
  const Rng init = state.root.derive(streams::kInit);
  init_encoder_params(state.student, vit, init);
  init_head_params(state.student, vit, head, init);
  state.teacher = make_teacher_copy(state.student);
  return state;
}

struct StepMetrics {
  double loss = 0.0;
  long teacher_forwards = 0;
  long zero_norm_rows = 0;
  double wall_ms = 0.0;
};

// ---------------------------------------------------------------------------
// One optimization step
// ---------------------------------------------------------------------------

// Shared-teacher multi-mask gradient computation: the teacher runs exactly
// once per image regardless of K; every (image, mask) student pass deposits
// grad/(B*K) on the student parameters, which realizes the averaged
// multi-mask loss. Work is chunked to bound graph memory.
template <typename S>
StepMetrics compute_batch_gradients(TrainState<S>& state, const std::vector<ViewPair>& batch,
                                    const std::vector<MaskSet>& masks, const RunConfig& cfg) {
  const Index b = static_cast<Index>(batch.size());
  const int num_masks = cfg.num_masks;
  if (b == 0) throw ValueError("compute_batch_gradients: empty batch");
  if (static_cast<Index>(masks.size()) != b)
    throw ValueError("compute_batch_gradients: one MaskSet per image required");
  for (const MaskSet& ms : masks)
    if (static_cast<int>(ms.size()) != num_masks)
      throw ValueError("compute_batch_gradients: MaskSet size != num_masks");

  const ViTConfig vit = vit_config_from(cfg);
  const HeadConfig head = head_config_from(cfg);
  const Mat<S> pe = sinusoidal_posenc<S>(vit.tokens(), vit.dim);
  const Index chunk = cfg.chunk_images;
  const bool byol = cfg.objective == "byol";
  const bool use_predictor = byol || cfg.infonce_predictor;

  std::vector<Mat<S>> teacher_tokens(static_cast<size_t>(b));
  std::vector<Mat<S>> student_tokens(static_cast<size_t>(b));
  for (Index i = 0; i < b; ++i) {
    teacher_tokens[static_cast<size_t>(i)] = patchify<S>(batch[static_cast<size_t>(i)].teacher, vit.patch);
    student_tokens[static_cast<size_t>(i)] = patchify<S>(batch[static_cast<size_t>(i)].student, vit.patch);
  }

  StepMetrics metrics;

  // Teacher bank: full views, no tape anywhere near, hence stop-gradient by
  // construction.
  Mat<S> z_bank(b, head.out);
  for (Index at = 0; at < b; at += chunk) {
    const Index n = std::min(chunk, b - at);
    std::vector<EncodeInput<S>> inputs(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i)
      inputs[static_cast<size_t>(i)].tokens = &teacher_tokens[static_cast<size_t>(at + i)];
    EncodeResult<S> enc = encode_batch(inputs, state.teacher, vit, pe);
    z_bank.middleRows(at, n) = projector_forward(enc.instance, state.teacher, head).value();
    metrics.teacher_forwards += n;
  }

  const S seed = S(1) / static_cast<S>(b * num_masks);
  double loss_sum = 0.0;
  for (int k = 0; k < num_masks; ++k) {
    for (Index at = 0; at < b; at += chunk) {
      const Index n = std::min(chunk, b - at);
      Tape<S> tape;
      typename Tape<S>::Scope scope(tape);
      std::vector<EncodeInput<S>> inputs(static_cast<size_t>(n));
      for (Index i = 0; i < n; ++i) {
        inputs[static_cast<size_t>(i)].tokens = &student_tokens[static_cast<size_t>(at + i)];
        inputs[static_cast<size_t>(i)].kept = &masks[static_cast<size_t>(at + i)][static_cast<size_t>(k)];
      }
      EncodeResult<S> enc = encode_batch(inputs, state.student, vit, pe);
      Tensor<S> z = projector_forward(enc.instance, state.student, head);
      Tensor<S> q = use_predictor ? predictor_forward(z, state.student, head) : z;

      Tensor<S> loss;
      if (byol) {
        Tensor<S> targets = Tensor<S>::from_matrix(z_bank.middleRows(at, n));
        loss = byol_loss_rows_sum(q, targets, &metrics.zero_norm_rows);
      } else {
        IndexList pos(static_cast<size_t>(n));
        for (Index i = 0; i < n; ++i) pos[static_cast<size_t>(i)] = at + i;
        loss = infonce_rows_sum(q, z_bank, pos, static_cast<S>(cfg.temperature));
      }
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value))
        throw DivergenceError(cat("non-finite loss at step ", state.step, " (mask ", k,
                                  ", images [", at, ",", at + n, ")): ", value));
      loss_sum += value;
      tape.backward(loss, seed);
    }
  }
  metrics.loss = loss_sum / static_cast<double>(b * num_masks);
  return metrics;
}

template <typename S>
StepMetrics train_step(TrainState<S>& state, const std::vector<ViewPair>& batch,
                       const std::vector<MaskSet>& masks, const RunConfig& cfg, S lr,
                       S ema_momentum) {
  const auto t0 = std::chrono::steady_clock::now();
  StepMetrics metrics = compute_batch_gradients(state, batch, masks, cfg);
  if (cfg.grad_clip > 0.0) clip_gradients(state.student, static_cast<S>(cfg.grad_clip));
  adamw_step(state.student, state.opt, lr, static_cast<S>(cfg.weight_decay), cfg.wd_exclude_1d);
  state.student.clear_grads();
  ema_update(state.teacher, state.student, ema_momentum);
  state.step += 1;
  metrics.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return metrics;
}

// ---------------------------------------------------------------------------
// Checkpoint binding
// ---------------------------------------------------------------------------

inline CheckpointData checkpoint_from_state(const TrainState<float>& state) {
  CheckpointData ck;
  ck.step = state.step;
  for (const auto& [name, t] : state.student)
    ck.tensors.emplace("student." + name, std::make_pair(t.value(), t.rank()));
  for (const auto& [name, t] : state.teacher)
    ck.tensors.emplace("teacher." + name, std::make_pair(t.value(), t.rank()));
  for (const auto& [name, m] : state.opt.m) {
    const int rank = state.student.at(name).rank();
    ck.tensors.emplace("opt.m." + name, std::make_pair(m, rank));
    ck.tensors.emplace("opt.v." + name, std::make_pair(state.opt.v.at(name), rank));
  }
  ck.rng_blob.resize(16);
  const uint64_t key = state.root.key();
  const uint64_t st = state.root.state();
  std::memcpy(ck.rng_blob.data(), &key, 8);
  std::memcpy(ck.rng_blob.data() + 8, &st, 8);
  return ck;
}

inline TrainState<float> state_from_checkpoint(const CheckpointData& ck, const RunConfig& cfg) {
  TrainState<float> state = init_train_state<float>(cfg);
  state.step = ck.step;
  auto restore = [&](ParamStore<float>& store, const std::string& prefix) {
    for (auto& [name, t] : store) {
      auto it = ck.tensors.find(prefix + name);
      if (it == ck.tensors.end())
        throw IoError(cat("checkpoint misses tensor ", prefix, name,
                          " (incompatible model configuration?)"));
      const Mat<float>& v = it->second.first;
      if (v.rows() != t.rows() || v.cols() != t.cols())
        throw IoError(cat("checkpoint tensor ", prefix, name, " is ", v.rows(), "x", v.cols(),
                          ", expected ", t.rows(), "x", t.cols()));
      t.raw() = v;
    }
  };
  restore(state.student, "student.");
  restore(state.teacher, "teacher.");
  for (const auto& [name, entry] : ck.tensors) {
    if (name.rfind("opt.m.", 0) == 0) state.opt.m[name.substr(6)] = entry.first;
    if (name.rfind("opt.v.", 0) == 0) state.opt.v[name.substr(6)] = entry.first;
  }
  state.opt.t = static_cast<int64_t>(ck.step);
  if (ck.rng_blob.size() == 16) {
    uint64_t key = 0, st = 0;
    std::memcpy(&key, ck.rng_blob.data(), 8);
    std::memcpy(&st, ck.rng_blob.data() + 8, 8);
    state.root = Rng::restore(key, st);
  } else {
    state.root = Rng(cfg.seed);
  }
  return state;
}

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path) : out_(path, std::ios::trunc) {
    if (!out_) throw IoError(cat("cannot write metrics file: ", path));
    out_ << "step,epoch,loss,lr,ema_momentum,teacher_forwards,knn_train,knn_val,wall_ms\n";
  }

  void row(uint64_t step, int epoch, double loss, double lr, double ema, long teacher_forwards,
           double knn_train, double knn_val, double wall_ms) {
    char buf[256];
    std::string kt = knn_train < 0 ? "" : format(knn_train);
    std::string kv = knn_val < 0 ? "" : format(knn_val);
    std::snprintf(buf, sizeof(buf), "%llu,%d,%.9g,%.9g,%.9g,%ld,%s,%s,%.6g\n",
                  static_cast<unsigned long long>(step), epoch, loss, lr, ema, teacher_forwards,
                  kt.c_str(), kv.c_str(), wall_ms);
    out_ << buf;
    out_.flush();
  }

 private:
  static std::string format(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
  }
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Full pretraining loop
// ---------------------------------------------------------------------------

struct TrainSummary {
  uint64_t final_step = 0;
  double final_loss = 0.0;
  double knn_train = -1.0;
  double knn_val = -1.0;
  std::string final_checkpoint;
  std::vector<double> epoch_losses;
};

struct KnnSplitResult {
  double train_acc = -1.0;
  double val_acc = -1.0;
};

// Gallery = leading slice, queries = following slice of each split; the
// teacher encodes clean full views.
inline KnnSplitResult knn_eval(const ParamStore<float>& teacher, const RunConfig& cfg,
                               const Dataset& data) {
  const ViTConfig vit = vit_config_from(cfg);
  const FeatureSource source = parse_feature_source(cfg.feature_source);
  auto split_probe = [&](const std::vector<ImageRecord>& split) -> double {
    const Index size = static_cast<Index>(split.size());
    Index gallery = cfg.knn_gallery > 0
                        ? cfg.knn_gallery
                        : static_cast<Index>(cfg.gallery_fraction * static_cast<double>(size));
    gallery = std::min(gallery, size - 1);
    if (gallery < 1) return -1.0;
    const Index query = std::min<Index>(cfg.knn_query, size - gallery);
    if (query < 1) return -1.0;
    const int k = static_cast<int>(std::min<Index>(cfg.knn_k, gallery));
    Mat<float> gf = extract_features(split, 0, gallery, teacher, vit, source, cfg.chunk_images);
    Mat<float> qf = extract_features(split, gallery, query, teacher, vit, source, cfg.chunk_images);
    std::vector<int> gl(static_cast<size_t>(gallery)), ql(static_cast<size_t>(query));
    for (Index i = 0; i < gallery; ++i) gl[static_cast<size_t>(i)] = split[static_cast<size_t>(i)].label;
    for (Index i = 0; i < query; ++i) ql[static_cast<size_t>(i)] = split[static_cast<size_t>(gallery + i)].label;
    return knn_probe(gf, gl, qf, ql, k);
  };
  KnnSplitResult r;
  r.train_acc = split_probe(data.train);
  if (!data.val.empty()) r.val_acc = split_probe(data.val);
  return r;
}

inline std::vector<Index> epoch_order(Index n, Rng rng) {
  std::vector<Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  for (Index i = n - 1; i > 0; --i)
    std::swap(order[static_cast<size_t>(i)],
              order[static_cast<size_t>(rng.below(static_cast<uint64_t>(i + 1)))]);
  return order;
}

inline TrainSummary train_loop(const RunConfig& cfg, std::ostream* log = &std::cerr) {
  validate(cfg);
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  Dataset data = load_dataset(cfg);
  const Index n_train = static_cast<Index>(data.train.size());
  const Index spe = n_train / cfg.batch_size;  // incomplete tail batches are dropped
  if (cfg.epochs > 0 && spe == 0)
    throw ValueError(cat("train_loop: batch size ", cfg.batch_size, " exceeds dataset of ", n_train));
  const int64_t total_steps = static_cast<int64_t>(cfg.epochs) * spe;
  const int64_t warmup_steps = static_cast<int64_t>(cfg.warmup_epochs) * spe;
  const double eff_lr = cfg.base_lr * (cfg.lr_scaling ? static_cast<double>(cfg.batch_size) / 256.0 : 1.0);

  TrainState<float> state;
  if (!cfg.resume.empty()) {
    state = state_from_checkpoint(read_checkpoint(cfg.resume), cfg);
    if (spe > 0 && state.step % static_cast<uint64_t>(spe) != 0)
      throw ValueError(cat("resume: checkpoint step ", state.step,
                           " is not an epoch boundary for ", spe, " steps/epoch"));
  } else {
    state = init_train_state<float>(cfg);
  }

  {
    std::ofstream rc(cat(cfg.out_dir, "/config.resolved"));
    rc << resolved_config(cfg);
  }
  MetricsWriter metrics(cat(cfg.out_dir, "/metrics.csv"));

  const AugmentConfig acfg = augment_config_from(cfg);
  const AugmentScheme scheme = parse_augment_scheme(cfg.augment);
  const MaskSpec mask_spec = mask_spec_from(cfg);
  const ViTConfig vit = vit_config_from(cfg);
  const Rng shuffle_root = state.root.derive(streams::kShuffle);
  const Rng augment_root = state.root.derive(streams::kAugment);
  const Rng mask_root = state.root.derive(streams::kMask);

  TrainSummary summary;
  const int start_epoch = spe > 0 ? static_cast<int>(state.step / static_cast<uint64_t>(spe)) : 0;
  for (int e = start_epoch; e < cfg.epochs; ++e) {
    const std::vector<Index> order = epoch_order(n_train, shuffle_root.derive(static_cast<uint64_t>(e)));
    const Rng aug_epoch = augment_root.derive(static_cast<uint64_t>(e));
    const Rng mask_epoch = mask_root.derive(static_cast<uint64_t>(e));
    double epoch_loss = 0.0;

    for (Index s = 0; s < spe; ++s) {
      std::vector<ViewPair> batch(static_cast<size_t>(cfg.batch_size));
      std::vector<MaskSet> masks(static_cast<size_t>(cfg.batch_size));
      for (Index i = 0; i < cfg.batch_size; ++i) {
        const Index idx = order[static_cast<size_t>(s * cfg.batch_size + i)];
        batch[static_cast<size_t>(i)] =
            make_view_pair(data.train[static_cast<size_t>(idx)],
                           aug_epoch.derive(static_cast<uint64_t>(idx)), scheme, acfg);
        masks[static_cast<size_t>(i)] = sample_multi_masks(
            vit.tokens(), mask_spec, mask_epoch.derive(static_cast<uint64_t>(idx)));
      }
      const int64_t t = static_cast<int64_t>(state.step);
      const double lr = lr_at(t, warmup_steps, total_steps, eff_lr);
      const double mom = ema_momentum_at(t, total_steps, cfg.ema_base);
      StepMetrics m = train_step(state, batch, masks, cfg, static_cast<float>(lr),
                                 static_cast<float>(mom));
      epoch_loss += m.loss;
      summary.final_loss = m.loss;

      double knn_train = -1.0, knn_val = -1.0;
      const bool last_step_of_epoch = (s == spe - 1);
      const bool eval_epoch = ((e + 1) % cfg.eval_every == 0) || (e == cfg.epochs - 1);
      if (last_step_of_epoch && eval_epoch) {
        KnnSplitResult knn = knn_eval(state.teacher, cfg, data);
        knn_train = knn.train_acc;
        knn_val = knn.val_acc;
        summary.knn_train = knn_train;
        summary.knn_val = knn_val;
        if (log != nullptr)
          *log << "epoch " << e << " loss " << epoch_loss / static_cast<double>(spe) << " knn_train "
               << knn_train << " knn_val " << knn_val << "\n";
      }
      metrics.row(state.step - 1, e, m.loss, lr, mom, m.teacher_forwards, knn_train, knn_val,
                  cfg.deterministic_timing ? 0.0 : m.wall_ms);
    }
    summary.epoch_losses.push_back(epoch_loss / static_cast<double>(spe));
    if ((e + 1) % cfg.ckpt_every == 0 && e + 1 < cfg.epochs)
      write_checkpoint(cat(cfg.out_dir, "/ckpt-", e + 1, ".xma"), checkpoint_from_state(state));
  }

  summary.final_step = state.step;
  summary.final_checkpoint = cat(cfg.out_dir, "/ckpt-final.xma");
  write_checkpoint(summary.final_checkpoint, checkpoint_from_state(state));
  return summary;
}

}  // namespace xma
