#pragma once

#include "xma/common.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace xma {

// Fully-resolved run configuration. Every key has a documented default;
// unknown keys are an error so typos cannot silently fall back.
struct RunConfig {
  // run
  uint64_t seed = 1;
  std::string out_dir = "out";
  std::string checkpoint;
  std::string resume;

  // data
  std::string dataset = "synthetic";  // synthetic | cifar10
  std::string data_dir = "data";
  int train_limit = 0;  // 0 = use all records
  int synth_train = 10000;
  int synth_val = 4000;
  double synth_noise = 0.03;

  // model
  int patch_size = 4;
  int input_side = 32;
  int dim = 96;
  int heads = 4;
  int depth = 6;
  int cross_depth = 2;
  double layer_scale = 0.1;
  int mlp_ratio = 4;
  std::string aggregation = "cait-cls";  // cait-cls | vit-cls | avg-pool

  // heads
  int head_hidden = 512;
  int head_out = 64;
  int proj_layers = 3;
  int pred_layers = 2;

  // training
  int epochs = 30;
  int batch_size = 256;
  double base_lr = 1.5e-4;
  bool lr_scaling = true;  // effective lr = base_lr * batch/256
  double weight_decay = 0.1;
  bool wd_exclude_1d = true;
  int warmup_epochs = 10;
  double mask_ratio = 0.8;
  int num_masks = 2;
  std::string mask_mode = "independent";  // independent | partition
  double ema_base = 0.996;
  std::string augment = "shared-crop+color";
  std::string objective = "byol";  // byol | infonce
  double temperature = 0.2;
  bool infonce_predictor = true;
  double grad_clip = 0.0;  // 0 = off
  int eval_every = 5;
  int ckpt_every = 10;
  int chunk_images = 64;
  bool deterministic_timing = false;  // write 0 in the wall_ms column

  // augmentation parameters
  double crop_scale_min = 0.2;
  double crop_scale_max = 1.0;
  double flip_prob = 0.5;
  double jitter_brightness = 0.4;
  double jitter_contrast = 0.4;
  double jitter_saturation = 0.2;
  double jitter_hue = 0.1;
  double p_gray = 0.2;

  // probes
  int knn_k = 20;
  int knn_gallery = 2000;  // 0 = gallery_fraction of the split
  int knn_query = 1000;
  double gallery_fraction = 0.2;
  int probe_epochs = 30;
  double probe_lr = 0.01;
  int probe_batch = 256;
  std::string feature_source = "instance";  // instance | avg-tokens

  // attention export
  int attn_layer = -1;  // -1 = every layer
  std::string attn_queries = "0";
  int attn_image = 0;

  // inversion
  int inv_iters = 3000;
  double inv_lr = 0.001;
  double inv_ratio = 0.8;
  std::string generator = "mlp";  // mlp | direct
  int gen_hidden = 128;
  int gen_layers = 3;
  int gen_noise_dim = 16;
  int gen_fourier = 4;
  int inv_image = 0;

  // locality retrieval
  int loc_scales = 5;
  int loc_locs = 5;
  int loc_image = 0;
  int loc_query_image = -1;  // -1 = same as loc_image
  double loc_query_scale = 0.5;
};

// Parses `key = value` lines; '#' starts a comment. Later assignments win.
RunConfig parse_config(const std::string& path);

// Applies one override (used for command-line flags, which beat file values).
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value,
                    const std::string& where = "command line");

// Cross-field checks that single-key ranges cannot express.
void validate(const RunConfig& cfg);

// Serializes every key (defaults included) in registry order.
std::string resolved_config(const RunConfig& cfg);

std::vector<std::string> config_key_names();

}  // namespace xma
