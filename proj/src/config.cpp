#include "xma/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>

namespace xma {

namespace {

struct KeySpec {
  std::string name;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& where, const std::string& why) {
  throw ValueError(cat("config: key '", key, "' ", why, " (value '", value, "', ", where, ")"));
}

long long parse_ll(const std::string& key, const std::string& value, const std::string& where) {
  long long out = 0;
  auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || p != value.data() + value.size())
    bad_value(key, value, where, "expects an integer");
  return out;
}

double parse_real(const std::string& key, const std::string& value, const std::string& where) {
  try {
    size_t used = 0;
    double out = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("");
    return out;
  } catch (const std::exception&) {
    bad_value(key, value, where, "expects a real number");
  }
}

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void add_int(std::vector<KeySpec>& reg, const char* name, int RunConfig::*field,
             long long lo, long long hi) {
  reg.push_back({name,
                 [name, field, lo, hi](RunConfig& c, const std::string& v, const std::string& w) {
                   long long x = parse_ll(name, v, w);
                   if (x < lo || x > hi)
                     bad_value(name, v, w, cat("out of range [", lo, ",", hi, "]"));
                   c.*field = static_cast<int>(x);
                 },
                 [field](const RunConfig& c) { return std::to_string(c.*field); }});
}

void add_u64(std::vector<KeySpec>& reg, const char* name, uint64_t RunConfig::*field) {
  reg.push_back({name,
                 [name, field](RunConfig& c, const std::string& v, const std::string& w) {
                   uint64_t out = 0;
                   auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
                   if (ec != std::errc() || p != v.data() + v.size())
                     bad_value(name, v, w, "expects an unsigned integer");
                   c.*field = out;
                 },
                 [field](const RunConfig& c) { return std::to_string(c.*field); }});
}

void add_real(std::vector<KeySpec>& reg, const char* name, double RunConfig::*field,
              double lo, double hi) {
  reg.push_back({name,
                 [name, field, lo, hi](RunConfig& c, const std::string& v, const std::string& w) {
                   double x = parse_real(name, v, w);
                   if (!(x >= lo && x <= hi))
                     bad_value(name, v, w, cat("out of range [", lo, ",", hi, "]"));
                   c.*field = x;
                 },
                 [field](const RunConfig& c) { return format_real(c.*field); }});
}

void add_bool(std::vector<KeySpec>& reg, const char* name, bool RunConfig::*field) {
  reg.push_back({name,
                 [name, field](RunConfig& c, const std::string& v, const std::string& w) {
                   if (v == "true" || v == "1")
                     c.*field = true;
                   else if (v == "false" || v == "0")
                     c.*field = false;
                   else
                     bad_value(name, v, w, "expects true/false");
                 },
                 [field](const RunConfig& c) { return (c.*field) ? "true" : "false"; }});
}

void add_string(std::vector<KeySpec>& reg, const char* name, std::string RunConfig::*field) {
  reg.push_back({name,
                 [field](RunConfig& c, const std::string& v, const std::string&) { c.*field = v; },
                 [field](const RunConfig& c) { return c.*field; }});
}

void add_enum(std::vector<KeySpec>& reg, const char* name, std::string RunConfig::*field,
              std::vector<std::string> options) {
  reg.push_back({name,
                 [name, field, options](RunConfig& c, const std::string& v, const std::string& w) {
                   if (std::find(options.begin(), options.end(), v) == options.end()) {
                     std::string opts;
                     for (const auto& o : options) opts += (opts.empty() ? "" : " | ") + o;
                     bad_value(name, v, w, cat("must be one of {", opts, "}"));
                   }
                   c.*field = v;
                 },
                 [field](const RunConfig& c) { return c.*field; }});
}

const std::vector<KeySpec>& registry() {
  static const std::vector<KeySpec> reg = [] {
    std::vector<KeySpec> r;
    add_u64(r, "seed", &RunConfig::seed);
    add_string(r, "out_dir", &RunConfig::out_dir);
    add_string(r, "checkpoint", &RunConfig::checkpoint);
    add_string(r, "resume", &RunConfig::resume);

    add_enum(r, "dataset", &RunConfig::dataset, {"synthetic", "cifar10"});
    add_string(r, "data_dir", &RunConfig::data_dir);
    add_int(r, "train_limit", &RunConfig::train_limit, 0, 1 << 24);
    add_int(r, "synth_train", &RunConfig::synth_train, 1, 1 << 24);
    add_int(r, "synth_val", &RunConfig::synth_val, 1, 1 << 24);
    add_real(r, "synth_noise", &RunConfig::synth_noise, 0.0, 1.0);

    add_int(r, "patch_size", &RunConfig::patch_size, 1, 64);
    add_int(r, "input_side", &RunConfig::input_side, 4, 512);
    add_int(r, "dim", &RunConfig::dim, 2, 4096);
    add_int(r, "heads", &RunConfig::heads, 1, 64);
    add_int(r, "depth", &RunConfig::depth, 0, 64);
    add_int(r, "cross_depth", &RunConfig::cross_depth, 0, 16);
    add_real(r, "layer_scale", &RunConfig::layer_scale, 0.0, 10.0);
    add_int(r, "mlp_ratio", &RunConfig::mlp_ratio, 1, 16);
    add_enum(r, "aggregation", &RunConfig::aggregation, {"cait-cls", "vit-cls", "avg-pool"});

    add_int(r, "head_hidden", &RunConfig::head_hidden, 1, 16384);
    add_int(r, "head_out", &RunConfig::head_out, 1, 16384);
    add_int(r, "proj_layers", &RunConfig::proj_layers, 0, 8);
    add_int(r, "pred_layers", &RunConfig::pred_layers, 0, 8);

    add_int(r, "epochs", &RunConfig::epochs, 0, 100000);
    add_int(r, "batch_size", &RunConfig::batch_size, 1, 65536);
    add_real(r, "base_lr", &RunConfig::base_lr, 0.0, 10.0);
    add_bool(r, "lr_scaling", &RunConfig::lr_scaling);
    add_real(r, "weight_decay", &RunConfig::weight_decay, 0.0, 10.0);
    add_bool(r, "wd_exclude_1d", &RunConfig::wd_exclude_1d);
    add_int(r, "warmup_epochs", &RunConfig::warmup_epochs, 0, 100000);
    add_real(r, "mask_ratio", &RunConfig::mask_ratio, 0.0, 0.999);
    add_int(r, "num_masks", &RunConfig::num_masks, 1, 64);
    add_enum(r, "mask_mode", &RunConfig::mask_mode, {"independent", "partition"});
    add_real(r, "ema_base", &RunConfig::ema_base, 0.0, 1.0);
    add_enum(r, "augment", &RunConfig::augment,
             {"none", "color", "crop", "crop+color", "shared-crop+color"});
    add_enum(r, "objective", &RunConfig::objective, {"byol", "infonce"});
    add_real(r, "temperature", &RunConfig::temperature, 1e-6, 1e9);
    add_bool(r, "infonce_predictor", &RunConfig::infonce_predictor);
    add_real(r, "grad_clip", &RunConfig::grad_clip, 0.0, 1e6);
    add_int(r, "eval_every", &RunConfig::eval_every, 1, 100000);
    add_int(r, "ckpt_every", &RunConfig::ckpt_every, 1, 100000);
    add_int(r, "chunk_images", &RunConfig::chunk_images, 1, 65536);
    add_bool(r, "deterministic_timing", &RunConfig::deterministic_timing);

    add_real(r, "crop_scale_min", &RunConfig::crop_scale_min, 1e-6, 1.0);
    add_real(r, "crop_scale_max", &RunConfig::crop_scale_max, 1e-6, 1.0);
    add_real(r, "flip_prob", &RunConfig::flip_prob, 0.0, 1.0);
    add_real(r, "jitter_brightness", &RunConfig::jitter_brightness, 0.0, 1.0);
    add_real(r, "jitter_contrast", &RunConfig::jitter_contrast, 0.0, 1.0);
    add_real(r, "jitter_saturation", &RunConfig::jitter_saturation, 0.0, 1.0);
    add_real(r, "jitter_hue", &RunConfig::jitter_hue, 0.0, 0.5);
    add_real(r, "p_gray", &RunConfig::p_gray, 0.0, 1.0);

    add_int(r, "knn_k", &RunConfig::knn_k, 1, 100000);
    add_int(r, "knn_gallery", &RunConfig::knn_gallery, 0, 1 << 24);
    add_int(r, "knn_query", &RunConfig::knn_query, 1, 1 << 24);
    add_real(r, "gallery_fraction", &RunConfig::gallery_fraction, 1e-6, 1.0);
    add_int(r, "probe_epochs", &RunConfig::probe_epochs, 0, 100000);
    add_real(r, "probe_lr", &RunConfig::probe_lr, 0.0, 10.0);
    add_int(r, "probe_batch", &RunConfig::probe_batch, 1, 65536);
    add_enum(r, "feature_source", &RunConfig::feature_source, {"instance", "avg-tokens"});

    add_int(r, "attn_layer", &RunConfig::attn_layer, -1, 64);
    add_string(r, "attn_queries", &RunConfig::attn_queries);
    add_int(r, "attn_image", &RunConfig::attn_image, 0, 1 << 24);

    add_int(r, "inv_iters", &RunConfig::inv_iters, 0, 10000000);
    add_real(r, "inv_lr", &RunConfig::inv_lr, 0.0, 10.0);
    add_real(r, "inv_ratio", &RunConfig::inv_ratio, 0.0, 0.999);
    add_enum(r, "generator", &RunConfig::generator, {"mlp", "direct"});
    add_int(r, "gen_hidden", &RunConfig::gen_hidden, 1, 16384);
    add_int(r, "gen_layers", &RunConfig::gen_layers, 1, 16);
    add_int(r, "gen_noise_dim", &RunConfig::gen_noise_dim, 0, 1024);
    add_int(r, "gen_fourier", &RunConfig::gen_fourier, 0, 64);
    add_int(r, "inv_image", &RunConfig::inv_image, 0, 1 << 24);

    add_int(r, "loc_scales", &RunConfig::loc_scales, 1, 64);
    add_int(r, "loc_locs", &RunConfig::loc_locs, 1, 64);
    add_int(r, "loc_image", &RunConfig::loc_image, 0, 1 << 24);
    add_int(r, "loc_query_image", &RunConfig::loc_query_image, -1, 1 << 24);
    add_real(r, "loc_query_scale", &RunConfig::loc_query_scale, 0.05, 1.0);
    return r;
  }();
  return reg;
}

const KeySpec* find_key(const std::string& name) {
  for (const auto& k : registry())
    if (k.name == name) return &k;
  return nullptr;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(cat("cannot open config file: ", path));
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ValueError(cat("config: line ", lineno, " of ", path, " is not 'key = value': ", line));
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const KeySpec* spec = find_key(key);
    if (spec == nullptr)
      throw ValueError(cat("config: unknown key '", key, "' at line ", lineno, " of ", path));
    spec->set(cfg, value, cat("line ", lineno, " of ", path));
  }
  return cfg;
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value,
                    const std::string& where) {
  const KeySpec* spec = find_key(key);
  if (spec == nullptr) throw ValueError(cat("config: unknown key '", key, "' (", where, ")"));
  spec->set(cfg, value, where);
}

void validate(const RunConfig& cfg) {
  if (cfg.dim % cfg.heads != 0)
    throw ValueError(cat("config: dim ", cfg.dim, " not divisible by heads ", cfg.heads));
  if (cfg.dim % 2 != 0) throw ValueError("config: dim must be even for the positional encoding");
  if (cfg.input_side % cfg.patch_size != 0)
    throw ValueError(cat("config: input_side ", cfg.input_side, " not divisible by patch_size ",
                         cfg.patch_size));
  if (cfg.crop_scale_min > cfg.crop_scale_max)
    throw ValueError("config: crop_scale_min exceeds crop_scale_max");
  if (cfg.aggregation == "cait-cls" && cfg.cross_depth < 1)
    throw ValueError("config: cait-cls aggregation needs cross_depth >= 1");
  if (cfg.epochs > 0 && cfg.warmup_epochs >= cfg.epochs)
    throw ValueError(cat("config: warmup_epochs ", cfg.warmup_epochs,
                         " must be smaller than epochs ", cfg.epochs));
  const Index l = static_cast<Index>(cfg.input_side / cfg.patch_size) *
                  static_cast<Index>(cfg.input_side / cfg.patch_size);
  const Index keep = static_cast<Index>(std::floor(static_cast<double>(l) * (1.0 - cfg.mask_ratio)));
  if (keep < 1)
    throw ValueError(cat("config: mask_ratio ", cfg.mask_ratio, " keeps zero of ", l, " tokens"));
  // K * keep_count has to stay within a sane memory budget; refuse silently
  // absurd combinations instead of thrashing.
  if (static_cast<long long>(cfg.num_masks) * keep * cfg.batch_size > (1ll << 26))
    throw ValueError("config: num_masks * keep_count * batch_size exceeds the practical bound 2^26");
}

std::string resolved_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : registry()) {
    out += k.name;
    out += " = ";
    out += k.get(cfg);
    out += "\n";
  }
  return out;
}

std::vector<std::string> config_key_names() {
  std::vector<std::string> names;
  for (const auto& k : registry()) names.push_back(k.name);
  return names;
}

}  // namespace xma
