#pragma once

#include "xma/heads.hpp"
#include "xma/optim.hpp"
#include "xma/trainer.hpp"

#include <string>
#include <vector>

namespace xma {

struct InversionConfig {
  int iterations = 3000;
  double lr = 0.001;
  double mask_ratio = 0.8;
  std::string generator = "mlp";  // mlp | direct
  int hidden = 128;
  int layers = 3;
  int noise_dim = 16;
  int fourier = 4;
  uint64_t seed = 1;
};

struct InversionResult {
  ImageRecord original;        // the encoder's input view
  ImageRecord masked_render;   // masked patches filled with gray
  ImageRecord reconstruction;  // generator output
  std::vector<double> energy_trace;  // energy_trace[0] is the initial energy
  IndexList kept;
};

// Mean squared difference between the visible-token distributed features of
// the masked input and the same rows of the candidate's full-view features.
template <typename S>
double visible_feature_energy(const ParamStore<S>& w, const ViTConfig& cfg,
                              const ImageRecord& x, const ImageRecord& x0,
                              const IndexList& kept) {
  Mat<S> tokens = patchify<S>(x, cfg.patch);
  Mat<S> tokens0 = patchify<S>(x0, cfg.patch);
  EncodeResult<S> masked = encode_instance(tokens, &kept, w, cfg);
  EncodeResult<S> full = encode_instance(tokens0, nullptr, w, cfg);
  Tensor<S> vis = gather_rows(full.distributed, kept);
  return static_cast<double>(mse(vis, masked.distributed).item());
}

namespace detail {

// Per-pixel coordinate features: raw (x, y) in [-1, 1], Fourier pairs per
// coordinate, and a fixed per-pixel noise slice. Constant across the whole
// optimization.
template <typename S>
Mat<S> generator_inputs(int side, int fourier, int noise_dim, Rng rng) {
  const Index n = static_cast<Index>(side) * side;
  const Index dim = 2 + 4 * fourier + noise_dim;
  Mat<S> in(n, dim);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const Index r = static_cast<Index>(y) * side + x;
      const double fx = 2.0 * (x + 0.5) / side - 1.0;
      const double fy = 2.0 * (y + 0.5) / side - 1.0;
      Index c = 0;
      in(r, c++) = static_cast<S>(fx);
      in(r, c++) = static_cast<S>(fy);
      for (int f = 0; f < fourier; ++f) {
        const double freq = M_PI * static_cast<double>(1 << f);
        in(r, c++) = static_cast<S>(std::sin(freq * fx));
        in(r, c++) = static_cast<S>(std::cos(freq * fx));
        in(r, c++) = static_cast<S>(std::sin(freq * fy));
        in(r, c++) = static_cast<S>(std::cos(freq * fy));
      }
      Rng pixel_noise = rng.derive(static_cast<uint64_t>(r));
      for (int z = 0; z < noise_dim; ++z) in(r, c++) = static_cast<S>(pixel_noise.normal());
    }
  }
  return in;
}

}  // namespace detail

// Small convolution-free image generator: a coordinate MLP shared across
// pixels ("mlp") or a bare pixel table ("direct", used by tests that start
// the optimization at the target image).
template <typename S>
class DipGenerator {
 public:
  DipGenerator(int side, const InversionConfig& cfg, const ImageRecord* init_image = nullptr)
      : side_(side), direct_(cfg.generator == "direct") {
    Rng root = Rng(cfg.seed).derive(streams::kInversion);
    if (direct_) {
      Mat<S> px = Mat<S>::Constant(static_cast<Index>(side) * side, 3, S(0.5));
      if (init_image != nullptr) {
        if (init_image->height != side || init_image->width != side)
          throw ShapeError("DipGenerator: init image size mismatch");
        for (Index i = 0; i < px.size(); ++i)
          px.data()[i] = static_cast<S>(init_image->pixels[static_cast<size_t>(i)]);
      }
      params_.add("pixels", std::move(px), 2, true);
      return;
    }
    inputs_ = detail::generator_inputs<S>(side, cfg.fourier, cfg.noise_dim, root.derive(1));
    Index cur = inputs_.cols();
    for (int i = 0; i < cfg.layers; ++i) {
      const std::string base = cat("gen.", i);
      const double sigma = std::sqrt(1.0 / static_cast<double>(cur));
      params_.add(base + ".w", detail::trunc_normal_mat<S>(cur, cfg.hidden, sigma,
                                                           root.derive(hash_name(base))),
                  2, true);
      params_.add(base + ".b", Mat<S>::Zero(1, cfg.hidden), 1, true);
      cur = cfg.hidden;
    }
    const double sigma = std::sqrt(1.0 / static_cast<double>(cur));
    params_.add("gen.out.w", detail::trunc_normal_mat<S>(cur, 3, sigma, root.derive(hash_name("gen.out"))), 2, true);
    params_.add("gen.out.b", Mat<S>::Zero(1, 3), 1, true);
    layers_ = cfg.layers;
  }

  // (side*side) x 3 pixel rows in [0,1] (direct mode is unbounded: it is a
  // plain table).
  Tensor<S> forward() {
    if (direct_) return Tensor<S>(params_.at("pixels").node());
    Tensor<S> h = Tensor<S>::from_matrix(inputs_);
    for (int i = 0; i < layers_; ++i) {
      const std::string base = cat("gen.", i);
      h = gelu(linear(h, params_.at(base + ".w"), params_.at(base + ".b")));
    }
    return sigmoid(linear(h, params_.at("gen.out.w"), params_.at("gen.out.b")));
  }

  ImageRecord render() {
    ImageRecord img;
    img.height = side_;
    img.width = side_;
    img.pixels.resize(static_cast<size_t>(side_) * side_ * 3);
    Mat<S> px = forward().value();
    for (Index i = 0; i < px.size(); ++i)
      img.pixels[static_cast<size_t>(i)] = std::clamp(static_cast<float>(px.data()[i]), 0.0f, 1.0f);
    return img;
  }

  ParamStore<S>& params() { return params_; }

 private:
  int side_;
  bool direct_;
  int layers_ = 0;
  Mat<S> inputs_;
  ParamStore<S> params_;
};

// Appendix-C inversion: freeze the encoder, optimize the generator so the
// visible-token features of its output match those of the masked input.
// init_at_target switches the direct generator's start to the input image
// (the exact-zero-energy identity check).
template <typename S>
InversionResult dip_invert(const ParamStore<S>& w, const ViTConfig& vit, const ImageRecord& image,
                           const InversionConfig& cfg, bool init_at_target = false) {
  const Index full = vit.tokens();
  ImageRecord view = center_crop_resize(image, vit.input_side);

  Rng rng = Rng(cfg.seed).derive(streams::kInversion);
  IndexList kept = sample_mask(full, cfg.mask_ratio, rng);

  // Target features of the masked input; plain constants, never retaped.
  Mat<S> view_tokens = patchify<S>(view, vit.patch);
  EncodeResult<S> target_enc = encode_instance(view_tokens, &kept, w, vit);
  const Mat<S> target = target_enc.distributed.value();

  const Mat<S> pe = sinusoidal_posenc<S>(full, vit.dim);
  const IndexList pixel_map = patch_index_map(vit.input_side, vit.patch);

  DipGenerator<S> gen(vit.input_side, cfg, init_at_target ? &view : nullptr);
  AdamState<S> opt;

  InversionResult result;
  result.original = view;
  result.kept = kept;

  auto energy_of = [&]() -> Tensor<S> {
    Tensor<S> pixels = gen.forward();
    Tensor<S> tokens = reindex(pixels, pixel_map, full, vit.patch_dim());
    Tensor<S> x = add(patch_embed(tokens, w.at("embed.w"), w.at("embed.b")),
                      Tensor<S>::from_matrix(pe));
    Tensor<S> distributed = vit_forward(x, w, vit, full);
    Tensor<S> vis = gather_rows(distributed, kept);
    return mse(vis, Tensor<S>::from_matrix(target));
  };

  for (int it = 0; it < cfg.iterations; ++it) {
    Tape<S> tape;
    double value;
    {
      typename Tape<S>::Scope scope(tape);
      Tensor<S> loss = energy_of();
      value = static_cast<double>(loss.item());
      if (!std::isfinite(value))
        throw DivergenceError(cat("dip_invert: non-finite energy at iteration ", it));
      tape.backward(loss);
    }
    result.energy_trace.push_back(value);
    adamw_step(gen.params(), opt, static_cast<S>(cfg.lr), S(0), false);
    gen.params().clear_grads();
  }
  result.energy_trace.push_back(static_cast<double>(energy_of().item()));

  result.reconstruction = gen.render();

  // Masked render: gray fill at patch granularity.
  result.masked_render = view;
  std::vector<char> visible(static_cast<size_t>(full), 0);
  for (Index i : kept) visible[static_cast<size_t>(i)] = 1;
  const Index grid = vit.grid();
  for (Index tok = 0; tok < full; ++tok) {
    if (visible[static_cast<size_t>(tok)]) continue;
    const int gy = static_cast<int>(tok / grid), gx = static_cast<int>(tok % grid);
    for (int py = 0; py < vit.patch; ++py)
      for (int px = 0; px < vit.patch; ++px)
        for (int c = 0; c < 3; ++c)
          result.masked_render.at(gy * vit.patch + py, gx * vit.patch + px, c) = 0.5f;
  }
  return result;
}

}  // namespace xma
