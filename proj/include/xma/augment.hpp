#pragma once

#include "xma/image.hpp"
#include "xma/tensor.hpp"

#include <cmath>
#include <string>

namespace xma {

// Crop rectangle (source pixels) plus horizontal flip flag.
struct ViewGeometry {
  int x = 0, y = 0, w = 0, h = 0;
  bool flip = false;
  bool operator==(const ViewGeometry&) const = default;
};

enum class AugmentScheme { kNone, kColor, kCrop, kCropColor, kSharedCropColor };

AugmentScheme parse_augment_scheme(const std::string& name);
std::string to_string(AugmentScheme s);

struct AugmentConfig {
  double crop_scale_min = 0.2;
  double crop_scale_max = 1.0;
  double flip_prob = 0.5;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.2;
  double hue = 0.1;
  double p_gray = 0.2;
  int out_side = 32;
};

// Teacher and student pixel views of one image. Under single-augmentation
// schemes the student sees the teacher's pixels (masking happens later); the
// two-augmentation schemes draw per-branch.
struct ViewPair {
  ImageRecord teacher;
  ImageRecord student;
  ViewGeometry teacher_geometry;
  ViewGeometry student_geometry;
};

ImageRecord bilinear_resize(const ImageRecord& img, int out_h, int out_w);
ImageRecord crop(const ImageRecord& img, const ViewGeometry& g);
ImageRecord center_crop_resize(const ImageRecord& img, int out_side);

// Samples a crop covering an area fraction uniform in [scale_min, scale_max]
// with log-uniform aspect in [3/4, 4/3]; falls back to a center crop after 10
// failed attempts. The crop is resized bilinearly to out_side.
ViewGeometry sample_resized_crop(const ImageRecord& img, Rng& rng, double scale_min,
                                 double scale_max, double flip_prob);
ImageRecord random_resized_crop(const ImageRecord& img, Rng& rng, double scale_min,
                                double scale_max, int out_side);

// Brightness/contrast/saturation factors uniform in [max(0,1-s), 1+s], hue
// rotation by (factor-1) turns, applied in that fixed order, then grayscale
// with probability p_gray. Every stage clamps to [0,1].
ImageRecord color_jitter(const ImageRecord& img, Rng& rng, double brightness,
                         double contrast, double saturation, double hue, double p_gray);

ViewPair make_view_pair(const ImageRecord& img, Rng rng, AugmentScheme scheme,
                        const AugmentConfig& cfg);

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

// Flat element map realizing patchification of an (side*side) x 3 pixel
// matrix into (side/p)^2 tokens of 3p^2 features: patches in row-major grid
// order, pixels row-major within a patch, channels interleaved last.
IndexList patch_index_map(int side, int patch);

// Non-differentiable convenience for the data path.
template <typename S>
Mat<S> patchify(const ImageRecord& img, int patch) {
  if (img.height != img.width) throw ShapeError("patchify: image must be square");
  const int side = img.height;
  if (patch <= 0 || side % patch != 0)
    throw ShapeError(cat("patchify: patch side ", patch, " does not divide image side ", side));
  const IndexList map = patch_index_map(side, patch);
  const int tokens = (side / patch) * (side / patch);
  const int dim = 3 * patch * patch;
  Mat<S> out(tokens, dim);
  for (size_t i = 0; i < map.size(); ++i)
    out.data()[i] = static_cast<S>(img.pixels[static_cast<size_t>(map[i])]);
  return out;
}

// Inverse of patchify for reconstruction checks and renders.
ImageRecord unpatchify(const Mat<float>& tokens, int side, int patch);

// Interleaved fixed sinusoidal table: pe[pos][2i] = sin(pos / 10000^(2i/d)),
// pe[pos][2i+1] = cos(...). Computed for the full grid before any masking.
template <typename S>
Mat<S> sinusoidal_posenc(Index length, Index dim) {
  if (dim <= 0 || dim % 2 != 0)
    throw ShapeError(cat("sinusoidal_posenc: dim must be even, got ", dim));
  Mat<S> pe(length, dim);
  for (Index pos = 0; pos < length; ++pos) {
    for (Index i = 0; i < dim / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      const double angle = static_cast<double>(pos) * freq;
      pe(pos, 2 * i) = static_cast<S>(std::sin(angle));
      pe(pos, 2 * i + 1) = static_cast<S>(std::cos(angle));
    }
  }
  return pe;
}

}  // namespace xma
