#include "xma/augment.hpp"

#include <algorithm>
#include <cmath>

namespace xma {

AugmentScheme parse_augment_scheme(const std::string& name) {
  if (name == "none") return AugmentScheme::kNone;
  if (name == "color") return AugmentScheme::kColor;
  if (name == "crop") return AugmentScheme::kCrop;
  if (name == "crop+color") return AugmentScheme::kCropColor;
  if (name == "shared-crop+color") return AugmentScheme::kSharedCropColor;
  throw ValueError(cat("unknown augmentation scheme: ", name));
}

std::string to_string(AugmentScheme s) {
  switch (s) {
    case AugmentScheme::kNone: return "none";
    case AugmentScheme::kColor: return "color";
    case AugmentScheme::kCrop: return "crop";
    case AugmentScheme::kCropColor: return "crop+color";
    default: return "shared-crop+color";
  }
}

ImageRecord bilinear_resize(const ImageRecord& img, int out_h, int out_w) {
  if (img.height == out_h && img.width == out_w) return img;
  ImageRecord out;
  out.label = img.label;
  out.height = out_h;
  out.width = out_w;
  out.pixels.resize(static_cast<size_t>(out_h * out_w * 3));
  const float sy = static_cast<float>(img.height) / static_cast<float>(out_h);
  const float sx = static_cast<float>(img.width) / static_cast<float>(out_w);
  for (int y = 0; y < out_h; ++y) {
    const float fy = std::clamp((y + 0.5f) * sy - 0.5f, 0.0f, static_cast<float>(img.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const float wy = fy - static_cast<float>(y0);
    for (int x = 0; x < out_w; ++x) {
      const float fx = std::clamp((x + 0.5f) * sx - 0.5f, 0.0f, static_cast<float>(img.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const float wx = fx - static_cast<float>(x0);
      for (int c = 0; c < 3; ++c) {
        const float top = img.at(y0, x0, c) * (1.0f - wx) + img.at(y0, x1, c) * wx;
        const float bot = img.at(y1, x0, c) * (1.0f - wx) + img.at(y1, x1, c) * wx;
        out.at(y, x, c) = top * (1.0f - wy) + bot * wy;
      }
    }
  }
  return out;
}

ImageRecord crop(const ImageRecord& img, const ViewGeometry& g) {
  if (g.x < 0 || g.y < 0 || g.w <= 0 || g.h <= 0 || g.x + g.w > img.width || g.y + g.h > img.height)
    throw ValueError(cat("crop rectangle [", g.x, ",", g.y, ",", g.w, ",", g.h,
                         "] outside ", img.width, "x", img.height, " image"));
  ImageRecord out;
  out.label = img.label;
  out.height = g.h;
  out.width = g.w;
  out.pixels.resize(static_cast<size_t>(g.w * g.h * 3));
  for (int y = 0; y < g.h; ++y)
    for (int x = 0; x < g.w; ++x) {
      const int sx = g.flip ? (g.x + g.w - 1 - x) : (g.x + x);
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(g.y + y, sx, c);
    }
  return out;
}

ImageRecord center_crop_resize(const ImageRecord& img, int out_side) {
  const int side = std::min(img.height, img.width);
  ViewGeometry g{(img.width - side) / 2, (img.height - side) / 2, side, side, false};
  return bilinear_resize(crop(img, g), out_side, out_side);
}

ViewGeometry sample_resized_crop(const ImageRecord& img, Rng& rng, double scale_min,
                                 double scale_max, double flip_prob) {
  if (!(scale_min > 0.0) || scale_max > 1.0 || scale_min > scale_max)
    throw ValueError("sample_resized_crop: scale range must lie in (0,1]");
  const double area = static_cast<double>(img.height) * static_cast<double>(img.width);
  ViewGeometry g;
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double target = area * rng.uniform(scale_min, scale_max);
    const double log_ratio = rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
    const double aspect = std::exp(log_ratio);
    const int w = static_cast<int>(std::lround(std::sqrt(target * aspect)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / aspect)));
    if (w <= 0 || h <= 0 || w > img.width || h > img.height) continue;
    g.w = w;
    g.h = h;
    g.x = static_cast<int>(rng.below(static_cast<uint64_t>(img.width - w + 1)));
    g.y = static_cast<int>(rng.below(static_cast<uint64_t>(img.height - h + 1)));
    found = true;
  }
  if (!found) {
    const int side = std::min(img.height, img.width);
    g = ViewGeometry{(img.width - side) / 2, (img.height - side) / 2, side, side, false};
  }
  g.flip = rng.bernoulli(flip_prob);
  return g;
}

ImageRecord random_resized_crop(const ImageRecord& img, Rng& rng, double scale_min,
                                double scale_max, int out_side) {
  ViewGeometry g = sample_resized_crop(img, rng, scale_min, scale_max, 0.0);
  g.flip = false;
  return bilinear_resize(crop(img, g), out_side, out_side);
}

namespace {

float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

void clamp_pixels(ImageRecord& img) {
  for (float& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
}

void apply_brightness(ImageRecord& img, float f) {
  for (float& v : img.pixels) v *= f;
  clamp_pixels(img);
}

void apply_contrast(ImageRecord& img, float f) {
  double mean = 0.0;
  const int n = img.height * img.width;
  for (int i = 0; i < n; ++i)
    mean += luma(img.pixels[static_cast<size_t>(3 * i)], img.pixels[static_cast<size_t>(3 * i + 1)],
                 img.pixels[static_cast<size_t>(3 * i + 2)]);
  const float m = static_cast<float>(mean / n);
  for (float& v : img.pixels) v = f * v + (1.0f - f) * m;
  clamp_pixels(img);
}

void apply_saturation(ImageRecord& img, float f) {
  const int n = img.height * img.width;
  for (int i = 0; i < n; ++i) {
    float* p = &img.pixels[static_cast<size_t>(3 * i)];
    const float l = luma(p[0], p[1], p[2]);
    for (int c = 0; c < 3; ++c) p[c] = f * p[c] + (1.0f - f) * l;
  }
  clamp_pixels(img);
}

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max({r, g, b});
  const float mn = std::min({r, g, b});
  v = mx;
  const float d = mx - mn;
  s = mx == 0.0f ? 0.0f : d / mx;
  if (d == 0.0f) {
    h = 0.0f;
  } else if (mx == r) {
    h = (g - b) / d / 6.0f;
  } else if (mx == g) {
    h = (2.0f + (b - r) / d) / 6.0f;
  } else {
    h = (4.0f + (r - g) / d) / 6.0f;
  }
  if (h < 0.0f) h += 1.0f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  h = h - std::floor(h);
  const float i = std::floor(h * 6.0f);
  const float f = h * 6.0f - i;
  const float p = v * (1.0f - s);
  const float q = v * (1.0f - f * s);
  const float t = v * (1.0f - (1.0f - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

void apply_hue(ImageRecord& img, float shift_turns) {
  if (shift_turns == 0.0f) return;
  const int n = img.height * img.width;
  for (int i = 0; i < n; ++i) {
    float* p = &img.pixels[static_cast<size_t>(3 * i)];
    float h, s, v;
    rgb_to_hsv(p[0], p[1], p[2], h, s, v);
    hsv_to_rgb(h + shift_turns, s, v, p[0], p[1], p[2]);
  }
  clamp_pixels(img);
}

void apply_grayscale(ImageRecord& img) {
  const int n = img.height * img.width;
  for (int i = 0; i < n; ++i) {
    float* p = &img.pixels[static_cast<size_t>(3 * i)];
    const float l = luma(p[0], p[1], p[2]);
    p[0] = p[1] = p[2] = l;
  }
}

}  // namespace

ImageRecord color_jitter(const ImageRecord& img, Rng& rng, double brightness,
                         double contrast, double saturation, double hue, double p_gray) {
  if (brightness < 0 || contrast < 0 || saturation < 0 || hue < 0)
    throw ValueError("color_jitter: strengths must be non-negative");
  ImageRecord out = img;
  const float fb = static_cast<float>(rng.uniform(std::max(0.0, 1.0 - brightness), 1.0 + brightness));
  const float fc = static_cast<float>(rng.uniform(std::max(0.0, 1.0 - contrast), 1.0 + contrast));
  const float fs = static_cast<float>(rng.uniform(std::max(0.0, 1.0 - saturation), 1.0 + saturation));
  const float fh = static_cast<float>(rng.uniform(std::max(0.0, 1.0 - hue), 1.0 + hue));
  if (fb != 1.0f) apply_brightness(out, fb);
  if (fc != 1.0f) apply_contrast(out, fc);
  if (fs != 1.0f) apply_saturation(out, fs);
  apply_hue(out, fh - 1.0f);
  if (rng.bernoulli(p_gray)) apply_grayscale(out);
  return out;
}

ViewPair make_view_pair(const ImageRecord& img, Rng rng, AugmentScheme scheme,
                        const AugmentConfig& cfg) {
  // Substream layout is fixed so schemes sharing a component draw the same
  // values: 0 = shared/teacher crop, 1 = student crop, 2 = teacher color,
  // 3 = student color.
  Rng crop_t = rng.derive(0);
  Rng crop_s = rng.derive(1);
  Rng color_t = rng.derive(2);
  Rng color_s = rng.derive(3);

  const int side = std::min(img.height, img.width);
  const ViewGeometry center{(img.width - side) / 2, (img.height - side) / 2, side, side, false};

  auto render = [&](const ViewGeometry& g) {
    return bilinear_resize(crop(img, g), cfg.out_side, cfg.out_side);
  };
  auto jitter = [&](const ImageRecord& v, Rng& r) {
    return color_jitter(v, r, cfg.brightness, cfg.contrast, cfg.saturation, cfg.hue, cfg.p_gray);
  };

  ViewPair pair;
  switch (scheme) {
    case AugmentScheme::kNone: {
      pair.teacher_geometry = pair.student_geometry = center;
      pair.teacher = render(center);
      pair.student = pair.teacher;
      break;
    }
    case AugmentScheme::kColor: {
      pair.teacher_geometry = pair.student_geometry = center;
      pair.teacher = jitter(render(center), color_t);
      pair.student = pair.teacher;
      break;
    }
    case AugmentScheme::kCrop: {
      // Two-augmentation scheme: teacher and student geometries are
      // independent draws.
      pair.teacher_geometry = sample_resized_crop(img, crop_t, cfg.crop_scale_min, cfg.crop_scale_max, cfg.flip_prob);
      pair.student_geometry = sample_resized_crop(img, crop_s, cfg.crop_scale_min, cfg.crop_scale_max, cfg.flip_prob);
      pair.teacher = render(pair.teacher_geometry);
      pair.student = render(pair.student_geometry);
      break;
    }
    case AugmentScheme::kCropColor: {
      pair.teacher_geometry = sample_resized_crop(img, crop_t, cfg.crop_scale_min, cfg.crop_scale_max, cfg.flip_prob);
      pair.student_geometry = sample_resized_crop(img, crop_s, cfg.crop_scale_min, cfg.crop_scale_max, cfg.flip_prob);
      pair.teacher = jitter(render(pair.teacher_geometry), color_t);
      pair.student = jitter(render(pair.student_geometry), color_s);
      break;
    }
    case AugmentScheme::kSharedCropColor: {
      ViewGeometry g = sample_resized_crop(img, crop_t, cfg.crop_scale_min, cfg.crop_scale_max, cfg.flip_prob);
      pair.teacher_geometry = pair.student_geometry = g;
      ImageRecord shared = render(g);
      pair.teacher = jitter(shared, color_t);
      pair.student = jitter(shared, color_s);
      break;
    }
  }
  return pair;
}

IndexList patch_index_map(int side, int patch) {
  if (patch <= 0 || side % patch != 0)
    throw ShapeError(cat("patch side ", patch, " does not divide image side ", side));
  const int grid = side / patch;
  IndexList map;
  map.reserve(static_cast<size_t>(side * side * 3));
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx)
      for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px)
          for (int c = 0; c < 3; ++c)
            map.push_back(static_cast<Index>(
                (((gy * patch + py) * side) + gx * patch + px) * 3 + c));
  return map;
}

ImageRecord unpatchify(const Mat<float>& tokens, int side, int patch) {
  const IndexList map = patch_index_map(side, patch);
  if (static_cast<Index>(map.size()) != tokens.size())
    throw ShapeError("unpatchify: token matrix does not match image size");
  ImageRecord out;
  out.height = side;
  out.width = side;
  out.pixels.resize(static_cast<size_t>(side * side * 3));
  for (size_t i = 0; i < map.size(); ++i)
    out.pixels[static_cast<size_t>(map[i])] = tokens.data()[i];
  return out;
}

}  // namespace xma
