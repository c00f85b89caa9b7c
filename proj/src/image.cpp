#include "xma/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace xma {

std::vector<ImageRecord> load_cifar10(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(cat("cannot open dataset file: ", path));
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<size_t>(in.tellg());
  in.seekg(0);
  if (bytes == 0 || bytes % kCifarRecordBytes != 0)
    throw IoError(cat("truncated CIFAR-10 file ", path, ": ", bytes,
                      " bytes is not a multiple of ", kCifarRecordBytes));
  const size_t count = bytes / kCifarRecordBytes;
  constexpr int plane = kCifarSide * kCifarSide;

  std::vector<ImageRecord> records(count);
  std::vector<unsigned char> buf(kCifarRecordBytes);
  for (size_t r = 0; r < count; ++r) {
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) throw IoError(cat("read failure in ", path, " at record ", r));
    ImageRecord& rec = records[r];
    rec.label = buf[0];
    if (rec.label > 9)
      throw IoError(cat("record ", r, " in ", path, " has label ", rec.label, " outside [0,9]"));
    rec.height = kCifarSide;
    rec.width = kCifarSide;
    rec.pixels.resize(static_cast<size_t>(plane) * 3);
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < plane; ++i)
        rec.pixels[static_cast<size_t>(i) * 3 + static_cast<size_t>(c)] =
            static_cast<float>(buf[1 + static_cast<size_t>(c) * plane + static_cast<size_t>(i)]) / 255.0f;
  }
  return records;
}

void save_cifar10(const std::string& path, const std::vector<ImageRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(cat("cannot write dataset file: ", path));
  constexpr int plane = kCifarSide * kCifarSide;
  std::vector<unsigned char> buf(kCifarRecordBytes);
  for (const ImageRecord& rec : records) {
    if (rec.height != kCifarSide || rec.width != kCifarSide)
      throw ValueError("save_cifar10: records must be 32x32");
    buf[0] = static_cast<unsigned char>(rec.label);
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < plane; ++i) {
        float v = std::clamp(rec.pixels[static_cast<size_t>(i) * 3 + static_cast<size_t>(c)], 0.0f, 1.0f);
        buf[1 + static_cast<size_t>(c) * plane + static_cast<size_t>(i)] =
            static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  }
  if (!out) throw IoError(cat("write failure: ", path));
}

namespace {

struct Rgb {
  float r, g, b;
};

// HSV with h in [0,1); used both for synthetic color sampling and hue jitter.
Rgb hsv_to_rgb(float h, float s, float v) {
  h = h - std::floor(h);
  const float i = std::floor(h * 6.0f);
  const float f = h * 6.0f - i;
  const float p = v * (1.0f - s);
  const float q = v * (1.0f - f * s);
  const float t = v * (1.0f - (1.0f - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Signed distance-ish membership tests for the ten shape classes. Coordinates
// are offsets from the shape center in units of the half-size.
bool inside_shape(int cls, float dx, float dy) {
  const float ax = std::abs(dx);
  const float ay = std::abs(dy);
  switch (cls) {
    case 0:  // disc
      return dx * dx + dy * dy <= 1.0f;
    case 1:  // square
      return ax <= 0.9f && ay <= 0.9f;
    case 2:  // triangle (upward)
      return dy <= 0.9f && dy >= -0.9f && ax <= (dy + 0.9f) * 0.55f;
    case 3:  // plus
      return (ax <= 0.32f && ay <= 1.0f) || (ay <= 0.32f && ax <= 1.0f);
    case 4:  // ring
      return dx * dx + dy * dy <= 1.0f && dx * dx + dy * dy >= 0.42f;
    case 5:  // horizontal bar
      return ax <= 1.0f && ay <= 0.34f;
    case 6:  // vertical bar
      return ay <= 1.0f && ax <= 0.34f;
    case 7:  // diamond
      return ax + ay <= 1.0f;
    case 8:  // checker (2x2)
      return ax <= 0.95f && ay <= 0.95f && ((dx > 0) == (dy > 0));
    default:  // frame
      return ax <= 1.0f && ay <= 1.0f && (ax >= 0.55f || ay >= 0.55f);
  }
}

}  // namespace

std::vector<ImageRecord> make_synthetic_shapes(const SyntheticSpec& spec, Rng rng) {
  std::vector<ImageRecord> records(static_cast<size_t>(spec.count));
  const int side = spec.side;
  for (int i = 0; i < spec.count; ++i) {
    Rng r = rng.derive(static_cast<uint64_t>(i));
    ImageRecord& rec = records[static_cast<size_t>(i)];
    rec.label = static_cast<int>(r.below(10));
    rec.height = side;
    rec.width = side;
    rec.pixels.assign(static_cast<size_t>(side * side * 3), 0.0f);

    // Foreground hue is pushed away from the background hue so the shape is
    // visible, but neither hue depends on the class.
    const float bg_hue = static_cast<float>(r.next_double());
    const Rgb bg = hsv_to_rgb(bg_hue, 0.25f + 0.5f * static_cast<float>(r.next_double()),
                              0.25f + 0.5f * static_cast<float>(r.next_double()));
    const float fg_hue = bg_hue + 0.25f + 0.5f * static_cast<float>(r.next_double());
    const Rgb fg = hsv_to_rgb(fg_hue, 0.55f + 0.4f * static_cast<float>(r.next_double()),
                              0.6f + 0.4f * static_cast<float>(r.next_double()));

    const float half = 0.18f * side + 0.19f * side * static_cast<float>(r.next_double());
    const float cx = half + static_cast<float>(r.next_double()) * (side - 2.0f * half);
    const float cy = half + static_cast<float>(r.next_double()) * (side - 2.0f * half);

    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        const bool in = inside_shape(rec.label, (x + 0.5f - cx) / half, (y + 0.5f - cy) / half);
        const Rgb& c = in ? fg : bg;
        float noise_r = static_cast<float>(r.normal() * spec.noise);
        float noise_g = static_cast<float>(r.normal() * spec.noise);
        float noise_b = static_cast<float>(r.normal() * spec.noise);
        rec.at(y, x, 0) = std::clamp(c.r + noise_r, 0.0f, 1.0f);
        rec.at(y, x, 1) = std::clamp(c.g + noise_g, 0.0f, 1.0f);
        rec.at(y, x, 2) = std::clamp(c.b + noise_b, 0.0f, 1.0f);
      }
    }
  }
  return records;
}

}  // namespace xma
