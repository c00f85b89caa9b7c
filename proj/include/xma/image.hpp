#pragma once

#include "xma/common.hpp"
#include "xma/rng.hpp"

#include <string>
#include <vector>

namespace xma {

// One labeled image, pixels in [0,1], interleaved RGB in row-major scan
// order: pixels[(y*width + x)*3 + c].
struct ImageRecord {
  int label = 0;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  float at(int y, int x, int c) const {
    return pixels[static_cast<size_t>((y * width + x) * 3 + c)];
  }
  float& at(int y, int x, int c) {
    return pixels[static_cast<size_t>((y * width + x) * 3 + c)];
  }
};

// CIFAR-10 binary records: 1 label byte + 1024 R + 1024 G + 1024 B plane
// bytes, 3073 bytes per record, 32x32 images.
constexpr int kCifarSide = 32;
constexpr size_t kCifarRecordBytes = 3073;

std::vector<ImageRecord> load_cifar10(const std::string& path);
void save_cifar10(const std::string& path, const std::vector<ImageRecord>& records);

// Procedurally generated stand-in dataset: 10 classes of geometric shapes
// rendered with class-independent colors, positions and sizes, so color
// statistics alone carry no label information.
struct SyntheticSpec {
  int count = 1000;
  int side = 32;
  double noise = 0.03;
};

std::vector<ImageRecord> make_synthetic_shapes(const SyntheticSpec& spec, Rng rng);

}  // namespace xma
