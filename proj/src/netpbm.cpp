#include "xma/netpbm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace xma {

void write_pgm(const std::string& path, const Mat<float>& gray) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(cat("cannot write PGM: ", path));
  if (!gray.allFinite()) throw ValueError(cat("non-finite values in PGM export: ", path));
  out << "P5\n" << gray.cols() << " " << gray.rows() << "\n255\n";
  const float mx = gray.size() > 0 ? gray.maxCoeff() : 0.0f;
  const float scale = mx > 0.0f ? 255.0f / mx : 0.0f;
  for (Index r = 0; r < gray.rows(); ++r)
    for (Index c = 0; c < gray.cols(); ++c) {
      const float v = std::clamp(gray(r, c) * scale, 0.0f, 255.0f);
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v))));
    }
  if (!out) throw IoError(cat("write failure: ", path));
}

void write_ppm(const std::string& path, const ImageRecord& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(cat("cannot write PPM: ", path));
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  for (float v : img.pixels) {
    if (!std::isfinite(v)) throw ValueError(cat("non-finite pixel in PPM export: ", path));
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
  }
  if (!out) throw IoError(cat("write failure: ", path));
}

}  // namespace xma
