#pragma once

#include "xma/common.hpp"
#include "xma/image.hpp"

#include <string>

namespace xma {

// Binary PGM (P5), values linearly rescaled so the map maximum hits 255.
void write_pgm(const std::string& path, const Mat<float>& gray);

// Binary PPM (P6) from an interleaved-RGB [0,1] image.
void write_ppm(const std::string& path, const ImageRecord& img);

}  // namespace xma
