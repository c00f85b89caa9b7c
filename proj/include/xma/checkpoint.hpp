#pragma once

#include "xma/common.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace xma {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; big-endian hosts are unsupported");

// On-disk tensor container. Layout:
//   magic "XMA1" | u32 version | u64 step | u32 tensor count
//   per tensor: u16 name length, name bytes, u8 rank, u32 extents[rank],
//               f32 little-endian row-major payload
//   u32 rng blob length | blob bytes
// Tensors are written in map (lexicographic) order, so save -> load -> save
// is byte-identical.
struct CheckpointData {
  uint32_t version = 1;
  uint64_t step = 0;
  std::map<std::string, std::pair<Mat<float>, int>> tensors;  // name -> (value, rank)
  std::vector<uint8_t> rng_blob;
};

namespace detail {

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError(cat("truncated checkpoint: ", path));
  return v;
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const CheckpointData& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(cat("cannot write checkpoint: ", path));
  out.write("XMA1", 4);
  detail::put<uint32_t>(out, data.version);
  detail::put<uint64_t>(out, data.step);
  detail::put<uint32_t>(out, static_cast<uint32_t>(data.tensors.size()));
  for (const auto& [name, entry] : data.tensors) {
    const auto& [value, rank] = entry;
    detail::put<uint16_t>(out, static_cast<uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<uint8_t>(out, static_cast<uint8_t>(rank));
    if (rank >= 2) detail::put<uint32_t>(out, static_cast<uint32_t>(value.rows()));
    if (rank >= 1) detail::put<uint32_t>(out, static_cast<uint32_t>(value.cols()));
    out.write(reinterpret_cast<const char*>(value.data()),
              static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(value.size())));
  }
  detail::put<uint32_t>(out, static_cast<uint32_t>(data.rng_blob.size()));
  out.write(reinterpret_cast<const char*>(data.rng_blob.data()),
            static_cast<std::streamsize>(data.rng_blob.size()));
  if (!out) throw IoError(cat("write failure: ", path));
}

inline CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(cat("cannot open checkpoint: ", path));
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "XMA1", 4) != 0)
    throw IoError(cat("not a checkpoint file (bad magic): ", path));
  CheckpointData data;
  data.version = detail::take<uint32_t>(in, path);
  if (data.version != 1)
    throw IoError(cat("incompatible checkpoint version ", data.version, " in ", path));
  data.step = detail::take<uint64_t>(in, path);
  const uint32_t count = detail::take<uint32_t>(in, path);
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t len = detail::take<uint16_t>(in, path);
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in) throw IoError(cat("truncated checkpoint: ", path));
    const uint8_t rank = detail::take<uint8_t>(in, path);
    if (rank > 2) throw IoError(cat("checkpoint tensor ", name, " has unsupported rank ", int(rank)));
    uint32_t rows = 1, cols = 1;
    if (rank >= 2) rows = detail::take<uint32_t>(in, path);
    if (rank >= 1) cols = detail::take<uint32_t>(in, path);
    Mat<float> value(rows, cols);
    in.read(reinterpret_cast<char*>(value.data()),
            static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(value.size())));
    if (!in) throw IoError(cat("truncated checkpoint: ", path));
    data.tensors.emplace(std::move(name), std::make_pair(std::move(value), int(rank)));
  }
  const uint32_t blob_len = detail::take<uint32_t>(in, path);
  data.rng_blob.resize(blob_len);
  if (blob_len > 0) {
    in.read(reinterpret_cast<char*>(data.rng_blob.data()), blob_len);
    if (!in) throw IoError(cat("truncated checkpoint: ", path));
  }
  return data;
}

}  // namespace xma
