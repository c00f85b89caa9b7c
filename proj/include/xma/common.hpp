#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace xma {

// Dense row-major storage throughout. Row-major matches the on-disk tensor
// layout, so checkpoint payloads are straight memory copies.
template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

using Index = Eigen::Index;
using IndexList = std::vector<Index>;

struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

struct ValueError : std::invalid_argument {
  explicit ValueError(const std::string& msg) : std::invalid_argument(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void cat_into(std::ostringstream&) {}
template <typename T, typename... Rest>
void cat_into(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  cat_into(os, rest...);
}
}  // namespace detail

template <typename... Args>
std::string cat(const Args&... args) {
  std::ostringstream os;
  detail::cat_into(os, args...);
  return os.str();
}

// Per-thread floating point operation counter. Ops add to it while a counter
// is installed; used to verify the masked-forward cost contract.
struct FlopCount {
  uint64_t matmul = 0;          // 2*M*N*K per dense product
  uint64_t attention = 0;       // score + weighted-sum interaction terms only
  uint64_t total() const { return matmul + attention; }
};

inline FlopCount*& flop_counter() {
  thread_local FlopCount* counter = nullptr;
  return counter;
}

struct FlopScope {
  explicit FlopScope(FlopCount& c) { flop_counter() = &c; }
  ~FlopScope() { flop_counter() = nullptr; }
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;
};

}  // namespace xma
