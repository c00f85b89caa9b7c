#pragma once

#include "xma/encoder.hpp"

#include <cmath>
#include <map>

namespace xma {

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

// Momentum schedule m(t) = 1 - (1 - m0) * (cos(pi t / T) + 1) / 2:
// m(0) = m0 exactly, m(T) = 1 exactly, non-decreasing.
inline double ema_momentum_at(int64_t t, int64_t total, double m0) {
  if (t < 0 || t > total) throw ValueError(cat("ema_momentum_at: step ", t, " outside [0,", total, "]"));
  if (total == 0) return 1.0;
  const double w = (std::cos(M_PI * static_cast<double>(t) / static_cast<double>(total)) + 1.0) / 2.0;
  return 1.0 - (1.0 - m0) * w;
}

// Linear warmup 0 -> base over W steps, then cosine decay to 0 at T.
inline double lr_at(int64_t t, int64_t warmup, int64_t total, double base) {
  if (warmup >= total) throw ValueError(cat("lr_at: warmup ", warmup, " must be < total ", total));
  if (t < 0 || t > total) throw ValueError(cat("lr_at: step ", t, " outside [0,", total, "]"));
  if (t < warmup) return base * static_cast<double>(t) / static_cast<double>(warmup);
  const double progress = static_cast<double>(t - warmup) / static_cast<double>(total - warmup);
  return base * (std::cos(M_PI * progress) + 1.0) / 2.0;
}

// ---------------------------------------------------------------------------
// EMA teacher update
// ---------------------------------------------------------------------------

// theta_t <- m * theta_t + (1-m) * theta_s for every teacher parameter.
// m == 1 is an exact freeze (the arithmetic identity, short-circuited so the
// result is bitwise unchanged).
template <typename S>
void ema_update(ParamStore<S>& teacher, const ParamStore<S>& student, S m) {
  if (m == S(1)) return;
  for (auto& [name, t] : teacher) {
    if (!student.contains(name))
      throw ValueError(cat("ema_update: student lacks parameter ", name));
    const Tensor<S>& s = student.at(name);
    if (s.rows() != t.rows() || s.cols() != t.cols())
      throw ShapeError(cat("ema_update: shape mismatch for ", name));
    t.raw() = m * t.value() + (S(1) - m) * s.value();
  }
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename S>
struct AdamState {
  std::map<std::string, Mat<S>> m;
  std::map<std::string, Mat<S>> v;
  int64_t t = 0;  // completed steps
};

// One decoupled-weight-decay Adam step over every parameter that carries a
// gradient. Decay (theta -= lr*wd*theta) is applied separately from the
// adaptive step; when exclude_1d is set it skips vectors (biases, norms,
// layer scales, class token).
template <typename S>
void adamw_step(ParamStore<S>& params, AdamState<S>& state, S lr, S wd, bool exclude_1d,
                const AdamHyper& h = {}) {
  state.t += 1;
  const S b1 = static_cast<S>(h.beta1);
  const S b2 = static_cast<S>(h.beta2);
  const S eps = static_cast<S>(h.eps);
  const S bc1 = S(1) - static_cast<S>(std::pow(h.beta1, static_cast<double>(state.t)));
  const S bc2 = S(1) - static_cast<S>(std::pow(h.beta2, static_cast<double>(state.t)));
  for (auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    const Mat<S>& g = p.grad();
    auto mit = state.m.find(name);
    if (mit == state.m.end()) {
      mit = state.m.emplace(name, Mat<S>::Zero(p.rows(), p.cols())).first;
      state.v.emplace(name, Mat<S>::Zero(p.rows(), p.cols()));
    }
    Mat<S>& m = mit->second;
    Mat<S>& v = state.v.at(name);
    m = b1 * m + (S(1) - b1) * g;
    v = b2 * v + (S(1) - b2) * g.cwiseProduct(g);
    if (wd != S(0) && !(exclude_1d && p.rank() < 2)) p.raw() -= (lr * wd) * p.value();
    p.raw().array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
  }
}

// Global-norm gradient clip; returns the pre-clip norm.
template <typename S>
S clip_gradients(ParamStore<S>& params, S max_norm) {
  S sq = S(0);
  for (auto& [name, p] : params)
    if (p.has_grad()) sq += p.grad().squaredNorm();
  const S norm = std::sqrt(sq);
  if (max_norm > S(0) && norm > max_norm) {
    const S c = max_norm / norm;
    for (auto& [name, p] : params)
      if (p.has_grad()) p.node()->grad *= c;
  }
  return norm;
}

}  // namespace xma
