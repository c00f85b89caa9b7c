#pragma once

#include "xma/tensor.hpp"

#include <cmath>
#include <utility>
#include <vector>

namespace xma {

namespace detail {

template <typename S>
void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(cat(op, ": shape mismatch (", a.rows(), "x", a.cols(),
                         " vs ", b.rows(), "x", b.cols(), ")"));
}

template <typename S>
void check_rowvec(const char* op, const Tensor<S>& v, Index d) {
  if (v.rows() != 1 || v.cols() != d)
    throw ShapeError(cat(op, ": expected a length-", d, " vector, got ",
                         v.rows(), "x", v.cols()));
}

inline void count_matmul_flops(Index m, Index n, Index k) {
  if (FlopCount* c = flop_counter()) c->matmul += 2ull * m * n * k;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("add", a, b);
  auto pa = a.node();
  auto pb = b.node();
  bool g = pa->requires_grad || pb->requires_grad;
  return detail::make_op<S>(pa->value + pb->value, a.rank(), g, [pa, pb](Node<S>& self) {
    if (pa->requires_grad) pa->accumulate(self.grad);
    if (pb->requires_grad) pb->accumulate(self.grad);
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("sub", a, b);
  auto pa = a.node();
  auto pb = b.node();
  bool g = pa->requires_grad || pb->requires_grad;
  return detail::make_op<S>(pa->value - pb->value, a.rank(), g, [pa, pb](Node<S>& self) {
    if (pa->requires_grad) pa->accumulate(self.grad);
    if (pb->requires_grad) pb->accumulate(-self.grad);
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("mul", a, b);
  auto pa = a.node();
  auto pb = b.node();
  bool g = pa->requires_grad || pb->requires_grad;
  return detail::make_op<S>(pa->value.cwiseProduct(pb->value), a.rank(), g,
                            [pa, pb](Node<S>& self) {
                              if (pa->requires_grad) pa->accumulate(self.grad.cwiseProduct(pb->value));
                              if (pb->requires_grad) pb->accumulate(self.grad.cwiseProduct(pa->value));
                            });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  auto pa = a.node();
  return detail::make_op<S>(pa->value * c, a.rank(), pa->requires_grad, [pa, c](Node<S>& self) {
    if (pa->requires_grad) pa->accumulate(self.grad * c);
  });
}

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }

// Broadcast a length-d vector over every row of x.
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
  detail::check_rowvec("add_rowvec", v, x.cols());
  auto px = x.node();
  auto pv = v.node();
  bool g = px->requires_grad || pv->requires_grad;
  RowVec<S> rv = pv->value.row(0);
  Mat<S> out = px->value;
  out.rowwise() += rv;
  return detail::make_op<S>(std::move(out), 2, g, [px, pv](Node<S>& self) {
    if (px->requires_grad) px->accumulate(self.grad);
    if (pv->requires_grad) pv->accumulate(self.grad.colwise().sum());
  });
}

template <typename S>
Tensor<S> mul_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
  detail::check_rowvec("mul_rowvec", v, x.cols());
  auto px = x.node();
  auto pv = v.node();
  bool g = px->requires_grad || pv->requires_grad;
  RowVec<S> rv = pv->value.row(0);
  Mat<S> out = px->value.array().rowwise() * rv.array();
  return detail::make_op<S>(std::move(out), 2, g, [px, pv](Node<S>& self) {
    RowVec<S> r = pv->value.row(0);
    if (px->requires_grad)
      px->accumulate((self.grad.array().rowwise() * r.array()).matrix());
    if (pv->requires_grad)
      pv->accumulate((self.grad.array() * px->value.array()).colwise().sum().matrix());
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.cols() != b.rows())
    throw ShapeError(cat("matmul: inner dimensions differ (", a.rows(), "x",
                         a.cols(), " times ", b.rows(), "x", b.cols(), ")"));
  auto pa = a.node();
  auto pb = b.node();
  bool g = pa->requires_grad || pb->requires_grad;
  detail::count_matmul_flops(a.rows(), b.cols(), a.cols());
  Mat<S> out(a.rows(), b.cols());
  out.noalias() = pa->value * pb->value;
  return detail::make_op<S>(std::move(out), 2, g, [pa, pb](Node<S>& self) {
    if (pa->requires_grad) pa->accumulate(self.grad * pb->value.transpose());
    if (pb->requires_grad) pb->accumulate(pa->value.transpose() * self.grad);
  });
}

// x*W + b, the standard affine layer.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Normalization and activations
// ---------------------------------------------------------------------------

// Per-row normalization to zero mean / unit variance (biased variance),
// followed by the learned affine. gamma/beta are length-d vectors.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps) {
  const Index d = x.cols();
  detail::check_rowvec("layer_norm gamma", gamma, d);
  detail::check_rowvec("layer_norm beta", beta, d);
  if (eps <= S(0)) throw ValueError("layer_norm: eps must be positive");
  auto px = x.node();
  auto pg = gamma.node();
  auto pb = beta.node();
  bool g = px->requires_grad || pg->requires_grad || pb->requires_grad;

  Vec<S> mean = px->value.rowwise().mean();
  Mat<S> centered = px->value.colwise() - mean;
  Vec<S> inv_std = (centered.array().square().rowwise().mean() + eps).rsqrt();
  Mat<S> xhat = centered.array().colwise() * inv_std.array();
  RowVec<S> gr = pg->value.row(0);
  RowVec<S> br = pb->value.row(0);
  Mat<S> out = (xhat.array().rowwise() * gr.array()).rowwise() + br.array();

  return detail::make_op<S>(std::move(out), 2, g,
                            [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<S>& self) {
    const Mat<S>& gy = self.grad;
    if (pb->requires_grad) pb->accumulate(gy.colwise().sum());
    if (pg->requires_grad) pg->accumulate((gy.array() * xhat.array()).colwise().sum().matrix());
    if (px->requires_grad) {
      RowVec<S> gr = pg->value.row(0);
      Mat<S> gxh = gy.array().rowwise() * gr.array();
      Vec<S> m1 = gxh.rowwise().mean();
      Vec<S> m2 = (gxh.array() * xhat.array()).rowwise().mean();
      Mat<S> dx = gxh;
      dx.colwise() -= m1;
      dx.array() -= xhat.array().colwise() * m2.array();
      dx.array().colwise() *= inv_std.array();
      px->accumulate(dx);
    }
  });
}

// Exact-erf GeLU: x * Phi(x).
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  auto px = x.node();
  const S inv_sqrt2 = S(0.7071067811865475244);
  Mat<S> out = px->value.array().unaryExpr([inv_sqrt2](S v) {
    return S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2));
  });
  return detail::make_op<S>(std::move(out), x.rank(), px->requires_grad, [px, inv_sqrt2](Node<S>& self) {
    const S inv_sqrt2pi = S(0.3989422804014326779);
    Mat<S> d = px->value.array().unaryExpr([inv_sqrt2, inv_sqrt2pi](S v) {
      S phi_cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
      S phi_pdf = inv_sqrt2pi * std::exp(S(-0.5) * v * v);
      return phi_cdf + v * phi_pdf;
    });
    px->accumulate(self.grad.cwiseProduct(d));
  });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  auto px = x.node();
  Mat<S> out = px->value.array().unaryExpr([](S v) {
    if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
    S e = std::exp(v);
    return e / (S(1) + e);
  });
  return detail::make_op<S>(std::move(out), x.rank(), px->requires_grad, [px](Node<S>& self) {
    px->accumulate((self.grad.array() * self.value.array() * (S(1) - self.value.array())).matrix());
  });
}

// Row-wise softmax with max subtraction for overflow safety.
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
  if (x.cols() < 1) throw ShapeError("softmax: empty rows");
  auto px = x.node();
  Vec<S> rowmax = px->value.rowwise().maxCoeff();
  Mat<S> e = (px->value.colwise() - rowmax).array().exp();
  Vec<S> sums = e.rowwise().sum();
  Mat<S> out = e.array().colwise() / sums.array();
  return detail::make_op<S>(std::move(out), x.rank(), px->requires_grad, [px](Node<S>& self) {
    Vec<S> dot = (self.grad.array() * self.value.array()).rowwise().sum();
    px->accumulate((self.value.array() * (self.grad.array().colwise() - dot.array())).matrix());
  });
}

// ---------------------------------------------------------------------------
// Indexing and layout
// ---------------------------------------------------------------------------

// Selects rows by index; indices must be unique and in range. The gradient
// scatters back, so dropped rows receive exactly zero.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, const IndexList& idx) {
  auto px = x.node();
  std::vector<char> seen(static_cast<size_t>(x.rows()), 0);
  for (Index i : idx) {
    if (i < 0 || i >= x.rows())
      throw ValueError(cat("gather_rows: index ", i, " out of range [0,", x.rows(), ")"));
    if (seen[static_cast<size_t>(i)])
      throw ValueError(cat("gather_rows: duplicate index ", i));
    seen[static_cast<size_t>(i)] = 1;
  }
  Mat<S> out(static_cast<Index>(idx.size()), x.cols());
  for (size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Index>(r)) = px->value.row(idx[r]);
  return detail::make_op<S>(std::move(out), 2, px->requires_grad, [px, idx](Node<S>& self) {
    Mat<S>& g = px->ensure_grad();
    for (size_t r = 0; r < idx.size(); ++r) g.row(idx[r]) += self.grad.row(static_cast<Index>(r));
  });
}

// Arbitrary element remap in flat row-major order; duplicate sources are
// allowed and the gradient scatter-adds.
template <typename S>
Tensor<S> reindex(const Tensor<S>& x, const IndexList& map, Index out_rows, Index out_cols) {
  auto px = x.node();
  const Index n = x.size();
  if (static_cast<Index>(map.size()) != out_rows * out_cols)
    throw ShapeError(cat("reindex: map size ", map.size(), " != ", out_rows, "x", out_cols));
  for (Index i : map)
    if (i < 0 || i >= n) throw ValueError(cat("reindex: source index ", i, " out of range"));
  Mat<S> out(out_rows, out_cols);
  const S* src = px->value.data();
  S* dst = out.data();
  for (size_t i = 0; i < map.size(); ++i) dst[i] = src[map[i]];
  return detail::make_op<S>(std::move(out), 2, px->requires_grad, [px, map](Node<S>& self) {
    Mat<S>& g = px->ensure_grad();
    S* gd = g.data();
    const S* sg = self.grad.data();
    for (size_t i = 0; i < map.size(); ++i) gd[map[i]] += sg[i];
  });
}

// Per-segment concatenation: for each of the n_seg segments, rows of a come
// before rows of b. With a_seg = rows(a), b_seg = rows(b) this is a plain
// two-block row concat.
template <typename S>
Tensor<S> concat_segments(const Tensor<S>& a, const Tensor<S>& b, Index a_seg, Index b_seg) {
  if (a.cols() != b.cols())
    throw ShapeError(cat("concat_segments: column mismatch ", a.cols(), " vs ", b.cols()));
  if (a_seg <= 0 || b_seg <= 0 || a.rows() % a_seg != 0 || b.rows() % b_seg != 0)
    throw ShapeError("concat_segments: segment lengths do not divide row counts");
  const Index n_seg = a.rows() / a_seg;
  if (b.rows() / b_seg != n_seg)
    throw ShapeError("concat_segments: segment count mismatch");
  auto pa = a.node();
  auto pb = b.node();
  bool g = pa->requires_grad || pb->requires_grad;
  const Index seg = a_seg + b_seg;
  Mat<S> out(n_seg * seg, a.cols());
  for (Index s = 0; s < n_seg; ++s) {
    out.middleRows(s * seg, a_seg) = pa->value.middleRows(s * a_seg, a_seg);
    out.middleRows(s * seg + a_seg, b_seg) = pb->value.middleRows(s * b_seg, b_seg);
  }
  return detail::make_op<S>(std::move(out), 2, g, [pa, pb, a_seg, b_seg, n_seg, seg](Node<S>& self) {
    if (pa->requires_grad) {
      Mat<S>& ga = pa->ensure_grad();
      for (Index s = 0; s < n_seg; ++s)
        ga.middleRows(s * a_seg, a_seg) += self.grad.middleRows(s * seg, a_seg);
    }
    if (pb->requires_grad) {
      Mat<S>& gb = pb->ensure_grad();
      for (Index s = 0; s < n_seg; ++s)
        gb.middleRows(s * b_seg, b_seg) += self.grad.middleRows(s * seg + a_seg, b_seg);
    }
  });
}

template <typename S>
Tensor<S> concat_rows(const Tensor<S>& a, const Tensor<S>& b) {
  return concat_segments(a, b, a.rows(), b.rows());
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& x, Index c0, Index w) {
  if (c0 < 0 || w <= 0 || c0 + w > x.cols())
    throw ShapeError(cat("slice_cols: [", c0, ",", c0 + w, ") out of ", x.cols(), " columns"));
  auto px = x.node();
  Mat<S> out = px->value.middleCols(c0, w);
  return detail::make_op<S>(std::move(out), 2, px->requires_grad, [px, c0, w](Node<S>& self) {
    px->ensure_grad().middleCols(c0, w) += self.grad;
  });
}

// Broadcast one row to n identical rows.
template <typename S>
Tensor<S> repeat_rows(const Tensor<S>& v, Index n) {
  if (v.rows() != 1) throw ShapeError("repeat_rows: input must have one row");
  auto pv = v.node();
  Mat<S> out = pv->value.replicate(n, 1);
  return detail::make_op<S>(std::move(out), 2, pv->requires_grad, [pv](Node<S>& self) {
    pv->accumulate(self.grad.colwise().sum());
  });
}

// Mean over each length-seg block of rows.
template <typename S>
Tensor<S> mean_rows_segments(const Tensor<S>& x, Index seg) {
  if (seg <= 0 || x.rows() % seg != 0)
    throw ShapeError(cat("mean_rows_segments: ", seg, " does not divide ", x.rows()));
  const Index n_seg = x.rows() / seg;
  auto px = x.node();
  Mat<S> out(n_seg, x.cols());
  for (Index s = 0; s < n_seg; ++s)
    out.row(s) = px->value.middleRows(s * seg, seg).colwise().mean();
  return detail::make_op<S>(std::move(out), 2, px->requires_grad, [px, seg, n_seg](Node<S>& self) {
    Mat<S>& g = px->ensure_grad();
    const S inv = S(1) / S(seg);
    for (Index s = 0; s < n_seg; ++s)
      g.middleRows(s * seg, seg).rowwise() += RowVec<S>(self.grad.row(s) * inv);
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  auto px = x.node();
  Mat<S> out(1, 1);
  out(0, 0) = px->value.sum();
  return detail::make_op<S>(std::move(out), 0, px->requires_grad, [px](Node<S>& self) {
    px->accumulate(Mat<S>::Constant(px->value.rows(), px->value.cols(), self.grad(0, 0)));
  });
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
  return scale(sum_all(x), S(1) / S(x.size()));
}

// Mean squared difference over all elements.
template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("mse", a, b);
  auto pa = a.node();
  auto pb = b.node();
  bool g = pa->requires_grad || pb->requires_grad;
  Mat<S> diff = pa->value - pb->value;
  Mat<S> out(1, 1);
  out(0, 0) = diff.squaredNorm() / S(diff.size());
  return detail::make_op<S>(std::move(out), 0, g, [pa, pb](Node<S>& self) {
    const S c = self.grad(0, 0) * S(2) / S(pa->value.size());
    Mat<S> d = c * (pa->value - pb->value);
    if (pa->requires_grad) pa->accumulate(d);
    if (pb->requires_grad) pb->accumulate(-d);
  });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// Fused multi-head attention over uniform segments. q is (n_seg*q_seg) x d,
// k and v are (n_seg*kv_seg) x d; segment s attends only within itself.
// Head h uses the column block [h*dh, (h+1)*dh). Softmaxed weights are kept
// for the backward pass and optionally exported (index = seg*heads + head).
template <typename S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                    int heads, Index q_seg, Index kv_seg, S scale,
                    std::vector<Mat<S>>* attn_out = nullptr) {
  const Index d = q.cols();
  if (k.cols() != d || v.cols() != d)
    throw ShapeError("attention: q/k/v must share the feature dimension");
  if (heads <= 0 || d % heads != 0)
    throw ShapeError(cat("attention: dim ", d, " not divisible by ", heads, " heads"));
  if (q_seg <= 0 || kv_seg <= 0 || q.rows() % q_seg != 0 || k.rows() % kv_seg != 0)
    throw ShapeError("attention: segment lengths do not divide row counts");
  if (k.rows() != v.rows()) throw ShapeError("attention: k/v row mismatch");
  const Index n_seg = q.rows() / q_seg;
  if (k.rows() / kv_seg != n_seg) throw ShapeError("attention: segment count mismatch");
  const Index dh = d / heads;

  auto pq = q.node();
  auto pk = k.node();
  auto pv = v.node();
  bool g = pq->requires_grad || pk->requires_grad || pv->requires_grad;

  if (FlopCount* c = flop_counter())
    c->attention += 4ull * n_seg * heads * q_seg * kv_seg * dh;

  std::vector<Mat<S>> weights;
  weights.reserve(static_cast<size_t>(n_seg * heads));
  Mat<S> out(q.rows(), d);
  for (Index s = 0; s < n_seg; ++s) {
    for (int h = 0; h < heads; ++h) {
      auto qb = pq->value.block(s * q_seg, h * dh, q_seg, dh);
      auto kb = pk->value.block(s * kv_seg, h * dh, kv_seg, dh);
      auto vb = pv->value.block(s * kv_seg, h * dh, kv_seg, dh);
      Mat<S> a(q_seg, kv_seg);
      a.noalias() = qb * kb.transpose();
      a *= scale;
      Vec<S> rowmax = a.rowwise().maxCoeff();
      a = (a.colwise() - rowmax).array().exp();
      Vec<S> sums = a.rowwise().sum();
      a.array().colwise() /= sums.array();
      out.block(s * q_seg, h * dh, q_seg, dh).noalias() = a * vb;
      weights.push_back(std::move(a));
    }
  }
  if (attn_out != nullptr) *attn_out = weights;

  return detail::make_op<S>(std::move(out), 2, g,
                            [pq, pk, pv, heads, q_seg, kv_seg, scale, dh, n_seg,
                             weights = std::move(weights)](Node<S>& self) {
    if (pq->requires_grad) pq->ensure_grad();
    if (pk->requires_grad) pk->ensure_grad();
    if (pv->requires_grad) pv->ensure_grad();
    for (Index s = 0; s < n_seg; ++s) {
      for (int h = 0; h < heads; ++h) {
        const Mat<S>& a = weights[static_cast<size_t>(s * heads + h)];
        auto qb = pq->value.block(s * q_seg, h * dh, q_seg, dh);
        auto kb = pk->value.block(s * kv_seg, h * dh, kv_seg, dh);
        auto vb = pv->value.block(s * kv_seg, h * dh, kv_seg, dh);
        auto go = self.grad.block(s * q_seg, h * dh, q_seg, dh);
        if (pv->requires_grad)
          pv->grad.block(s * kv_seg, h * dh, kv_seg, dh).noalias() += a.transpose() * go;
        if (pq->requires_grad || pk->requires_grad) {
          Mat<S> da(q_seg, kv_seg);
          da.noalias() = go * vb.transpose();
          Vec<S> dot = (da.array() * a.array()).rowwise().sum();
          Mat<S> ds = (a.array() * (da.array().colwise() - dot.array())).matrix() * scale;
          if (pq->requires_grad)
            pq->grad.block(s * q_seg, h * dh, q_seg, dh).noalias() += ds * kb;
          if (pk->requires_grad)
            pk->grad.block(s * kv_seg, h * dh, kv_seg, dh).noalias() += ds.transpose() * qb;
        }
      }
    }
  });
}

}  // namespace xma
