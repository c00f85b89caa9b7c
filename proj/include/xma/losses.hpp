#pragma once

#include "xma/ops.hpp"

namespace xma {

// Guard added to vector norms before dividing; zero-norm inputs are flagged
// rather than producing NaN.
template <typename S>
constexpr S kNormEps = S(1e-12);

// Asymmetric BYOL objective for matched rows: sum over rows of
//   2 - 2 * <q_r, z_r> / ((|q_r|+eps) (|z_r|+eps)).
// zero_norm_rows, when given, counts rows with a vanishing side.
template <typename S>
Tensor<S> byol_loss_rows_sum(const Tensor<S>& q, const Tensor<S>& z, long* zero_norm_rows = nullptr) {
  detail::check_same_shape("byol_loss", q, z);
  auto pq = q.node();
  auto pz = z.node();
  bool g = pq->requires_grad || pz->requires_grad;
  const Index n = q.rows();

  Vec<S> nq(n), nz(n), dot(n);
  S total = S(0);
  long zero_rows = 0;
  for (Index r = 0; r < n; ++r) {
    nq(r) = pq->value.row(r).norm();
    nz(r) = pz->value.row(r).norm();
    dot(r) = pq->value.row(r).dot(pz->value.row(r));
    if (nq(r) == S(0) || nz(r) == S(0)) ++zero_rows;
    const S s = dot(r) / ((nq(r) + kNormEps<S>)*(nz(r) + kNormEps<S>));
    total += S(2) - S(2) * s;
  }
  if (zero_norm_rows != nullptr) *zero_norm_rows += zero_rows;

  Mat<S> out(1, 1);
  out(0, 0) = total;
  return detail::make_op<S>(std::move(out), 0, g,
                            [pq, pz, nq = std::move(nq), nz = std::move(nz), dot = std::move(dot)](Node<S>& self) {
    const S gy = self.grad(0, 0);
    if (pq->requires_grad) pq->ensure_grad();
    if (pz->requires_grad) pz->ensure_grad();
    for (Index r = 0; r < nq.size(); ++r) {
      const S dq = nq(r) + kNormEps<S>;
      const S dz = nz(r) + kNormEps<S>;
      if (pq->requires_grad) {
        RowVec<S> ds = pz->value.row(r) / (dq * dz);
        if (nq(r) > S(0)) ds -= (dot(r) / (dq * dq * dz * nq(r))) * pq->value.row(r);
        pq->grad.row(r) += (S(-2) * gy) * ds;
      }
      if (pz->requires_grad) {
        RowVec<S> ds = pq->value.row(r) / (dq * dz);
        if (nz(r) > S(0)) ds -= (dot(r) / (dz * dz * dq * nz(r))) * pz->value.row(r);
        pz->grad.row(r) += (S(-2) * gy) * ds;
      }
    }
  });
}

// Single-pair convenience: q and z_teacher as vectors. The caller passes the
// teacher side through stop_grad so the gradient reaches q only.
template <typename S>
Tensor<S> byol_loss(const Tensor<S>& q, const Tensor<S>& z_teacher, long* zero_norm_rows = nullptr) {
  if (q.rows() != 1 || z_teacher.rows() != 1)
    throw ShapeError("byol_loss: expects single-row vectors");
  return byol_loss_rows_sum(q, z_teacher, zero_norm_rows);
}

namespace detail {
// Cosine similarity derivative through an eps-guarded normalization:
// s = <u, zhat> with u = q/(|q|+eps); ds/dq = (zhat - s*qhat) / (|q|+eps).
template <typename S>
RowVec<S> cosine_grad_wrt_first(const RowVec<S>& a, S na, const RowVec<S>& bhat, S s) {
  RowVec<S> d = bhat / (na + kNormEps<S>);
  if (na > S(0)) d -= (s / (na + kNormEps<S>)) * (a / na);
  return d;
}
}  // namespace detail

// InfoNCE with one positive and an explicit negative bank (rows of z_negs).
// All vectors are l2-normalized internally; an empty bank degenerates to 0.
template <typename S>
Tensor<S> infonce_loss(const Tensor<S>& q, const Tensor<S>& z_pos, const Tensor<S>& z_negs,
                       S tau, bool* degenerate = nullptr) {
  if (!(tau > S(0))) throw ValueError("infonce_loss: tau must be positive");
  if (q.rows() != 1 || z_pos.rows() != 1)
    throw ShapeError("infonce_loss: q and z_pos must be single rows");
  if (z_negs.size() > 0 && z_negs.cols() != q.cols())
    throw ShapeError("infonce_loss: negative bank dimension mismatch");
  auto pq = q.node();
  auto pp = z_pos.node();
  auto pn = z_negs.node();
  bool g = pq->requires_grad || pp->requires_grad || pn->requires_grad;
  const Index m = z_negs.rows() * (z_negs.size() > 0 ? 1 : 0);
  if (degenerate != nullptr) *degenerate = (m == 0);

  const S nq = pq->value.row(0).norm();
  RowVec<S> u = pq->value.row(0) / (nq + kNormEps<S>);
  const S np = pp->value.row(0).norm();
  RowVec<S> phat = pp->value.row(0) / (np + kNormEps<S>);
  const S s_pos = u.dot(phat);

  Vec<S> nneg(m), s_neg(m);
  Mat<S> nhat(m, q.cols());
  for (Index i = 0; i < m; ++i) {
    nneg(i) = pn->value.row(i).norm();
    nhat.row(i) = pn->value.row(i) / (nneg(i) + kNormEps<S>);
    s_neg(i) = u.dot(nhat.row(i));
  }

  // loss = -s_pos/tau + logsumexp({s_pos, s_neg...}/tau)
  S mx = s_pos / tau;
  for (Index i = 0; i < m; ++i) mx = std::max(mx, s_neg(i) / tau);
  S z = std::exp(s_pos / tau - mx);
  for (Index i = 0; i < m; ++i) z += std::exp(s_neg(i) / tau - mx);
  const S loss = -s_pos / tau + mx + std::log(z);

  Mat<S> out(1, 1);
  out(0, 0) = loss;
  return detail::make_op<S>(std::move(out), 0, g,
                            [pq, pp, pn, tau, m, nq, np, s_pos, u = std::move(u), phat = std::move(phat),
                             nneg = std::move(nneg), s_neg = std::move(s_neg), nhat = std::move(nhat),
                             mx, z](Node<S>& self) {
    const S gy = self.grad(0, 0);
    // dL/ds_pos = (pi_pos - 1)/tau, dL/ds_i = pi_i/tau.
    const S pi_pos = std::exp(s_pos / tau - mx) / z;
    if (pq->requires_grad) {
      RowVec<S> dq = (gy * (pi_pos - S(1)) / tau) *
                     detail::cosine_grad_wrt_first<S>(pq->value.row(0), nq, phat, s_pos);
      for (Index i = 0; i < m; ++i) {
        const S pi = std::exp(s_neg(i) / tau - mx) / z;
        dq += (gy * pi / tau) *
              detail::cosine_grad_wrt_first<S>(pq->value.row(0), nq, RowVec<S>(nhat.row(i)), s_neg(i));
      }
      pq->accumulate(dq);
    }
    if (pp->requires_grad) {
      RowVec<S> dp = (gy * (pi_pos - S(1)) / tau) *
                     detail::cosine_grad_wrt_first<S>(pp->value.row(0), np, u, s_pos);
      pp->accumulate(dp);
    }
    if (pn->requires_grad) {
      Mat<S>& gn = pn->ensure_grad();
      for (Index i = 0; i < m; ++i) {
        const S pi = std::exp(s_neg(i) / tau - mx) / z;
        gn.row(i) += (gy * pi / tau) *
                     detail::cosine_grad_wrt_first<S>(RowVec<S>(pn->value.row(i)), nneg(i), u, s_neg(i));
      }
    }
  });
}

// In-batch InfoNCE for the training path: q rows against a constant teacher
// bank; row r's positive is bank row pos_index[r], negatives are all other
// bank rows. Summed over rows; gradient reaches q only (the bank is teacher
// output and already detached).
template <typename S>
Tensor<S> infonce_rows_sum(const Tensor<S>& q, const Mat<S>& bank,
                           const IndexList& pos_index, S tau) {
  if (!(tau > S(0))) throw ValueError("infonce_rows_sum: tau must be positive");
  if (bank.cols() != q.cols()) throw ShapeError("infonce_rows_sum: bank dimension mismatch");
  if (static_cast<Index>(pos_index.size()) != q.rows())
    throw ShapeError("infonce_rows_sum: one positive index per q row required");
  auto pq = q.node();
  const Index n = q.rows();
  const Index b = bank.rows();

  Mat<S> bhat = bank;
  Vec<S> bn = bank.rowwise().norm();
  for (Index i = 0; i < b; ++i) bhat.row(i) /= (bn(i) + kNormEps<S>);

  Vec<S> qn = pq->value.rowwise().norm();
  Mat<S> u = pq->value;
  for (Index r = 0; r < n; ++r) u.row(r) /= (qn(r) + kNormEps<S>);

  Mat<S> sims(n, b);
  sims.noalias() = u * bhat.transpose();

  S total = S(0);
  Mat<S> pi(n, b);
  for (Index r = 0; r < n; ++r) {
    const S mx = sims.row(r).maxCoeff() / tau;
    RowVec<S> e = ((sims.row(r) / tau).array() - mx).exp();
    const S z = e.sum();
    pi.row(r) = e / z;
    total += -sims(r, pos_index[r]) / tau + mx + std::log(z);
  }

  Mat<S> out(1, 1);
  out(0, 0) = total;
  return detail::make_op<S>(std::move(out), 0, pq->requires_grad,
                            [pq, tau, pos_index, qn = std::move(qn), u = std::move(u),
                             bhat = std::move(bhat), sims = std::move(sims),
                             pi = std::move(pi)](Node<S>& self) {
    const S gy = self.grad(0, 0);
    Mat<S>& gq = pq->ensure_grad();
    const Index n = u.rows();
    const Index b = bhat.rows();
    for (Index r = 0; r < n; ++r) {
      // dL/ds_j = (pi_j - [j == pos]) / tau; chain through normalization.
      RowVec<S> dl_ds = pi.row(r) / tau;
      dl_ds(pos_index[r]) -= S(1) / tau;
      // ds_j/dq = (bhat_j - s_j*u)/(|q|+eps); accumulate sum_j dl_ds_j * ds_j/dq.
      RowVec<S> acc = dl_ds * bhat;  // sum_j dl_ds_j * bhat_j
      S w = S(0);
      for (Index j = 0; j < b; ++j) w += dl_ds(j) * sims(r, j);
      acc -= w * u.row(r);
      gq.row(r) += (gy / (qn(r) + kNormEps<S>)) * acc;
    }
  });
}

// Mean of per-mask scalar losses; averaging the loss averages the gradient.
template <typename S>
Tensor<S> multi_mask_loss(const std::vector<Tensor<S>>& per_mask_losses) {
  if (per_mask_losses.empty()) throw ValueError("multi_mask_loss: empty loss list");
  Tensor<S> total = per_mask_losses[0];
  for (size_t k = 1; k < per_mask_losses.size(); ++k) total = add(total, per_mask_losses[k]);
  return scale(total, S(1) / S(per_mask_losses.size()));
}

// Mean cross entropy of row logits against integer labels.
template <typename S>
Tensor<S> cross_entropy_rows(const Tensor<S>& logits, const std::vector<int>& labels) {
  if (static_cast<Index>(labels.size()) != logits.rows())
    throw ShapeError("cross_entropy_rows: one label per row required");
  auto px = logits.node();
  const Index n = logits.rows();
  Vec<S> rowmax = px->value.rowwise().maxCoeff();
  Mat<S> e = (px->value.colwise() - rowmax).array().exp();
  Vec<S> sums = e.rowwise().sum();
  Mat<S> probs = e.array().colwise() / sums.array();
  S total = S(0);
  for (Index r = 0; r < n; ++r) {
    const int y = labels[static_cast<size_t>(r)];
    if (y < 0 || y >= logits.cols())
      throw ValueError(cat("cross_entropy_rows: label ", y, " out of range"));
    total += rowmax(r) + std::log(sums(r)) - px->value(r, y);
  }
  Mat<S> out(1, 1);
  out(0, 0) = total / S(n);
  return detail::make_op<S>(std::move(out), 0, px->requires_grad,
                            [px, labels, probs = std::move(probs)](Node<S>& self) {
    const S gy = self.grad(0, 0) / S(probs.rows());
    Mat<S> d = probs;
    for (Index r = 0; r < d.rows(); ++r) d(r, labels[static_cast<size_t>(r)]) -= S(1);
    px->accumulate(gy * d);
  });
}

}  // namespace xma
