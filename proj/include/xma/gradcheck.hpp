#pragma once

#include "xma/ops.hpp"

#include <functional>
#include <vector>

namespace xma {

// Central-difference gradient oracle. f maps the parameter list to a scalar;
// the return value is the worst relative error over all coordinates,
//   |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
// f must be a pure function of the inputs. Run at 64-bit for oracle use.
template <typename S>
S finite_diff_check(const std::function<Tensor<S>(const std::vector<Tensor<S>>&)>& f,
                    const std::vector<Tensor<S>>& point, S h) {
  if (!(h > S(0))) throw ValueError("finite_diff_check: h must be positive");

  std::vector<Tensor<S>> leaves;
  leaves.reserve(point.size());
  for (const auto& p : point)
    leaves.push_back(Tensor<S>::from_matrix(p.value(), true, p.rank()));

  std::vector<Mat<S>> analytic;
  {
    Tape<S> tape;
    typename Tape<S>::Scope scope(tape);
    Tensor<S> loss = f(leaves);
    if (loss.size() != 1) throw ShapeError("finite_diff_check: f must return a scalar");
    tape.backward(loss);
    for (const auto& l : leaves) analytic.push_back(l.grad_or_zero());
  }

  S worst = S(0);
  for (size_t t = 0; t < leaves.size(); ++t) {
    Mat<S>& m = leaves[t].raw();
    for (Index i = 0; i < m.size(); ++i) {
      const S saved = m.data()[i];
      m.data()[i] = saved + h;
      const S up = f(leaves).item();
      m.data()[i] = saved - h;
      const S down = f(leaves).item();
      m.data()[i] = saved;
      const S numeric = (up - down) / (S(2) * h);
      const S exact = analytic[t].data()[i];
      const S err = std::abs(exact - numeric) / (std::abs(exact) + std::abs(numeric) + S(1e-12));
      if (err > worst) worst = err;
    }
  }
  return worst;
}

}  // namespace xma
