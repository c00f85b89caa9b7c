#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fd_suite.hpp"

#include "xma/gradcheck.hpp"
#include "xma/losses.hpp"
#include "xma/ops.hpp"
#include "xma/rng.hpp"

#include <cmath>

using namespace xma;
using TD = Tensor<double>;

namespace {

TD mat2(std::initializer_list<std::initializer_list<double>> rows) {
  Mat<double> m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index r = 0;
  for (const auto& row : rows) {
    Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return TD::from_matrix(std::move(m));
}

}  // namespace

TEST_CASE("rng streams are deterministic and derivation is position-free") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  // consuming the parent does not move child streams
  Rng p(7);
  Rng c1 = p.derive(3);
  p.next_u64();
  p.next_u64();
  Rng c2 = p.derive(3);
  CHECK(c1.next_u64() == c2.next_u64());
  // distinct keys decorrelate
  CHECK(Rng(7).derive(3).next_u64() != Rng(7).derive(4).next_u64());
}

TEST_CASE("rng below is in range and roughly uniform") {
  Rng rng(9);
  int counts[10] = {0};
  for (int i = 0; i < 100000; ++i) {
    uint64_t v = rng.below(10);
    REQUIRE(v < 10);
    counts[v]++;
  }
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
}

TEST_CASE("matmul forward examples") {
  TD eye = mat2({{1, 0}, {0, 1}});
  TD b = mat2({{5, 6}, {7, 8}});
  CHECK(matmul(eye, b).value() == b.value());

  TD a = mat2({{1, 2}, {3, 4}});
  Mat<double> expect(2, 2);
  expect << 19, 22, 43, 50;
  CHECK(matmul(a, b).value().isApprox(expect, 1e-14));

  TD bad = TD::zeros(4, 5);
  TD lhs = TD::zeros(2, 3);
  CHECK_THROWS_AS(matmul(lhs, bad), ShapeError);
}

TEST_CASE("layer_norm forward examples") {
  TD g = TD::row({1, 1, 1, 1});
  TD b = TD::row({0, 0, 0, 0});
  TD x = mat2({{5, 5, 5, 5}});
  Mat<double> out = layer_norm(x, g, b, 1e-6).value();
  for (Index i = 0; i < 4; ++i) CHECK(out(0, i) == doctest::Approx(0.0).epsilon(1e-9));

  TD g2 = TD::row({1, 1});
  TD b2 = TD::row({0, 0});
  Mat<double> out2 = layer_norm(mat2({{1, -1}}), g2, b2, 1e-12).value();
  CHECK(out2(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(out2(0, 1) == doctest::Approx(-1.0).epsilon(1e-6));

  TD g3 = TD::row({1, 1, 1});
  TD b3 = TD::row({0, 0, 0});
  Mat<double> out3 = layer_norm(mat2({{0, 2, 4}}), g3, b3, 1e-6).value();
  // direct formula: (x - 2) / sqrt(8/3)
  CHECK(out3(0, 0) == doctest::Approx(-1.224744871).epsilon(1e-5));
  CHECK(out3(0, 1) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(out3(0, 2) == doctest::Approx(1.224744871).epsilon(1e-5));

  CHECK_THROWS_AS(layer_norm(x, g, b, 0.0), ValueError);
}

TEST_CASE("layer_norm normalizes nonconstant rows") {
  Rng rng(3);
  TD x = TD::from_matrix(testing::random_mat(rng, 5, 8, 2.0));
  TD g = TD::from_matrix(Mat<double>::Ones(1, 8), false, 1);
  TD b = TD::from_matrix(Mat<double>::Zero(1, 8), false, 1);
  Mat<double> out = layer_norm(x, g, b, 1e-6).value();
  for (Index r = 0; r < out.rows(); ++r) {
    CHECK(std::abs(out.row(r).mean()) < 1e-6);
    double var = (out.row(r).array() - out.row(r).mean()).square().mean();
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("gelu examples") {
  TD x = TD::row({0.0, 10.0, 1.0});
  Mat<double> y = gelu(x).value();
  CHECK(y(0, 0) == 0.0);
  CHECK(y(0, 1) == doctest::Approx(10.0).epsilon(1e-7));
  CHECK(y(0, 2) == doctest::Approx(0.8413447460685429).epsilon(1e-9));
}

TEST_CASE("softmax examples and properties") {
  Mat<double> y = softmax_rows(TD::row({0.0, 0.0})).value();
  CHECK(y(0, 0) == doctest::Approx(0.5));
  CHECK(y(0, 1) == doctest::Approx(0.5));

  Mat<double> big = softmax_rows(TD::row({1000.0, 0.0})).value();
  CHECK(big.allFinite());
  CHECK(big(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(big(0, 1) == doctest::Approx(0.0).epsilon(1e-12));

  Mat<double> thirds = softmax_rows(TD::row({std::log(2.0), 0.0})).value();
  CHECK(thirds(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(thirds(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  Rng rng(5);
  Mat<double> r = softmax_rows(TD::from_matrix(testing::random_mat(rng, 7, 9, 3.0))).value();
  for (Index i = 0; i < r.rows(); ++i) {
    CHECK(r.row(i).sum() == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(r.row(i).minCoeff() >= 0.0);
  }
}

TEST_CASE("gather_rows semantics") {
  Rng rng(11);
  TD x = TD::from_matrix(testing::random_mat(rng, 3, 4));
  CHECK(gather_rows(x, {0, 1, 2}).value() == x.value());

  Mat<double> re = gather_rows(x, {2, 0}).value();
  CHECK(re.row(0) == x.value().row(2));
  CHECK(re.row(1) == x.value().row(0));

  CHECK_THROWS_AS(gather_rows(x, {0, 3}), ValueError);
  CHECK_THROWS_AS(gather_rows(x, {1, 1}), ValueError);

  // gradient of sum(gather(x, [1])) is one-hot on row 1
  TD leaf = TD::from_matrix(testing::random_mat(rng, 3, 4), true);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    tape.backward(sum_all(gather_rows(leaf, {1})));
  }
  Mat<double> g = leaf.grad();
  CHECK(g.row(0).isZero(0));
  CHECK(g.row(2).isZero(0));
  CHECK((g.row(1).array() == 1.0).all());
}

TEST_CASE("backward basics") {
  Rng rng(13);
  TD x = TD::from_matrix(testing::random_mat(rng, 2, 3), true);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    tape.backward(sum_all(x));
  }
  CHECK((x.grad().array() == 1.0).all());

  // stop-gradient: loss = sum(stop_grad(a) * b) gives grad(a)=0, grad(b)=a
  TD a = TD::from_matrix(testing::random_mat(rng, 2, 3), true);
  TD b = TD::from_matrix(testing::random_mat(rng, 2, 3), true);
  Tape<double> tape2;
  {
    Tape<double>::Scope scope(tape2);
    tape2.backward(sum_all(mul(stop_grad(a), b)));
  }
  CHECK_FALSE(a.has_grad());
  CHECK((a.grad_or_zero().array() == 0.0).all());
  CHECK(b.grad() == a.value());
}

TEST_CASE("backward error paths") {
  Rng rng(17);
  TD x = TD::from_matrix(testing::random_mat(rng, 2, 2), true);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  TD y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), ShapeError);  // non-scalar loss
  TD loss = sum_all(y);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), ValueError);  // tape consumed
}

TEST_CASE("forward is bit-reproducible") {
  Rng rng(19);
  Mat<double> xv = testing::random_mat(rng, 6, 8);
  Mat<double> wv = testing::random_mat(rng, 8, 8);
  auto run = [&]() {
    TD x = TD::from_matrix(xv);
    TD w = TD::from_matrix(wv);
    return softmax_rows(gelu(matmul(x, w))).value();
  };
  Mat<double> r1 = run();
  Mat<double> r2 = run();
  CHECK(std::memcmp(r1.data(), r2.data(), sizeof(double) * r1.size()) == 0);
}

TEST_CASE("finite_diff_check closed forms") {
  // f = x^2 at x=3: analytic gradient 6
  auto square = [](const std::vector<TD>& p) { return mul(p[0], p[0]); };
  double err = finite_diff_check<double>(square, {TD::scalar(3.0)}, 1e-4);
  CHECK(err < 1e-8);

  // linear f: central differences are exact up to rounding
  auto lin = [](const std::vector<TD>& p) { return scale(sum_all(p[0]), 2.5); };
  Rng rng(23);
  double lerr = finite_diff_check<double>(lin, {TD::from_matrix(testing::random_mat(rng, 3, 3))}, 1e-3);
  CHECK(lerr < 1e-10);

  CHECK_THROWS_AS(finite_diff_check<double>(square, {TD::scalar(1.0)}, 0.0), ValueError);
}

TEST_CASE("fd suite: every differentiable op < 1e-5 on random shapes") {
  auto results = testing::run_fd_suite(2024, 10);
  for (const auto& c : results) {
    INFO(c.name);
    CHECK(c.worst < 1e-5);
  }
  CHECK(results.size() >= 20);  // every op family present
}

TEST_CASE("byol loss closed forms") {
  TD q = TD::row({1, 0});
  TD z = TD::row({0.6, 0.8});
  CHECK(byol_loss(q, z).item() == doctest::Approx(0.8).epsilon(1e-9));
  CHECK(byol_loss(q, q).item() == doctest::Approx(0.0).epsilon(1e-9));
  TD nq = TD::row({-1, 0});
  CHECK(byol_loss(q, nq).item() == doctest::Approx(4.0).epsilon(1e-9));

  // invariant under positive rescaling of either side
  TD zs = TD::row({6, 8});
  CHECK(byol_loss(q, zs).item() == doctest::Approx(0.8).epsilon(1e-9));

  // zero-norm side is flagged, not NaN
  long flags = 0;
  TD zero = TD::row({0, 0});
  double v = byol_loss(q, zero, &flags).item();
  CHECK(std::isfinite(v));
  CHECK(flags == 1);

  // gradient reaches q only when teacher side is stop-gradient
  TD lq = TD::from_matrix(q.value(), true, 1);
  TD lz = TD::from_matrix(z.value(), true, 1);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    tape.backward(byol_loss(lq, stop_grad(lz)));
  }
  CHECK(lq.has_grad());
  CHECK_FALSE(lz.has_grad());
}

TEST_CASE("infonce loss closed forms") {
  TD q = TD::row({1, 0});
  TD pos = TD::row({1, 0});
  TD none = TD::zeros(0, 2);
  bool degen = false;
  CHECK(infonce_loss(q, pos, none, 0.2, &degen).item() == doctest::Approx(0.0));
  CHECK(degen);

  TD neg = TD::row({0, 1});
  double v = infonce_loss(q, pos, neg, 0.2).item();
  CHECK(v == doctest::Approx(std::log1p(std::exp(-5.0))).epsilon(1e-9));
  CHECK(v == doctest::Approx(0.0067153).epsilon(1e-4));

  // s_pos equal to every negative similarity -> log(n+1)
  TD q2 = TD::row({1, 0});
  Mat<double> negs(3, 2);
  negs << 1, 0, 1, 0, 1, 0;
  double u = infonce_loss(q2, pos, TD::from_matrix(negs), 0.2).item();
  CHECK(u == doctest::Approx(std::log(4.0)).epsilon(1e-9));

  // tau -> infinity tends to log(n+1)
  Rng rng(3);
  double w = infonce_loss(q2, pos, TD::from_matrix(testing::random_mat(rng, 3, 2)), 1e9).item();
  CHECK(w == doctest::Approx(std::log(4.0)).epsilon(1e-6));

  CHECK_THROWS_AS(infonce_loss(q, pos, neg, 0.0), ValueError);
}

TEST_CASE("infonce_rows_sum matches per-row infonce_loss") {
  Rng rng(31);
  Mat<double> bank = testing::random_mat(rng, 5, 4);
  Mat<double> qv = testing::random_mat(rng, 3, 4);
  IndexList pos = {2, 0, 4};
  double batched = infonce_rows_sum(TD::from_matrix(qv), bank, pos, 0.2).item();
  double manual = 0.0;
  for (Index r = 0; r < 3; ++r) {
    Mat<double> negs(4, 4);
    Index j = 0;
    for (Index i = 0; i < 5; ++i)
      if (i != pos[static_cast<size_t>(r)]) negs.row(j++) = bank.row(i);
    manual += infonce_loss(TD::from_matrix(Mat<double>(qv.row(r)), false, 1),
                           TD::from_matrix(Mat<double>(bank.row(pos[static_cast<size_t>(r)])), false, 1),
                           TD::from_matrix(negs), 0.2)
                  .item();
  }
  CHECK(batched == doctest::Approx(manual).epsilon(1e-10));
}

TEST_CASE("multi_mask_loss examples") {
  CHECK(multi_mask_loss<double>({TD::scalar(1.0), TD::scalar(3.0)}).item() == doctest::Approx(2.0));
  CHECK(multi_mask_loss<double>({TD::scalar(0.7)}).item() == doctest::Approx(0.7));
  CHECK_THROWS_AS(multi_mask_loss<double>({}), ValueError);
}

TEST_CASE("multi-mask gradient equals mean of single-mask gradients") {
  Rng rng(37);
  Mat<double> xv = testing::random_mat(rng, 4, 3);
  Mat<double> t1 = testing::random_mat(rng, 4, 3);
  Mat<double> t2 = testing::random_mat(rng, 4, 3);

  auto single = [&](const Mat<double>& target) {
    TD x = TD::from_matrix(xv, true);
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    tape.backward(mse(x, TD::from_matrix(target)));
    return x.grad_or_zero();
  };
  Mat<double> g1 = single(t1);
  Mat<double> g2 = single(t2);

  TD x = TD::from_matrix(xv, true);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    std::vector<TD> parts = {mse(x, TD::from_matrix(t1)), mse(x, TD::from_matrix(t2))};
    tape.backward(multi_mask_loss(parts));
  }
  Mat<double> gm = x.grad_or_zero();
  CHECK(((g1 + g2) * 0.5 - gm).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("attention rows sum to one and flop counter sees interaction work") {
  Rng rng(41);
  TD q = TD::from_matrix(testing::random_mat(rng, 6, 8));
  TD k = TD::from_matrix(testing::random_mat(rng, 6, 8));
  TD v = TD::from_matrix(testing::random_mat(rng, 6, 8));
  std::vector<Mat<double>> maps;
  FlopCount fc;
  {
    FlopScope fs(fc);
    attention(q, k, v, 2, 3, 3, 0.5, &maps);
  }
  CHECK(maps.size() == 4);  // 2 segments x 2 heads
  for (const auto& a : maps)
    for (Index r = 0; r < a.rows(); ++r) CHECK(a.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(fc.attention == 4ull * 2 * 2 * 3 * 3 * 4);
}

TEST_CASE("tensor invariants") {
  TD v = TD::row({1, 2, 3});
  CHECK(v.rank() == 1);
  CHECK(v.shape() == std::vector<Index>{3});
  TD s = TD::scalar(4.0);
  CHECK(s.rank() == 0);
  CHECK(s.shape().empty());
  CHECK(s.item() == 4.0);
  TD m = TD::zeros(2, 3);
  CHECK(m.shape() == std::vector<Index>{2, 3});
  CHECK(m.size() == 6);
  CHECK_THROWS_AS(m.item(), ShapeError);
  CHECK_THROWS_AS(m.grad(), ValueError);
}
