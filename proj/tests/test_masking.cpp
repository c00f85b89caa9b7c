#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "xma/gradcheck.hpp"
#include "xma/masking.hpp"

#include <cmath>
#include <set>

using namespace xma;

TEST_CASE("keep_count arithmetic") {
  CHECK(keep_count(196, 0.8) == 39);
  CHECK(keep_count(64, 0.0) == 64);
  CHECK(keep_count(64, 0.9) == 6);
  CHECK_THROWS_AS(keep_count(64, 1.0), ValueError);
  CHECK_THROWS_AS(keep_count(64, -0.1), ValueError);

  // monotone non-increasing in the ratio
  Index prev = keep_count(64, 0.0);
  for (double r = 0.05; r < 1.0; r += 0.05) {
    const Index k = keep_count(64, r);
    CHECK(k <= prev);
    prev = k;
  }
}

TEST_CASE("sample_mask basics") {
  Rng rng(5);
  IndexList kept = sample_mask(196, 0.8, rng);
  CHECK(kept.size() == 39);
  std::set<Index> unique(kept.begin(), kept.end());
  CHECK(unique.size() == kept.size());
  for (size_t i = 1; i < kept.size(); ++i) CHECK(kept[i] > kept[i - 1]);
  for (Index i : kept) {
    CHECK(i >= 0);
    CHECK(i < 196);
  }

  // ratio 0 keeps everything in order
  Rng rng2(5);
  IndexList all = sample_mask(64, 0.0, rng2);
  REQUIRE(all.size() == 64);
  for (Index i = 0; i < 64; ++i) CHECK(all[size_t(i)] == i);

  Rng rng3(5);
  CHECK_THROWS_AS(sample_mask(10, 0.95, rng3), ValueError);
}

TEST_CASE("per-index keep frequency is uniform (Monte Carlo)") {
  const Index length = 64;
  const double rho = 0.9;
  const int draws = 100000;
  const Index keep = keep_count(length, rho);
  REQUIRE(keep == 6);

  std::vector<long> counts(64, 0);
  Rng root(2024);
  for (int d = 0; d < draws; ++d) {
    Rng rng = root.derive(static_cast<uint64_t>(d));
    for (Index i : sample_mask(length, rho, rng)) counts[size_t(i)]++;
  }

  const double p = static_cast<double>(keep) / static_cast<double>(length);
  const double sigma = std::sqrt(p * (1.0 - p) / draws);
  double chi2 = 0.0;
  const double expected = p * draws;
  for (long c : counts) {
    const double freq = static_cast<double>(c) / draws;
    CHECK(std::abs(freq - p) <= 3.0 * sigma);
    chi2 += (c - expected) * (c - expected) / expected;
  }
  // chi-square critical value, 63 dof at p = 0.01
  CHECK(chi2 < 92.01);
}

TEST_CASE("sample_multi_masks independent mode") {
  MaskSpec spec;
  spec.ratio = 0.9;
  spec.num_masks = 2;
  Rng rng(7);

  MaskSet single = sample_multi_masks(64, MaskSpec{0.9, 1, MaskMode::kIndependent}, rng);
  CHECK(single.size() == 1);

  MaskSet set = sample_multi_masks(64, spec, rng);
  REQUIRE(set.size() == 2);
  CHECK(set[0].size() == 6);
  CHECK(set[1].size() == 6);
  CHECK(set[0] != set[1]);  // overwhelmingly likely under this seed

  // reproducible from the same stream, independent of consumption order
  Rng rng2(7);
  rng2.next_u64();
  MaskSet again = sample_multi_masks(64, spec, Rng(7));
  CHECK(again == set);
}

TEST_CASE("expected pairwise overlap for two independent masks") {
  // E|A & B| = keep^2 / L; variance from indicator covariances.
  const Index length = 64;
  const Index keep = 6;
  const int trials = 100000;
  const double p = std::pow(static_cast<double>(keep) / length, 2);
  const double q = (keep * (keep - 1.0)) / (length * (length - 1.0));
  const double var = length * p * (1 - p) + length * (length - 1.0) * (q * q - p * p);
  const double sigma_mean = std::sqrt(var / trials);

  Rng root(99);
  double total = 0.0;
  MaskSpec spec{0.9, 2, MaskMode::kIndependent};
  std::vector<char> in_first(64);
  for (int t = 0; t < trials; ++t) {
    MaskSet set = sample_multi_masks(length, spec, root.derive(static_cast<uint64_t>(t)));
    std::fill(in_first.begin(), in_first.end(), 0);
    for (Index i : set[0]) in_first[size_t(i)] = 1;
    for (Index i : set[1]) total += in_first[size_t(i)];
  }
  const double mean = total / trials;
  const double expected = static_cast<double>(keep) * keep / length;  // 0.5625
  CHECK(std::abs(mean - expected) <= 3.0 * sigma_mean);
}

TEST_CASE("partition mode yields disjoint masks covering distinct tokens") {
  MaskSpec spec{0.75, 4, MaskMode::kPartition};
  MaskSet set = sample_multi_masks(64, spec, Rng(3));
  REQUIRE(set.size() == 4);
  std::set<Index> all;
  for (const auto& m : set) {
    CHECK(m.size() == 16);
    for (Index i : m) all.insert(i);
  }
  CHECK(all.size() == 64);  // exact partition at 4 x 16

  CHECK_THROWS_AS(sample_multi_masks(64, MaskSpec{0.75, 5, MaskMode::kPartition}, Rng(3)),
                  ValueError);
}

TEST_CASE("apply_mask semantics and gradient") {
  Rng rng(13);
  Mat<double> xv(3, 4);
  for (Index i = 0; i < xv.size(); ++i) xv.data()[i] = rng.normal();

  Tensor<double> x = Tensor<double>::from_matrix(xv);
  IndexList full = {0, 1, 2};
  CHECK(apply_mask(x, full).value() == xv);
  IndexList first = {0};
  CHECK(apply_mask(x, first).value() == xv.row(0));

  // dropped rows receive exactly zero gradient
  Tensor<double> leaf = Tensor<double>::from_matrix(xv, true);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    tape.backward(sum_all(mul(apply_mask(leaf, {2}), apply_mask(leaf, {2}))));
  }
  Mat<double> g = leaf.grad();
  CHECK(g.row(0).isZero(0));
  CHECK(g.row(1).isZero(0));
  CHECK_FALSE(g.row(2).isZero(0));

  // finite-difference agreement through the mask
  auto f = [](const std::vector<Tensor<double>>& p) {
    Tensor<double> m = apply_mask(p[0], {1, 2});
    return sum_all(mul(m, m));
  };
  CHECK(finite_diff_check<double>(f, {x}, 1e-5) < 1e-8);
}
