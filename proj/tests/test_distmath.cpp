#include <gtest/gtest.h>

#include <cmath>

#include "mcad/distmath.hpp"
#include "reference.hpp"

using namespace mcad;

namespace {

Matrix<double> random_dist(Rng& rng, std::size_t n, std::size_t m) {
  Matrix<double> x(n, m);
  for (auto& v : x.data) v = rng.uniform(-2, 2);
  return softmax_rows(x);
}

}  // namespace

TEST(SimilarityDistribution, ClosedFormExamples) {
  const auto eye = Matrix<double>::identity(2);
  auto d1 = similarity_distribution(eye, eye, 1.0);
  EXPECT_NEAR(d1(0, 0), 0.7311, 1e-4);
  EXPECT_NEAR(d1(0, 1), 0.2689, 1e-4);
  EXPECT_NEAR(d1(1, 1), 0.7311, 1e-4);
  auto half = similarity_distribution(eye, eye, 0.5);
  EXPECT_NEAR(half(0, 0), 0.8808, 1e-4);
  EXPECT_NEAR(half(1, 0), 0.1192, 1e-4);
  auto hot = similarity_distribution(eye, eye, 1e6);
  EXPECT_NEAR(hot(0, 0), 0.5, 1e-6);
}

TEST(SimilarityDistribution, Errors) {
  const auto eye = Matrix<double>::identity(2);
  EXPECT_THROW(similarity_distribution(eye, eye, 0.0), ContractError);
  EXPECT_THROW(similarity_distribution(eye, eye, -1.0), ContractError);
  EXPECT_THROW(similarity_distribution(eye, Matrix<double>(2, 3), 1.0), ContractError);
}

TEST(SimilarityDistribution, RowsSumToOneAndArgmaxIgnoresTemperature) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix<double> a(6, 4), b(7, 4);
    for (auto& v : a.data) v = rng.normal();
    for (auto& v : b.data) v = rng.normal();
    auto p = similarity_distribution(a, b, 0.3);
    auto q = similarity_distribution(a, b, 2.0);
    require_distribution(p, 1e-12, "p");
    for (std::size_t r = 0; r < 6; ++r) {
      auto pr = p.row(r), qr = q.row(r);
      EXPECT_EQ(std::max_element(pr.begin(), pr.end()) - pr.begin(),
                std::max_element(qr.begin(), qr.end()) - qr.begin());
    }
  }
}

TEST(SimilarityDistribution, ShiftInvariantPerRow) {
  Matrix<double> x{{0.1, 0.7, -0.3}}, y{{5.1, 5.7, 4.7}};
  auto a = softmax_rows(x), b = softmax_rows(y);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-14);
}

TEST(KlRows, HandExamples) {
  EXPECT_NEAR(kl_rows(Matrix<double>{{1, 0}}, Matrix<double>{{0.5, 0.5}}), std::log(2.0), 1e-9);
  const double expect = 0.5 * std::log(0.5 / 0.7311) + 0.5 * std::log(0.5 / 0.2689);
  EXPECT_NEAR(kl_rows(Matrix<double>{{0.5, 0.5}}, Matrix<double>{{0.7311, 0.2689}}), expect, 1e-12);
  EXPECT_NEAR(expect, 0.1201, 1e-4);
  EXPECT_THROW(kl_rows(Matrix<double>(1, 2), Matrix<double>(2, 2)), ContractError);
}

TEST(KlRows, NonNegativeZeroOnlyAtTargetAndMatchesReference) {
  Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    auto p = random_dist(rng, 4, 5), q = random_dist(rng, 4, 5);
    const double v = kl_rows(p, q);
    EXPECT_GE(v, 0.0);
    EXPECT_NEAR(v, ref::kl(ref::from(p), ref::from(q)), 1e-12);
    EXPECT_EQ(kl_rows(p, p), 0.0);
  }
}

TEST(KlRows, FloorKeepsStructuralZerosFinite) {
  // target zero where the distribution has mass: log floor 1e-8 bounds the value
  const double v = kl_rows(Matrix<double>{{0.5, 0.5}}, Matrix<double>{{1.0, 0.0}});
  EXPECT_NEAR(v, 0.5 * std::log(0.5) + 0.5 * (std::log(0.5) - std::log(1e-8)), 1e-12);
}

TEST(TopK, TieGoesToLowestColumn) {
  auto p = topk_indices(Matrix<double>{{0.1, 0.5, 0.2, 0.2}}, 2);
  EXPECT_EQ(p.indices, (std::vector<std::uint32_t>{1, 2}));
}

TEST(TopK, FullSelectionAndBounds) {
  Matrix<double> d{{0.3, 0.1, 0.6}};
  auto p = topk_indices(d, 3);
  EXPECT_EQ(p.indices, (std::vector<std::uint32_t>{2, 0, 1}));
  EXPECT_THROW(topk_indices(d, 4), ContractError);
  EXPECT_THROW(topk_indices(d, 0), ContractError);
}

TEST(TopK, MatchesExhaustiveSortOnRandomMatrices) {
  Rng rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + rng.below(32), m = 1 + rng.below(32), k = 1 + rng.below(m);
    Matrix<double> d(n, m);
    // coarse values force ties
    for (auto& v : d.data) v = double(rng.below(6)) / 5.0;
    auto p = topk_indices(d, k);
    auto expect = ref::topk(ref::from(d), k);
    for (std::size_t r = 0; r < n; ++r) {
      auto row = p.row(r);
      EXPECT_EQ(std::vector<std::uint32_t>(row.begin(), row.end()), expect[r]);
    }
  }
}

TEST(TopK, WellSeparatedBatchSelectsDiagonal) {
  Matrix<double> eye = Matrix<double>::identity(5);
  auto d = similarity_distribution(eye, eye, 0.1);
  auto p = topk_indices(d, 1);
  EXPECT_EQ(p.indices, (std::vector<std::uint32_t>{0, 1, 2, 3, 4}));
}

TEST(GatherTopK, DenseAndSparse) {
  Graph<double> g;
  auto d = g.constant({{0.2, 0.5, 0.3}});
  TopKIndexSet p{1, 3, 2, {1, 2}};
  EXPECT_EQ(gather_topk(d, p).value(), (Matrix<double>{{0.5, 0.3}}));
  auto eye = g.constant(Matrix<double>::identity(3));
  TopKIndexSet diag{3, 3, 1, {0, 1, 2}};
  EXPECT_EQ(gather_topk(eye, diag).value(), (Matrix<double>{{1}, {1}, {1}}));

  SparseScoreMatrix<double> s(p, {0.9, 0.4});
  EXPECT_EQ(gather_topk(s, p), (Matrix<double>{{0.9, 0.4}}));
  EXPECT_EQ(s.at(0, 2), 0.4);
  EXPECT_THROW(s.at(0, 0), ContractError);
  TopKIndexSet other{1, 3, 1, {0}};
  EXPECT_THROW(gather_topk(s, other), ContractError);
  EXPECT_THROW(SparseScoreMatrix<double>(p, {0.2, 1.5}), ContractError);
}

TEST(L1Normalize, KeepsFourTwoOneRatio) {
  auto out = l1_normalize_rows(Matrix<double>{{0.8, 0.4, 0.2}});
  EXPECT_NEAR(out(0, 0), 0.571, 1e-3);
  EXPECT_NEAR(out(0, 1), 0.286, 1e-3);
  EXPECT_NEAR(out(0, 2), 0.143, 1e-3);
  EXPECT_DOUBLE_EQ(out(0, 0) / out(0, 1), 2.0);
  auto sm = softmax_rows(Matrix<double>{{0.8, 0.4, 0.2}});
  EXPECT_NEAR(sm(0, 0), 0.451, 1e-3);
  EXPECT_NEAR(sm(0, 1), 0.302, 1e-3);
  EXPECT_NEAR(sm(0, 2), 0.247, 1e-3);
}

TEST(L1Normalize, SimpleCasesAndErrors) {
  EXPECT_EQ(l1_normalize_rows(Matrix<double>{{0, 1, 0}}), (Matrix<double>{{0, 1, 0}}));
  EXPECT_EQ(l1_normalize_rows(Matrix<double>{{0.25, 0.25}}), (Matrix<double>{{0.5, 0.5}}));
  EXPECT_THROW(l1_normalize_rows(Matrix<double>{{0, 0}}), ContractError);
  EXPECT_THROW(l1_normalize_rows(Matrix<double>{{0.5, -0.1}}), ContractError);
}

TEST(L1Normalize, PreservesRatiosAndOrder) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix<double> m(3, 6);
    for (auto& v : m.data) v = rng.uniform(0.01, 1.0);
    auto out = l1_normalize_rows(m);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t a = 0; a < 6; ++a)
        for (std::size_t b = 0; b < 6; ++b) {
          EXPECT_NEAR(out(r, a) / out(r, b), m(r, a) / m(r, b), 1e-12);
          EXPECT_EQ(out(r, a) < out(r, b), m(r, a) < m(r, b));
        }
  }
}

TEST(Validators, UnitRowsAndDistributions) {
  EXPECT_NO_THROW(require_unit_rows(Matrix<double>{{0.6, 0.8}}, 1e-6, "x"));
  EXPECT_THROW(require_unit_rows(Matrix<double>{{0.6, 0.9}}, 1e-6, "x"), ContractError);
  EXPECT_THROW(require_distribution(Matrix<double>{{0.6, 0.6}}, 1e-6, "x"), ContractError);
}
