#include <gtest/gtest.h>

#include <cmath>

#include "mcad/teachers.hpp"
#include "reference.hpp"

using namespace mcad;

namespace {

/// Counts queries and returns a constant record.
class ConstantOracle final : public PairOracle {
 public:
  ConstantOracle(float score, std::size_t d) : score_(score), d_(d) {}
  PairOracleRecord query(ItemId, ItemId) const override {
    ++calls;
    return {score_, std::vector<float>(d_, 0.25f)};
  }
  std::size_t feature_dim() const override { return d_; }
  std::string backend() const override { return "constant"; }
  mutable std::size_t calls = 0;

 private:
  float score_;
  std::size_t d_;
};

DualTeacherBundle<double> orthogonal_bundle() {
  return DualTeacherBundle<double>({10, 11}, Matrix<double>::identity(2), {20, 21},
                                   Matrix<double>::identity(2), 1.0);
}

}  // namespace

TEST(DualBundle, ValidatesUnitRowsAndIds) {
  EXPECT_THROW(DualTeacherBundle<double>({1}, Matrix<double>{{0.5, 0.5}}, {1},
                                         Matrix<double>{{1, 0}}, 0.1),
               ContractError);
  EXPECT_THROW(DualTeacherBundle<double>({1}, Matrix<double>{{1, 0}}, {1},
                                         Matrix<double>{{1, 0}}, 0.0),
               ContractError);
  auto b = orthogonal_bundle();
  const std::vector<ItemId> missing = {99};
  EXPECT_THROW(b.image_rows(missing), IngestionError);
}

TEST(DualTargets, SinglePairIsOne) {
  auto b = orthogonal_bundle();
  const std::vector<ItemId> img = {10}, txt = {21};
  auto t = dual_stream_targets(b, img, txt);
  EXPECT_EQ(t.i2t, (Matrix<double>{{1.0}}));
  EXPECT_EQ(t.t2i, (Matrix<double>{{1.0}}));
}

TEST(DualTargets, OrthogonalClosedForm) {
  auto b = orthogonal_bundle();
  const std::vector<ItemId> img = {10, 11}, txt = {20, 21};
  auto t = dual_stream_targets(b, img, txt);
  EXPECT_NEAR(t.i2t(0, 0), 0.7311, 1e-4);
  EXPECT_NEAR(t.i2t(0, 1), 0.2689, 1e-4);
  EXPECT_NEAR(t.t2i(1, 1), 0.7311, 1e-4);
}

TEST(DualTargets, HalvingTemperatureSharpensWithoutReordering) {
  Rng rng(1);
  Matrix<double> a(5, 3), c(5, 3);
  for (auto* m : {&a, &c})
    for (std::size_t r = 0; r < 5; ++r) {
      double ss = 0;
      for (auto& v : m->row(r)) {
        v = rng.normal();
        ss += v * v;
      }
      for (auto& v : m->row(r)) v /= std::sqrt(ss);
    }
  const std::vector<ItemId> ids = {0, 1, 2, 3, 4};
  DualTeacherBundle<double> warm(ids, a, ids, c, 0.2), cold(ids, a, ids, c, 0.1);
  auto tw = dual_stream_targets(warm, ids, ids), tc = dual_stream_targets(cold, ids, ids);
  EXPECT_EQ(topk_indices(tw.i2t, 1), topk_indices(tc.i2t, 1));
  for (std::size_t r = 0; r < 5; ++r) {
    auto pw = tw.i2t.row(r), pc = tc.i2t.row(r);
    EXPECT_GT(*std::max_element(pc.begin(), pc.end()), *std::max_element(pw.begin(), pw.end()));
  }
}

TEST(TableOracle, CoverageErrorNamesThePair) {
  TablePairOracle t(2);
  t.insert(1, 2, {0.5f, {0.1f, 0.2f}});
  EXPECT_EQ(t.query(1, 2).score, 0.5f);
  try {
    t.query(2, 1);
    FAIL();
  } catch (const CoverageError& e) {
    EXPECT_NE(std::string(e.what()).find("image 2, text 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(t.insert(1, 2, {0.5f, {0, 0}}), ContractError);
  EXPECT_THROW(t.insert(3, 3, {1.5f, {0, 0}}), ContractError);
  EXPECT_THROW(t.insert(3, 3, {0.5f, {0}}), ContractError);
}

TEST(SyntheticOracle, ScoreFollowsLogisticOfLatentCosine) {
  SyntheticOracleParams p;
  p.noise = 0.0;
  p.d_ss = 4;
  p.hidden = 5;
  std::unordered_map<ItemId, std::vector<double>> zi{{0, {1, 0}}, {1, {0.6, 0.8}}},
      zt{{0, {1, 0}}, {1, {0, 1}}};
  SyntheticPairOracle o(p, zi, zt);
  const auto logistic = [&](double c) { return 1.0 / (1.0 + std::exp(-p.slope * (c - p.threshold))); };
  EXPECT_FLOAT_EQ(o.query(0, 0).score, float(logistic(1.0)));
  EXPECT_FLOAT_EQ(o.query(1, 1).score, float(logistic(0.8)));
  EXPECT_FLOAT_EQ(o.query(0, 1).score, float(logistic(0.0)));
  EXPECT_EQ(o.query(0, 1).h_ss.size(), 4u);
  EXPECT_EQ(o.query(1, 0), o.query(1, 0));
  EXPECT_THROW(o.query(7, 0), IngestionError);
}

TEST(SingleStreamTargets, DefinedSetEqualsTopKAndPairsQueriedOnce) {
  Rng rng(2);
  Matrix<double> d(4, 4);
  for (auto& v : d.data) v = rng.uniform();
  auto p_i2t = topk_indices(d, 2);
  auto p_t2i = topk_indices(d.transposed(), 2);
  ConstantOracle o(0.5f, 3);
  const std::vector<ItemId> ids = {5, 6, 7, 8};
  auto t = single_stream_targets<double>(o, p_i2t, p_t2i, ids, ids);
  EXPECT_EQ(t.i2t.defined(), p_i2t);
  EXPECT_EQ(t.t2i.defined(), p_t2i);
  // i2t cell (l,m) and t2i cell (m,l) name the same pair
  std::set<std::pair<std::uint32_t, std::uint32_t>> unique;
  for (std::uint32_t l = 0; l < 4; ++l)
    for (auto m : p_i2t.row(l)) unique.insert({l, m});
  for (std::uint32_t m = 0; m < 4; ++m)
    for (auto l : p_t2i.row(m)) unique.insert({l, m});
  EXPECT_EQ(o.calls, unique.size());
  EXPECT_EQ(t.queries, unique.size());
  EXPECT_EQ(t.cache.size(), unique.size());
  for (double v : t.i2t.values()) EXPECT_EQ(v, 0.5);
  auto sigma = l1_normalize_rows(gather_topk(t.i2t, p_i2t));
  for (double v : sigma.data) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(SingleStreamTargets, DeterministicAndBackendsInterchangeable) {
  SyntheticOracleParams p;
  p.d_ss = 3;
  p.hidden = 4;
  p.seed = 9;
  std::unordered_map<ItemId, std::vector<double>> z;
  Rng rng(3);
  for (ItemId i = 0; i < 6; ++i) z[i] = {rng.normal(), rng.normal(), rng.normal()};
  SyntheticPairOracle syn(p, z, z);
  TablePairOracle table(3);
  for (ItemId i = 0; i < 6; ++i)
    for (ItemId j = 0; j < 6; ++j) table.insert(i, j, syn.query(i, j));
  Matrix<double> d(6, 6);
  for (auto& v : d.data) v = rng.uniform();
  auto pi = topk_indices(d, 3), pt = topk_indices(d.transposed(), 3);
  const std::vector<ItemId> ids = {0, 1, 2, 3, 4, 5};
  auto a = single_stream_targets<double>(syn, pi, pt, ids, ids);
  auto b = single_stream_targets<double>(syn, pi, pt, ids, ids);
  auto c = single_stream_targets<double>(table, pi, pt, ids, ids);
  EXPECT_EQ(a.i2t, b.i2t);
  EXPECT_EQ(a.i2t, c.i2t);
  EXPECT_EQ(a.t2i, c.t2i);
  EXPECT_EQ(a.cache, c.cache);
}

TEST(SingleStreamTargets, WellSeparatedDiagonalScoresNearOne) {
  SyntheticOracleParams p;
  p.noise = 0.05;
  p.d_ss = 2;
  p.hidden = 2;
  std::unordered_map<ItemId, std::vector<double>> z;
  for (ItemId i = 0; i < 4; ++i) {
    std::vector<double> v(4, 0.0);
    v[i] = 1.0;
    z[i] = v;
  }
  SyntheticPairOracle o(p, z, z);
  auto eye = Matrix<double>::identity(4);
  auto pi = topk_indices(eye, 1);
  const std::vector<ItemId> ids = {0, 1, 2, 3};
  auto t = single_stream_targets<double>(o, pi, pi, ids, ids);
  EXPECT_EQ(pi.indices, (std::vector<std::uint32_t>{0, 1, 2, 3}));
  for (double v : t.i2t.values()) EXPECT_GT(v, 0.97);
}
