#include <gtest/gtest.h>

#include <cmath>

#include "mcad/integration.hpp"
#include "reference.hpp"

using namespace mcad;

namespace {

struct Fixture {
  IntegrationConfig cfg;
  Integration integ;
  ParamStore<double> store;
  Matrix<double> image_ds, text_ds, student_i, student_t;
  TopKIndexSet p_i2t, p_t2i;
  PairCache cache;
};

Matrix<double> unit_rows(Rng& rng, std::size_t n, std::size_t d) {
  Matrix<double> m(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    double ss = 0;
    for (auto& v : m.row(r)) {
      v = rng.normal();
      ss += v * v;
    }
    for (auto& v : m.row(r)) v /= std::sqrt(ss);
  }
  return m;
}

Fixture make_fixture(std::uint64_t seed, std::size_t n, std::size_t k, double alpha = 0.7) {
  Rng rng(seed);
  Fixture f;
  f.cfg.d_ss = 3;
  f.cfg.d_ds = 5;
  f.cfg.dim = 4;
  f.cfg.hidden = 6;
  f.cfg.alpha_init = alpha;
  f.cfg.tau_init = 0.3;
  f.integ = Integration(f.cfg);
  f.integ.register_params(f.store, rng);
  f.image_ds = unit_rows(rng, n, f.cfg.d_ds);
  f.text_ds = unit_rows(rng, n, f.cfg.d_ds);
  f.student_i = unit_rows(rng, n, f.cfg.dim);
  f.student_t = unit_rows(rng, n, f.cfg.dim);
  Matrix<double> d(n, n);
  for (auto& v : d.data) v = rng.uniform();
  f.p_i2t = topk_indices(d, k);
  f.p_t2i = topk_indices(d.transposed(), k);
  for (std::uint32_t l = 0; l < n; ++l)
    for (std::uint32_t m = 0; m < n; ++m) {
      PairOracleRecord rec{float(rng.uniform()), {}};
      for (std::size_t c = 0; c < f.cfg.d_ss; ++c) rec.h_ss.push_back(float(rng.normal()));
      f.cache[{l, m}] = rec;
    }
  return f;
}

bool is_gated(const Fixture& f, std::uint32_t l, std::uint32_t m) {
  for (auto c : f.p_i2t.row(l))
    if (c == m) return true;
  for (auto c : f.p_t2i.row(m))
    if (c == l) return true;
  return false;
}

ref::Vec row(const Matrix<double>& m, std::size_t r) {
  auto s = m.row(r);
  return ref::Vec(s.begin(), s.end());
}

ref::Vec axpy(ref::Vec a, const ref::Vec& b, double s) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += s * b[i];
  return a;
}

/// Scalar fused features (T_T, I_T) for cell (l, m).
std::pair<ref::Vec, ref::Vec> ref_fused(const Fixture& f, std::uint32_t l, std::uint32_t m) {
  const double alpha = f.store.at(Integration::kAlpha).value.data[0];
  auto t = ref::mlp(f.store, Integration::kG3, f.cfg.dual_shape(), row(f.text_ds, m));
  auto i = ref::mlp(f.store, Integration::kG4, f.cfg.dual_shape(), row(f.image_ds, l));
  if (is_gated(f, l, m)) {
    const auto& hf = f.cache.at({l, m}).h_ss;
    ref::Vec h(hf.begin(), hf.end());
    t = axpy(t, ref::mlp(f.store, Integration::kG1, f.cfg.single_shape(), h), alpha);
    i = axpy(i, ref::mlp(f.store, Integration::kG2, f.cfg.single_shape(), h), alpha);
  }
  return {ref::l2n(t), ref::l2n(i)};
}

ref::Mat ref_softmax_rows(const ref::Mat& logits, double tau) {
  ref::Mat out;
  for (const auto& r : logits) {
    ref::Vec s;
    for (double v : r) s.push_back(v / tau);
    out.push_back(ref::softmax(s));
  }
  return out;
}

void expect_close(const Matrix<double>& got, const ref::Mat& want, double tol) {
  ASSERT_EQ(got.rows, want.size());
  for (std::size_t r = 0; r < got.rows; ++r)
    for (std::size_t c = 0; c < got.cols; ++c) EXPECT_NEAR(got(r, c), want[r][c], tol) << r << "," << c;
}

}  // namespace

TEST(GatedPairs, UnionOfBothTopKSets) {
  auto f = make_fixture(1, 4, 2);
  auto gp = gated_pairs<double>(f.p_i2t, f.p_t2i, f.cache, f.cfg.d_ss);
  std::size_t expect = 0;
  for (std::uint32_t l = 0; l < 4; ++l)
    for (std::uint32_t m = 0; m < 4; ++m) expect += is_gated(f, l, m);
  EXPECT_EQ(gp.size(), expect);
  EXPECT_TRUE(std::is_sorted(gp.cells.begin(), gp.cells.end()));
  for (std::size_t i = 0; i < gp.size(); ++i) {
    EXPECT_TRUE(is_gated(f, gp.cells[i].row, gp.cells[i].col));
    EXPECT_EQ(gp.features(i, 0), double(f.cache.at(gp.cells[i]).h_ss[0]));
  }
}

TEST(GatedPairs, MissingCacheEntryIsContractError) {
  auto f = make_fixture(2, 4, 2);
  f.cache.erase({0, f.p_i2t.row(0)[0]});
  EXPECT_THROW(gated_pairs<double>(f.p_i2t, f.p_t2i, f.cache, f.cfg.d_ss), ContractError);
  auto g = make_fixture(2, 4, 2);
  EXPECT_THROW(gated_pairs<double>(g.p_i2t, g.p_t2i, g.cache, 7), ContractError);
}

TEST(Integration, AbsentPairFeatureProjectsToZero) {
  auto f = make_fixture(3, 2, 1);
  Graph<double> g;
  auto z = f.integ.gated_project(g, f.store, std::optional<Tensor<double>>{}, Side::text);
  EXPECT_EQ(z.value(), Matrix<double>(1, f.cfg.dim));
  EXPECT_THROW(f.integ.gated_project(g, f.store, std::optional(g.constant(Matrix<double>(1, 2))),
                                     Side::image),
               ContractError);
}

TEST(Integration, FusedFeaturesAreUnitNorm) {
  auto f = make_fixture(4, 5, 2);
  auto gp = gated_pairs<double>(f.p_i2t, f.p_t2i, f.cache, f.cfg.d_ss);
  Graph<double> g;
  auto fused = f.integ.fuse(g, f.store, f.image_ds, f.text_ds, gp);
  for (const auto* t : {&fused.images, &fused.texts, &fused.gated_images, &fused.gated_texts})
    for (std::size_t r = 0; r < t->rows(); ++r) {
      auto v = row(t->value(), r);
      EXPECT_NEAR(ref::dot(v, v), 1.0, 1e-12);
    }
  EXPECT_EQ(fused.gated_images.rows(), gp.size());
}

TEST(Integration, IntegratedDistributionsMatchScalarOracle) {
  auto f = make_fixture(5, 4, 2);
  auto gp = gated_pairs<double>(f.p_i2t, f.p_t2i, f.cache, f.cfg.d_ss);
  Graph<double> g;
  auto fused = f.integ.fuse(g, f.store, f.image_ds, f.text_ds, gp);
  auto d = integrated_teacher_distributions(fused, f.integ.tau(g, f.store));
  ref::Mat logits(4, ref::Vec(4));
  for (std::uint32_t l = 0; l < 4; ++l)
    for (std::uint32_t m = 0; m < 4; ++m) {
      auto [t, i] = ref_fused(f, l, m);
      logits[l][m] = ref::dot(i, t);
    }
  expect_close(d.i2t.value(), ref_softmax_rows(logits, 0.3), 1e-12);
  expect_close(d.t2i.value(), ref_softmax_rows(ref::transpose(logits), 0.3), 1e-12);
}

TEST(Integration, CrossDistributionsMatchScalarOracle) {
  auto f = make_fixture(6, 4, 2);
  auto gp = gated_pairs<double>(f.p_i2t, f.p_t2i, f.cache, f.cfg.d_ss);
  Graph<double> g;
  auto fused = f.integ.fuse(g, f.store, f.image_ds, f.text_ds, gp);
  auto tau_s = g.scalar(0.1);
  auto cross = cross_feature_distributions(g.constant(f.student_i), g.constant(f.student_t), fused,
                                           tau_s, f.integ.tau(g, f.store));
  ref::Mat fai(4, ref::Vec(4)), fat(4, ref::Vec(4));
  for (std::uint32_t l = 0; l < 4; ++l)
    for (std::uint32_t m = 0; m < 4; ++m) {
      auto [t, i] = ref_fused(f, l, m);
      fai[l][m] = ref::dot(row(f.student_i, l), t);
      fat[l][m] = ref::dot(i, row(f.student_t, m));
    }
  const double tau = (0.3 + 0.1) / 2;
  expect_close(cross.fai.i2t.value(), ref_softmax_rows(fai, tau), 1e-12);
  expect_close(cross.fai.t2i.value(), ref_softmax_rows(ref::transpose(fai), tau), 1e-12);
  expect_close(cross.fat.i2t.value(), ref_softmax_rows(fat, tau), 1e-12);
  expect_close(cross.fat.t2i.value(), ref_softmax_rows(ref::transpose(fat), tau), 1e-12);
  EXPECT_THROW(cross_feature_distributions(g.constant(Matrix<double>(4, 3)),
                                           g.constant(f.student_t), fused, tau_s,
                                           f.integ.tau(g, f.store)),
               ContractError);
}

TEST(Integration, ZeroAlphaReducesToProjectedDualSimilarity) {
  // with alpha 0 every cell, gated or not, reads the per-item projections
  IntegrationConfig cfg;
  cfg.d_ss = 2;
  cfg.d_ds = 3;
  cfg.dim = 3;
  cfg.alpha_init = 0.0;
  cfg.tau_init = 0.5;
  Integration integ(cfg);
  ParamStore<double> store;
  Rng rng(7);
  integ.register_params(store, rng);
  auto ids = Matrix<double>::identity(3);
  PairCache cache;
  for (std::uint32_t l = 0; l < 3; ++l)
    for (std::uint32_t m = 0; m < 3; ++m) cache[{l, m}] = {0.5f, {1.0f, -1.0f}};
  auto p = topk_indices(ids, 1);
  auto gp = gated_pairs<double>(p, p, cache, 2);
  Graph<double> g;
  auto fused = integ.fuse(g, store, ids, ids, gp);
  auto d = integrated_teacher_distributions(fused, integ.tau(g, store));
  ref::Mat t, i;
  for (std::size_t r = 0; r < 3; ++r) {
    t.push_back(ref::l2n(ref::mlp(store, Integration::kG3, cfg.dual_shape(), row(ids, r))));
    i.push_back(ref::l2n(ref::mlp(store, Integration::kG4, cfg.dual_shape(), row(ids, r))));
  }
  expect_close(d.i2t.value(), ref::sim_dist(i, t, 0.5), 1e-12);
  expect_close(d.t2i.value(), ref::sim_dist(t, i, 0.5), 1e-12);
}

TEST(Integration, ZeroAlphaMakesOutputIndependentOfPairFeatures) {
  auto a = make_fixture(8, 5, 2, 0.0);
  auto b = make_fixture(8, 5, 2, 0.0);
  for (auto& [cell, rec] : b.cache)
    for (auto& v : rec.h_ss) v = -3.0f * v + 1.0f;
  auto ga = gated_pairs<double>(a.p_i2t, a.p_t2i, a.cache, 3);
  auto gb = gated_pairs<double>(b.p_i2t, b.p_t2i, b.cache, 3);
  Graph<double> g;
  auto da = integrated_teacher_distributions(a.integ.fuse(g, a.store, a.image_ds, a.text_ds, ga),
                                             a.integ.tau(g, a.store));
  auto db = integrated_teacher_distributions(b.integ.fuse(g, b.store, b.image_ds, b.text_ds, gb),
                                             b.integ.tau(g, b.store));
  EXPECT_EQ(da.i2t.value(), db.i2t.value());
  EXPECT_EQ(da.t2i.value(), db.t2i.value());
}

TEST(Integration, UngatedCellsCarryNoGradientIntoSingleStreamProjections) {
  auto f = make_fixture(9, 5, 1);
  auto gp = gated_pairs<double>(f.p_i2t, f.p_t2i, f.cache, f.cfg.d_ss);
  Graph<double> g;
  auto fused = f.integ.fuse(g, f.store, f.image_ds, f.text_ds, gp);
  auto logits = detail::pair_logits(fused.images, fused.texts, std::optional(fused.gated_images),
                                    std::optional(fused.gated_texts), gp);
  Matrix<double> w(5, 5);
  for (std::uint32_t l = 0; l < 5; ++l)
    for (std::uint32_t m = 0; m < 5; ++m) w(l, m) = is_gated(f, l, m) ? 0.0 : 1.0 + l + 2.0 * m;
  g.backward(sum(mul(logits, g.constant(w))));
  for (const char* prefix : {Integration::kG1, Integration::kG2})
    for (const char* leaf : {".0.W", ".0.b", ".1.W", ".1.b"})
      for (double v : f.store.at(std::string(prefix) + leaf).grad.data) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(f.store.at(Integration::kAlpha).grad.data[0], 0.0);
  double g3 = 0;
  for (double v : f.store.at(std::string(Integration::kG3) + ".0.W").grad.data) g3 += std::abs(v);
  EXPECT_GT(g3, 0.0);
}
