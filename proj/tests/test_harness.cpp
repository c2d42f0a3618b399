#include <gtest/gtest.h>

#include <cmath>

#include "mcad/dataio/config.hpp"
#include "mcad/dataio/synthetic.hpp"
#include "reference.hpp"

using namespace mcad;
using namespace mcad::dataio;

namespace {

WorldSpec small_spec() {
  WorldSpec s;
  s.n_train = 160;
  s.n_val = 40;
  s.n_test = 40;
  s.latent_dim = 8;
  s.n_clusters = 12;
  s.image_raw_dim = 24;
  s.text_raw_dim = 24;
  s.teacher_dim = 12;
  s.teacher_noise = 0.5;
  s.probe_items = 60;
  s.probe_k = 5;
  s.oracle.d_ss = 6;
  s.oracle.hidden = 8;
  return s;
}

struct Small {
  World<double> world;
  Model model;
  TrainConfig cfg;
};

Small small_setup(LossConfig loss = {Tdd::mt, Tfd::mt_fa, 4}) {
  static const GeneratedWorld gw = generate_synthetic_world(small_spec());
  RunConfig rc;
  rc.student.hidden = 32;
  rc.student.dim = 16;
  rc.integration.hidden = 16;
  Small s;
  s.world = materialize<double>(gw);
  s.model = make_model(rc, s.world);
  s.cfg.batch_size = 32;
  s.cfg.epochs = 2;
  s.cfg.lr = 3e-3;
  s.cfg.loss = loss;
  return s;
}

bool same_values(const ParamStore<double>& a, const ParamStore<double>& b) {
  if (a.size() != b.size()) return false;
  auto ib = b.begin();
  for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib)
    if (ia->name != ib->name || ia->value != ib->value) return false;
  return true;
}

SplitData<double> index_split(std::size_t n, std::size_t captions) {
  SplitData<double> s;
  s.image_raw = Matrix<double>(n, 1);
  s.text_raw = Matrix<double>(n * captions, 1);
  for (std::size_t i = 0; i < n; ++i) {
    s.image_ids.push_back(i);
    s.image_groups.push_back(i);
    for (std::size_t c = 0; c < captions; ++c) {
      s.text_ids.push_back(i * captions + c);
      s.text_groups.push_back(i);
    }
  }
  s.index();
  return s;
}

}  // namespace

TEST(Schedule, WarmupThenCosine) {
  TrainConfig c;
  c.lr = 1.0;
  c.warmup_fraction = 0.1;
  EXPECT_EQ(lr_at(0, 100, c), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(5, 100, c), 0.5);
  EXPECT_DOUBLE_EQ(lr_at(10, 100, c), 1.0);
  EXPECT_NEAR(lr_at(55, 100, c), 0.5, 1e-12);
  EXPECT_NEAR(lr_at(99, 100, c), 0.5 * (1 + std::cos(std::acos(-1.0) * 89.0 / 90.0)), 1e-15);
  EXPECT_THROW(lr_at(100, 100, c), ContractError);
  c.warmup_fraction = 0.0;
  EXPECT_EQ(lr_at(0, 10, c), 1.0);
}

TEST(Schedule, NeverNegativeAndPeaksAtWarmupEnd) {
  TrainConfig c;
  c.lr = 2e-3;
  double peak = 0;
  std::size_t at = 0;
  for (std::size_t s = 0; s < 400; ++s) {
    const double v = lr_at(s, 400, c);
    EXPECT_GE(v, 0.0);
    if (v > peak) peak = v, at = s;
  }
  EXPECT_EQ(at, 20u);
  EXPECT_DOUBLE_EQ(peak, 2e-3);
}

TEST(AdamW, ConstantGradientClosedForm) {
  // with a constant gradient the bias-corrected moments equal g and g^2, so
  // each step is w <- w (1 - lr wd) - lr g / (|g| + eps)
  TrainConfig c;
  c.weight_decay = 0.01;
  ParamStore<double> store;
  store.add("w", Matrix<double>{{1.0, -2.0, 0.5}});
  store.add("nodecay", Matrix<double>{{1.0}}, false);
  store.add("frozen", Matrix<double>{{3.0}}).trainable = false;
  const std::vector<double> g = {0.5, -0.2, 1e-3};
  AdamW<double> opt(c);
  std::vector<double> w = {1.0, -2.0, 0.5};
  double nd = 1.0;
  const double lr = 0.1;
  for (int step = 0; step < 3; ++step) {
    store.at("w").grad.data = g;
    store.at("nodecay").grad.data = {0.3};
    store.at("frozen").grad.data = {0.3};
    opt.step(store, lr);
    for (std::size_t j = 0; j < 3; ++j) w[j] = w[j] * (1 - lr * 0.01) - lr * g[j] / (std::abs(g[j]) + 1e-8);
    nd -= lr * 0.3 / (0.3 + 1e-8);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(store.at("w").value.data[j], w[j], 1e-12);
    EXPECT_NEAR(store.at("nodecay").value.data[0], nd, 1e-12);
    EXPECT_EQ(store.at("frozen").value.data[0], 3.0);
  }
  EXPECT_EQ(opt.steps(), 3u);
}

TEST(AdamW, VaryingGradientMatchesMomentRecursion) {
  TrainConfig c;
  c.weight_decay = 0.0;
  ParamStore<double> store;
  store.add("w", Matrix<double>{{0.0}});
  AdamW<double> opt(c);
  const double gs[3] = {1.0, -0.5, 0.25};
  double m = 0, v = 0, w = 0;
  for (int t = 1; t <= 3; ++t) {
    store.at("w").grad.data = {gs[t - 1]};
    opt.step(store, 0.01);
    m = 0.9 * m + 0.1 * gs[t - 1];
    v = 0.999 * v + 0.001 * gs[t - 1] * gs[t - 1];
    w -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(store.at("w").value.data[0], w, 1e-14);
  }
}

TEST(Batching, PermutationWithOneCaptionPerImage) {
  auto s = index_split(50, 3);
  auto batches = epoch_batches(s, 16, 4, 9, 0);
  // 50 = 16+16+16+2; the last batch is smaller than k+1 and dropped
  ASSERT_EQ(batches.size(), 3u);
  std::set<std::uint32_t> seen;
  for (const auto& b : batches) {
    ASSERT_EQ(b.images.size(), b.texts.size());
    for (std::size_t i = 0; i < b.images.size(); ++i) {
      EXPECT_TRUE(seen.insert(b.images[i]).second);
      EXPECT_EQ(s.image_of_text[b.texts[i]], b.images[i]);
    }
  }
  auto again = epoch_batches(s, 16, 4, 9, 0);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(again[i].images, batches[i].images);
    EXPECT_EQ(again[i].texts, batches[i].texts);
  }
  EXPECT_NE(epoch_batches(s, 16, 4, 9, 1)[0].images, batches[0].images);
  EXPECT_EQ(epoch_batches(s, 16, 1, 9, 0).size(), 4u);
}

TEST(Retrieval, OneHotEmbeddingsArePerfect) {
  auto s = index_split(12, 1);
  auto eye = Matrix<double>::identity(12);
  auto r = retrieval_from_embeddings(eye, eye, s);
  for (double v : {r.ir_r1, r.ir_r5, r.ir_r10, r.tr_r1, r.tr_r5, r.tr_r10}) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(r.mean_all(), 1.0);
}

TEST(Retrieval, TiesRankLowerIndexFirst) {
  auto s = index_split(12, 1);
  Matrix<double> flat(12, 3, 1.0);
  auto r = retrieval_from_embeddings(flat, flat, s);
  EXPECT_DOUBLE_EQ(r.ir_r1, 1.0 / 12);
  EXPECT_DOUBLE_EQ(r.ir_r5, 5.0 / 12);
  EXPECT_DOUBLE_EQ(r.ir_r10, 10.0 / 12);
  EXPECT_DOUBLE_EQ(r.tr_r10, 10.0 / 12);
}

TEST(Retrieval, ImageQueryCountsAnyCaption) {
  auto s = index_split(10, 2);
  Matrix<double> img = Matrix<double>::identity(10), txt(20, 10);
  // only the second caption of each image matches
  for (std::size_t i = 0; i < 10; ++i) txt(2 * i + 1, i) = 1.0, txt(2 * i, (i + 1) % 10) = 0.5;
  auto r = retrieval_from_embeddings(img, txt, s);
  EXPECT_EQ(r.tr_r1, 1.0);
  EXPECT_EQ(r.tr_queries, 10u);
  EXPECT_EQ(r.ir_queries, 20u);
  EXPECT_DOUBLE_EQ(r.ir_r1, 0.5);
}

TEST(Retrieval, MonotoneAndShapeChecked) {
  Rng rng(4);
  auto s = index_split(30, 1);
  for (int t = 0; t < 10; ++t) {
    Matrix<double> a(30, 5), b(30, 5);
    for (auto& v : a.data) v = rng.normal();
    for (auto& v : b.data) v = rng.normal();
    auto r = retrieval_from_embeddings(a, b, s);
    EXPECT_LE(r.ir_r1, r.ir_r5);
    EXPECT_LE(r.ir_r5, r.ir_r10);
    EXPECT_LE(r.tr_r1, r.tr_r5);
    EXPECT_LE(r.tr_r5, r.tr_r10);
  }
  EXPECT_THROW(retrieval_from_embeddings(Matrix<double>(30, 5), Matrix<double>(30, 4), s),
               ContractError);
  auto tiny = index_split(5, 1);
  EXPECT_THROW(retrieval_from_embeddings(Matrix<double>(5, 2), Matrix<double>(5, 2), tiny),
               ContractError);
}

TEST(Student, TemperatureClampAndSize) {
  StudentConfig c;
  c.image_raw_dim = 256;
  c.text_raw_dim = 256;
  Student s(c);
  ParamStore<double> store;
  Rng rng(1);
  s.register_params(store, rng);
  EXPECT_EQ(store.scalar_count(), s.parameter_count());
  EXPECT_LT(s.parameter_count(), 4'000'000u);
  store.at(Student::kLogTau).value.data[0] = std::log(5.0);
  s.clamp_tau(store);
  EXPECT_NEAR(std::exp(store.at(Student::kLogTau).value.data[0]), 1.0, 1e-12);
  store.at(Student::kLogTau).value.data[0] = std::log(1e-4);
  s.clamp_tau(store);
  EXPECT_NEAR(std::exp(store.at(Student::kLogTau).value.data[0]), 0.01, 1e-12);
  EXPECT_THROW(Student(StudentConfig{.depth = 0}), ContractError);
}

TEST(Student, EncodersMatchScalarMlpAndAreUnitNorm) {
  StudentConfig c;
  c.image_raw_dim = 5;
  c.text_raw_dim = 7;
  c.dim = 4;
  c.hidden = 6;
  c.depth = 3;
  Student s(c);
  ParamStore<double> store;
  Rng rng(2);
  s.register_params(store, rng);
  Matrix<double> x(3, 5);
  for (auto& v : x.data) v = rng.normal();
  Graph<double> g;
  auto e = s.encode_images(g, store, g.constant(x));
  for (std::size_t r = 0; r < 3; ++r) {
    auto row = x.row(r);
    auto want = ref::l2n(ref::mlp(store, Student::kImagePrefix, c.image_shape(), {row.begin(), row.end()}));
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(e.value()(r, j), want[j], 1e-12);
  }
  EXPECT_THROW(s.encode_texts(g, store, g.constant(x)), ContractError);
}

TEST(Training, ZeroEpochsReturnsInitialization) {
  auto s = small_setup();
  s.cfg.epochs = 0;
  auto init = s.model.init_params<double>(5);
  auto res = train(s.cfg, s.model, s.world, init);
  EXPECT_TRUE(same_values(res.final_params, init));
  EXPECT_TRUE(same_values(res.best_params, init));
  EXPECT_EQ(res.best_epoch, 0u);
  EXPECT_EQ(res.log.size(), 1u);
}

TEST(Training, DeterministicGivenSeed) {
  auto s = small_setup();
  auto a = train(s.cfg, s.model, s.world, s.model.init_params<double>(5));
  auto b = train(s.cfg, s.model, s.world, s.model.init_params<double>(5));
  EXPECT_EQ(a.log, b.log);
  EXPECT_TRUE(same_values(a.final_params, b.final_params));
  EXPECT_EQ(a.log.size(), 3u);
  auto j = nlohmann::json::parse(a.log.back());
  EXPECT_EQ(j["epoch"], 2);
  EXPECT_GT(j["oracle_queries"].get<std::size_t>(), 0u);
  s.cfg.seed = 1;
  auto c = train(s.cfg, s.model, s.world, s.model.init_params<double>(5));
  EXPECT_FALSE(same_values(a.final_params, c.final_params));
}

TEST(Training, LearnsAndKeepsBestByValidationMean) {
  auto s = small_setup({Tdd::gt, Tfd::none, 4});
  s.cfg.epochs = 6;
  auto res = train(s.cfg, s.model, s.world, s.model.init_params<double>(2));
  double init_mean = nlohmann::json::parse(res.log.front())["val_mean"];
  double best = init_mean;
  for (const auto& line : res.log) best = std::max(best, nlohmann::json::parse(line)["val_mean"].get<double>());
  EXPECT_GT(best, init_mean);
  EXPECT_DOUBLE_EQ(res.best_val.mean_all(), best);
  auto re = evaluate_retrieval(s.model.student, res.best_params, s.world.val);
  EXPECT_DOUBLE_EQ(re.mean_all(), best);
}

TEST(Training, EvaluationLeavesParametersUntouched) {
  auto s = small_setup();
  auto p = s.model.init_params<double>(3);
  auto copy = p;
  evaluate_retrieval(s.model.student, p, s.world.test);
  EXPECT_TRUE(same_values(p, copy));
}

TEST(Training, RejectsInvalidConfigs) {
  auto s = small_setup();
  s.cfg.batch_size = 1;
  EXPECT_THROW(train(s.cfg, s.model, s.world, s.model.init_params<double>(1)), ConfigError);
  s.cfg.batch_size = 32;
  s.cfg.loss.k = 33;
  EXPECT_THROW(train(s.cfg, s.model, s.world, s.model.init_params<double>(1)), ConfigError);
  s.cfg.loss = {Tdd::clip, Tfd::clip_fa, 4};
  EXPECT_THROW(train(s.cfg, s.model, s.world, s.model.init_params<double>(1)), ConfigError);
}
