#pragma once

// Finite-difference verification of every loss branch on a tiny world.

#include <string>
#include <unordered_map>
#include <vector>

#include "mcad/harness.hpp"

namespace mcad {

struct GradSuiteOptions {
  std::size_t pairs = 8;
  std::size_t k = 3;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
};

struct GradSuiteRow {
  std::string label;
  GradCheckReport report;
};

/// A small paired world plus matching model: raw dims 6, d = d_DS = 8,
/// hidden 12, d_SS 5. Teachers and oracle are random but valid.
struct TinyWorld {
  World<double> world;
  Model model;
};

inline TinyWorld tiny_world(std::size_t pairs, std::uint64_t seed) {
  constexpr std::size_t raw = 6, dim = 8, latent = 4, d_ss = 5;
  Rng rng(derive_seed(seed, 0x74696e79ULL));
  SplitData<double> s;
  s.image_raw = Matrix<double>(pairs, raw);
  s.text_raw = Matrix<double>(pairs, raw);
  Matrix<double> ti(pairs, dim), tt(pairs, dim);
  std::unordered_map<ItemId, std::vector<double>> zi, zt;
  for (std::size_t j = 0; j < pairs; ++j) {
    s.image_ids.push_back(j);
    s.image_groups.push_back(j);
    s.text_ids.push_back(100 + j);
    s.text_groups.push_back(j);
    for (auto& v : s.image_raw.row(j)) v = rng.normal();
    for (auto& v : s.text_raw.row(j)) v = rng.normal();
    for (auto* m : {&ti, &tt}) {
      double ss = 0;
      for (auto& v : m->row(j)) {
        v = rng.normal();
        ss += v * v;
      }
      for (auto& v : m->row(j)) v /= std::sqrt(ss);
    }
    std::vector<double> a(latent), b(latent);
    for (std::size_t c = 0; c < latent; ++c) {
      a[c] = rng.normal();
      b[c] = a[c] + 0.5 * rng.normal();
    }
    zi[j] = a;
    zt[100 + j] = b;
  }
  s.index();
  TinyWorld tw;
  tw.world.train = s;
  tw.world.dual = DualTeacherBundle<double>(s.image_ids, ti, s.text_ids, tt, 0.1);
  SyntheticOracleParams op;
  op.slope = 4.0;
  op.threshold = 0.0;
  op.hidden = 6;
  op.d_ss = d_ss;
  op.seed = seed;
  tw.world.oracle = std::make_shared<SyntheticPairOracle>(op, zi, zt);

  StudentConfig sc;
  sc.image_raw_dim = raw;
  sc.text_raw_dim = raw;
  sc.dim = dim;
  sc.hidden = 12;
  sc.tau_init = 0.2;
  IntegrationConfig ic;
  ic.d_ss = d_ss;
  ic.d_ds = dim;
  ic.dim = dim;
  ic.hidden = 7;
  ic.alpha_init = 0.5;
  ic.tau_init = 0.1;
  tw.model = Model{Student(sc), Integration(ic)};
  return tw;
}

/// Gradient check of one loss config on the whole tiny batch.
inline GradCheckReport check_loss_gradients(const LossConfig& loss, const GradSuiteOptions& o) {
  auto tw = tiny_world(o.pairs, o.seed);
  auto store = tw.model.init_params<double>(derive_seed(o.seed, 1));
  TrainConfig cfg;
  cfg.batch_size = o.pairs;
  cfg.loss = loss;
  cfg.loss.k = o.k;
  cfg.validate();
  const auto& split = tw.world.train;
  Batch b;
  for (std::uint32_t i = 0; i < o.pairs; ++i) {
    b.images.push_back(i);
    b.texts.push_back(i);
  }
  auto ctx = make_context(split, b);
  prepare_batch(ctx, cfg.loss, tw.world.dual, tw.world.oracle.get());
  const double tau_ds = tw.world.dual.tau;
  auto fn = [&](Graph<double>& g) {
    return forward_batch(g, store, tw.model, cfg, ctx, split.image_raw, split.text_raw, tau_ds)
        .loss.total;
  };
  return gradient_check(fn, store, {}, o.step, o.tolerance);
}

inline std::vector<GradSuiteRow> gradient_suite(const GradSuiteOptions& o = {}) {
  std::vector<GradSuiteRow> rows;
  for (const auto& l : ablation_grid(o.k)) rows.push_back({l.label(), check_loss_gradients(l, o)});
  return rows;
}

}  // namespace mcad
