#pragma once

// Training loop (AdamW, warmup + cosine schedule, one-caption-per-image
// batching) and recall@K retrieval evaluation.

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcad/dataset.hpp"
#include "mcad/losses.hpp"

namespace mcad {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t epochs = 100;
  double warmup_fraction = 0.05;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  LossConfig loss;
  bool normalize_by_batch = true;

  void validate() const {
    if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
      throw ConfigError("train: warmup_fraction must lie in [0,1)");
    }
    if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    loss.validate(batch_size);
  }
};

/// Linear warmup from 0 to lr, then cosine decay measured from warmup end.
inline double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (step >= total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " +
                        std::to_string(total_steps) + ")");
  }
  const auto warmup = static_cast<std::size_t>(
      std::floor(cfg.warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) {
    return cfg.lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  const double progress = static_cast<double>(step - warmup) /
                          static_cast<double>(total_steps - warmup);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Decoupled weight decay Adam. Decay applies only to parameters flagged
/// `decay`; frozen parameters are skipped entirely.
template <class Real>
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg)
      : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.eps), wd_(cfg.weight_decay) {}

  void step(ParamStore<Real>& store, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::size_t i = 0;
    for (auto& p : store) {
      if (i == moments_.size()) {
        moments_.emplace_back(std::vector<Real>(p.value.size()),
                              std::vector<Real>(p.value.size()));
      }
      auto& [m, v] = moments_[i++];
      if (!p.trainable) continue;
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const double gj = p.grad.data[j];
        m[j] = static_cast<Real>(beta1_ * m[j] + (1.0 - beta1_) * gj);
        v[j] = static_cast<Real>(beta2_ * v[j] + (1.0 - beta2_) * gj * gj);
        double w = p.value.data[j];
        if (p.decay) w *= 1.0 - lr * wd_;
        const double mhat = m[j] / c1;
        const double vhat = v[j] / c2;
        w -= lr * mhat / (std::sqrt(vhat) + eps_);
        p.value.data[j] = static_cast<Real>(w);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
  std::vector<std::pair<std::vector<Real>, std::vector<Real>>> moments_;
};

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  std::vector<std::uint32_t> images;  // split-local indices
  std::vector<std::uint32_t> texts;   // one caption per image
};

/// Random permutation of images, one uniformly chosen caption each, chunked
/// into batches. A trailing batch smaller than k+1 is dropped.
template <class Real>
std::vector<Batch> epoch_batches(const SplitData<Real>& split, std::size_t batch_size,
                                 std::size_t k, std::uint64_t seed, std::size_t epoch) {
  Rng rng(derive_seed(seed, 0x6261746368ULL, epoch));
  std::vector<std::uint32_t> order(split.n_images());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::uint32_t>(i);
  rng.shuffle(order);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    if (end - start < batch_size && end - start < k + 1) break;
    Batch b;
    for (std::size_t i = start; i < end; ++i) {
      const auto img = order[i];
      const auto& caps = split.captions[img];
      b.images.push_back(img);
      b.texts.push_back(caps[caps.size() == 1 ? 0 : rng.below(caps.size())]);
    }
    out.push_back(std::move(b));
  }
  return out;
}

template <class Real>
Matrix<Real> take_rows(const Matrix<Real>& src, std::span<const std::uint32_t> rows) {
  Matrix<Real> out(rows.size(), src.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = src.row(rows[i]);
    std::copy(r.begin(), r.end(), out.row(i).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// One batch forward

struct Model {
  Student student;
  Integration integration;

  template <class Real>
  ParamStore<Real> init_params(std::uint64_t seed) const {
    ParamStore<Real> store;
    Rng rng(derive_seed(seed, 0x696e6974ULL));
    student.register_params(store, rng);
    integration.register_params(store, rng);
    return store;
  }
};

/// Everything built for one batch. The graph-side handles reference the
/// index sets and gated pairs stored here.
template <class Real>
struct BatchContext {
  std::vector<ItemId> image_ids;
  std::vector<ItemId> text_ids;
  DualTargets<Real> dual;
  TopKIndexSet p_i2t;
  TopKIndexSet p_t2i;
  std::optional<SingleStreamTargets<Real>> single;
  std::optional<GatedPairs<Real>> gated;
};

template <class Real>
struct BatchForward {
  LossBreakdown<Real> loss;  // already divided by n when normalizing
  LossInputs<Real> inputs;
  std::optional<FusedFeatures<Real>> fused;
};

/// Builds teacher targets for a batch: dual distributions, top-k sets, and
/// single-stream rescoring when the loss needs it.
template <class Real>
void prepare_batch(BatchContext<Real>& ctx, const LossConfig& loss,
                   const DualTeacherBundle<Real>& dual, const PairOracle* oracle) {
  ctx.dual = dual_stream_targets(dual, std::span<const ItemId>(ctx.image_ids),
                                 std::span<const ItemId>(ctx.text_ids));
  ctx.p_i2t = topk_indices(ctx.dual.i2t, loss.k);
  ctx.p_t2i = topk_indices(ctx.dual.t2i, loss.k);
  if (loss.uses_single_stream()) {
    if (!oracle) throw ConfigError("loss " + loss.label() + " needs a single-stream oracle");
    ctx.single = single_stream_targets<Real>(*oracle, ctx.p_i2t, ctx.p_t2i,
                                             std::span<const ItemId>(ctx.image_ids),
                                             std::span<const ItemId>(ctx.text_ids));
  }
}

template <class Real>
BatchForward<Real> forward_batch(Graph<Real>& g, ParamStore<Real>& store, const Model& model,
                                 const TrainConfig& cfg, BatchContext<Real>& ctx,
                                 const Matrix<Real>& image_raw, const Matrix<Real>& text_raw,
                                 Real tau_ds) {
  const auto& loss = cfg.loss;
  BatchForward<Real> out;
  auto& in = out.inputs;
  in.targets = make_targets(g, ctx.dual, ctx.p_i2t, ctx.p_t2i,
                            ctx.single ? &*ctx.single : nullptr);
  auto img = model.student.encode_images(g, store, g.constant(image_raw));
  auto txt = model.student.encode_texts(g, store, g.constant(text_raw));
  auto tau_s = model.student.tau(g, store);
  in.student = student_distributions(img, txt, tau_s);

  if (loss.uses_integration()) {
    ctx.gated = gated_pairs<Real>(ctx.p_i2t, ctx.p_t2i, ctx.single->cache,
                                  model.integration.config().d_ss);
    out.fused = model.integration.fuse(g, store, ctx.dual.image_rows, ctx.dual.text_rows,
                                       *ctx.gated);
    auto tau_t = model.integration.tau(g, store);
    if (loss.tdd == Tdd::mt) in.integrated = integrated_teacher_distributions(*out.fused, tau_t);
    if (loss.tfd == Tfd::mt_fa) {
      in.cross = cross_feature_distributions(img, txt, *out.fused, tau_s, tau_t);
    }
  }
  if (loss.uses_dual_cross()) {
    in.dual_cross = dual_cross_distributions(img, txt, g.constant(ctx.dual.image_rows),
                                             g.constant(ctx.dual.text_rows), tau_s, tau_ds);
  }
  out.loss = total_loss(loss, in);
  if (cfg.normalize_by_batch) {
    const Real inv = Real(1) / static_cast<Real>(image_raw.rows);
    out.loss.total = scale(out.loss.total, inv);
    if (out.loss.tdd) out.loss.tdd = scale(*out.loss.tdd, inv);
    if (out.loss.tfd) out.loss.tfd = scale(*out.loss.tfd, inv);
  }
  return out;
}

template <class Real>
BatchContext<Real> make_context(const SplitData<Real>& split, const Batch& b) {
  BatchContext<Real> ctx;
  for (const auto i : b.images) ctx.image_ids.push_back(split.image_ids[i]);
  for (const auto t : b.texts) ctx.text_ids.push_back(split.text_ids[t]);
  return ctx;
}

// ---------------------------------------------------------------------------
// Retrieval evaluation

struct RetrievalReport {
  double ir_r1 = 0, ir_r5 = 0, ir_r10 = 0;  // text query -> images
  double tr_r1 = 0, tr_r5 = 0, tr_r10 = 0;  // image query -> texts
  std::size_t ir_queries = 0;
  std::size_t tr_queries = 0;

  double mean_r1() const { return 0.5 * (ir_r1 + tr_r1); }
  double mean_all() const { return (ir_r1 + ir_r5 + ir_r10 + tr_r1 + tr_r5 + tr_r10) / 6.0; }

  nlohmann::ordered_json to_json() const {
    return {{"ir_r1", ir_r1}, {"ir_r5", ir_r5}, {"ir_r10", ir_r10},
            {"tr_r1", tr_r1}, {"tr_r5", tr_r5}, {"tr_r10", tr_r10},
            {"ir_queries", ir_queries}, {"tr_queries", tr_queries}};
  }
};

/// Recall@{1,5,10} from precomputed embeddings. Candidates with equal score
/// rank by lower index first.
template <class Real>
RetrievalReport retrieval_from_embeddings(const Matrix<Real>& images, const Matrix<Real>& texts,
                                          const SplitData<Real>& split) {
  if (split.n_images() < 10 || split.n_texts() < 10) {
    throw ContractError("evaluate_retrieval: split needs >= 10 items per side, has " +
                        std::to_string(split.n_images()) + " images / " +
                        std::to_string(split.n_texts()) + " texts");
  }
  if (images.rows != split.n_images() || texts.rows != split.n_texts() ||
      images.cols != texts.cols) {
    throw ContractError("evaluate_retrieval: embedding shapes do not match split");
  }
  const std::size_t ni = images.rows, nt = texts.rows, d = images.cols;
  Matrix<Real> scores(ni, nt);
  detail::gemm_nt(images.data.data(), texts.data.data(), scores.data.data(), ni, d, nt);

  auto rank_in = [](auto&& score_of, std::size_t n, std::size_t target) {
    const Real s = score_of(target);
    std::size_t rank = 0;
    for (std::size_t c = 0; c < n; ++c) {
      const Real v = score_of(c);
      if (v > s || (v == s && c < target)) ++rank;
    }
    return rank;
  };

  RetrievalReport rep;
  rep.ir_queries = nt;
  rep.tr_queries = ni;
  std::size_t ir[3] = {0, 0, 0}, tr[3] = {0, 0, 0};
  constexpr std::size_t ks[3] = {1, 5, 10};
  for (std::size_t t = 0; t < nt; ++t) {
    const auto rank = rank_in([&](std::size_t i) { return scores(i, t); }, ni,
                              split.image_of_text[t]);
    for (int j = 0; j < 3; ++j) ir[j] += rank < ks[j];
  }
  for (std::size_t i = 0; i < ni; ++i) {
    std::size_t best = nt;
    for (const auto p : split.captions[i])
      best = std::min(best, rank_in([&](std::size_t t) { return scores(i, t); }, nt, p));
    for (int j = 0; j < 3; ++j) tr[j] += best < ks[j];
  }
  rep.ir_r1 = double(ir[0]) / double(nt);
  rep.ir_r5 = double(ir[1]) / double(nt);
  rep.ir_r10 = double(ir[2]) / double(nt);
  rep.tr_r1 = double(tr[0]) / double(ni);
  rep.tr_r5 = double(tr[1]) / double(ni);
  rep.tr_r10 = double(tr[2]) / double(ni);
  if (!(rep.ir_r1 <= rep.ir_r5 && rep.ir_r5 <= rep.ir_r10 && rep.tr_r1 <= rep.tr_r5 &&
        rep.tr_r5 <= rep.tr_r10)) {
    throw ContractError("retrieval metrics are not monotone in K");
  }
  return rep;
}

template <class Real>
std::pair<Matrix<Real>, Matrix<Real>> encode_split(const Student& student,
                                                   const ParamStore<Real>& params,
                                                   const SplitData<Real>& split) {
  auto& store = const_cast<ParamStore<Real>&>(params);  // read-only: grad disabled
  Graph<Real> g(false);
  auto img = student.encode_images(g, store, g.constant(split.image_raw));
  auto txt = student.encode_texts(g, store, g.constant(split.text_raw));
  return {img.value(), txt.value()};
}

template <class Real>
RetrievalReport evaluate_retrieval(const Student& student, const ParamStore<Real>& params,
                                   const SplitData<Real>& split) {
  auto [img, txt] = encode_split(student, params, split);
  return retrieval_from_embeddings(img, txt, split);
}

// ---------------------------------------------------------------------------
// Training

template <class Real>
struct TrainResult {
  ParamStore<Real> final_params;
  ParamStore<Real> best_params;
  std::size_t best_epoch = 0;
  RetrievalReport best_val;
  std::vector<std::string> log;  // one JSON object per line
};

/// Trains from `init`; the parameters with the highest mean validation
/// recall (over all six R@K) are retained. Epoch 0 records the initialization.
template <class Real>
TrainResult<Real> train(const TrainConfig& cfg, const Model& model, const World<Real>& world,
                        ParamStore<Real> init,
                        const std::function<void(const std::string&)>& on_epoch = {}) {
  cfg.validate();
  if (cfg.loss.uses_dual_cross() && model.student.config().dim != world.dual.dim()) {
    throw ConfigError("clip_fa needs student dim == dual teacher dim");
  }
  TrainResult<Real> res;
  res.final_params = std::move(init);

  auto emit = [&](nlohmann::ordered_json line) {
    res.log.push_back(line.dump());
    if (on_epoch) on_epoch(res.log.back());
  };

  auto val = evaluate_retrieval(model.student, res.final_params, world.val);
  res.best_params = res.final_params;
  res.best_val = val;
  emit({{"epoch", 0}, {"val", val.to_json()}, {"val_mean", val.mean_all()}});

  const auto batches_per_epoch =
      epoch_batches(world.train, cfg.batch_size, cfg.loss.k, cfg.seed, 0).size();
  const std::size_t total_steps = cfg.epochs * batches_per_epoch;
  if (cfg.epochs > 0 && total_steps == 0) {
    throw ConfigError("train split too small for one batch");
  }
  AdamW<Real> opt(cfg);
  std::size_t step = 0;
  const Real tau_ds = static_cast<Real>(world.dual.tau);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double sum_total = 0, sum_tdd = 0, sum_tfd = 0, lr = 0;
    std::size_t zero_rows = 0, queries = 0;
    const auto batches = epoch_batches(world.train, cfg.batch_size, cfg.loss.k, cfg.seed, epoch - 1);
    for (const auto& b : batches) {
      auto ctx = make_context(world.train, b);
      prepare_batch(ctx, cfg.loss, world.dual, world.oracle.get());
      if (ctx.single) queries += ctx.single->queries;
      res.final_params.zero_grad();
      Graph<Real> g;
      std::optional<BatchForward<Real>> fwd;
      try {
        fwd = forward_batch(g, res.final_params, model, cfg, ctx,
                            take_rows(world.train.image_raw, std::span<const std::uint32_t>(b.images)),
                            take_rows(world.train.text_raw, std::span<const std::uint32_t>(b.texts)),
                            tau_ds);
      } catch (const NumericError& e) {
        throw DivergenceError("non-finite loss at step " + std::to_string(step) + ": " + e.what());
      }
      g.backward(fwd->loss.total);
      zero_rows += g.zero_norm_rows();
      sum_total += fwd->loss.total.item();
      if (fwd->loss.tdd) sum_tdd += fwd->loss.tdd->item();
      if (fwd->loss.tfd) sum_tfd += fwd->loss.tfd->item();
      lr = lr_at(step, total_steps, cfg);
      opt.step(res.final_params, lr);
      model.student.clamp_tau(res.final_params);
      ++step;
    }
    const double nb = batches.empty() ? 1.0 : double(batches.size());
    val = evaluate_retrieval(model.student, res.final_params, world.val);
    nlohmann::ordered_json line;
    line["epoch"] = epoch;
    line["lr"] = lr;
    line["loss"] = {{"total", sum_total / nb},
                    {"tdd", sum_tdd / nb},
                    {"tfd", sum_tfd / nb}};
    line["tau_s"] = std::exp(double(res.final_params.at(Student::kLogTau).value.data[0]));
    line["tau_t"] = std::exp(double(res.final_params.at(Integration::kLogTau).value.data[0]));
    line["alpha"] = double(res.final_params.at(Integration::kAlpha).value.data[0]);
    line["oracle_queries"] = queries;
    line["zero_norm_rows"] = zero_rows;
    line["val"] = val.to_json();
    line["val_mean"] = val.mean_all();
    if (val.mean_all() > res.best_val.mean_all()) {
      res.best_val = val;
      res.best_params = res.final_params;
      res.best_epoch = epoch;
    }
    emit(std::move(line));
  }
  return res;
}

}  // namespace mcad
