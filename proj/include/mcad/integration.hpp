#pragma once

// Multi-teacher integration module. Dual-stream rows are projected by g3
// (text) and g4 (image); for pairs nominated by either top-k set the
// single-stream pair feature is projected by g1 (text) and g2 (image), scaled
// by a learnable alpha, added, and the sum is l2-normalized.
//
// Fusion is pair-conditioned: entry (l, m) of every integrated or cross
// distribution uses the features fused with pair (image l, text m). Outside
// the gated cells the single-stream term is exactly zero, so those entries
// reduce to per-item projected features.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mcad/student.hpp"
#include "mcad/teachers.hpp"

namespace mcad {

struct IntegrationConfig {
  std::size_t d_ss = 32;
  std::size_t d_ds = 64;
  std::size_t dim = 64;
  std::size_t hidden = 0;  // 0 means `dim`
  Activation activation = Activation::tanh;
  double alpha_init = 0.5;
  double tau_init = 0.07;  // normally the dual teacher's temperature

  std::size_t hidden_width() const { return hidden ? hidden : dim; }
  MlpShape single_shape() const {
    return {{d_ss, hidden_width(), dim}, activation};
  }
  MlpShape dual_shape() const { return {{d_ds, hidden_width(), dim}, activation}; }
};

enum class Side { text, image };

/// Union of the gated cells, (image row, text row), with their pair features.
template <class Real>
struct GatedPairs {
  std::vector<Cell> cells;
  std::vector<std::uint32_t> image_rows;
  std::vector<std::uint32_t> text_rows;
  Matrix<Real> features;  // [q, d_ss]

  std::size_t size() const { return cells.size(); }
};

/// A cell (l, m) is gated iff m is in P_i2t[l] or l is in P_t2i[m].
template <class Real>
GatedPairs<Real> gated_pairs(const TopKIndexSet& p_i2t, const TopKIndexSet& p_t2i,
                             const PairCache& cache, std::size_t d_ss) {
  std::vector<Cell> cells;
  cells.reserve(p_i2t.indices.size() + p_t2i.indices.size());
  for (std::size_t l = 0; l < p_i2t.rows; ++l)
    for (const auto m : p_i2t.row(l)) cells.push_back({static_cast<std::uint32_t>(l), m});
  for (std::size_t t = 0; t < p_t2i.rows; ++t)
    for (const auto i : p_t2i.row(t)) cells.push_back({i, static_cast<std::uint32_t>(t)});
  std::sort(cells.begin(), cells.end());
  cells.erase(std::unique(cells.begin(), cells.end()), cells.end());

  GatedPairs<Real> out;
  out.features = Matrix<Real>(cells.size(), d_ss);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    auto it = cache.find(cells[i]);
    if (it == cache.end()) {
      throw ContractError("no single-stream record cached for gated pair (" +
                          std::to_string(cells[i].row) + "," +
                          std::to_string(cells[i].col) + ")");
    }
    if (it->second.h_ss.size() != d_ss) {
      throw ContractError("cached pair feature has width " +
                          std::to_string(it->second.h_ss.size()) + ", expected " +
                          std::to_string(d_ss));
    }
    for (std::size_t c = 0; c < d_ss; ++c)
      out.features(i, c) = static_cast<Real>(it->second.h_ss[c]);
    out.image_rows.push_back(cells[i].row);
    out.text_rows.push_back(cells[i].col);
  }
  out.cells = std::move(cells);
  return out;
}

template <class Real>
struct FusedFeatures {
  Tensor<Real> images;        // [n,d] per-item fused image features (ungated)
  Tensor<Real> texts;         // [n,d] per-item fused text features (ungated)
  Tensor<Real> gated_images;  // [q,d] I_T for each gated cell
  Tensor<Real> gated_texts;   // [q,d] T_T for each gated cell
  const GatedPairs<Real>* gated = nullptr;
};

class Integration {
 public:
  static constexpr const char* kG1 = "integ.g1";
  static constexpr const char* kG2 = "integ.g2";
  static constexpr const char* kG3 = "integ.g3";
  static constexpr const char* kG4 = "integ.g4";
  static constexpr const char* kAlpha = "integ.alpha";
  static constexpr const char* kLogTau = "integ.log_tau";

  Integration() = default;
  explicit Integration(IntegrationConfig cfg) : cfg_(cfg) {}

  const IntegrationConfig& config() const { return cfg_; }

  template <class Real>
  void register_params(ParamStore<Real>& store, Rng& rng) const {
    register_mlp(store, kG1, cfg_.single_shape(), rng);
    register_mlp(store, kG2, cfg_.single_shape(), rng);
    register_mlp(store, kG3, cfg_.dual_shape(), rng);
    register_mlp(store, kG4, cfg_.dual_shape(), rng);
    store.add(kAlpha, Matrix<Real>(1, 1, static_cast<Real>(cfg_.alpha_init)), false);
    store.add(kLogTau, Matrix<Real>(1, 1, static_cast<Real>(std::log(cfg_.tau_init))),
              false);
  }

  template <class Real>
  Tensor<Real> tau(Graph<Real>& g, ParamStore<Real>& store) const {
    return exp(g.param(store.at(kLogTau)));
  }

  /// f_P(h) through g1 (text) or g2 (image); an absent feature yields an exact
  /// zero row with no path into the projection.
  template <class Real>
  Tensor<Real> gated_project(Graph<Real>& g, ParamStore<Real>& store,
                             const std::optional<Tensor<Real>>& h, Side side) const {
    if (!h) return g.constant(Matrix<Real>(1, cfg_.dim));
    if (h->cols() != cfg_.d_ss) {
      throw ContractError("gated_project: feature width " + std::to_string(h->cols()) +
                          " != d_ss " + std::to_string(cfg_.d_ss));
    }
    return mlp_forward(g, store, side == Side::text ? kG1 : kG2, cfg_.single_shape(), *h);
  }

  /// Fused (T_T, I_T) for a single pair given its dual rows [1,d_ds] and the
  /// pair feature when the pair is gated.
  template <class Real>
  std::pair<Tensor<Real>, Tensor<Real>> fused_pair_features(
      Graph<Real>& g, ParamStore<Real>& store, const Tensor<Real>& text_ds,
      const Tensor<Real>& image_ds, const std::optional<Tensor<Real>>& h) const {
    auto alpha = g.param(store.at(kAlpha));
    auto t = add(mlp_forward(g, store, kG3, cfg_.dual_shape(), text_ds),
                 mul_scalar(gated_project(g, store, h, Side::text), alpha));
    auto i = add(mlp_forward(g, store, kG4, cfg_.dual_shape(), image_ds),
                 mul_scalar(gated_project(g, store, h, Side::image), alpha));
    return {l2_normalize_rows(t), l2_normalize_rows(i)};
  }

  /// Batched fusion over a batch of dual rows and its gated cells.
  template <class Real>
  FusedFeatures<Real> fuse(Graph<Real>& g, ParamStore<Real>& store,
                           const Matrix<Real>& image_ds, const Matrix<Real>& text_ds,
                           const GatedPairs<Real>& gated) const {
    if (image_ds.cols != cfg_.d_ds || text_ds.cols != cfg_.d_ds) {
      throw ContractError("integration: dual feature width " +
                          std::to_string(image_ds.cols) + " != d_ds " +
                          std::to_string(cfg_.d_ds));
    }
    auto proj_t = mlp_forward(g, store, kG3, cfg_.dual_shape(), g.constant(text_ds));
    auto proj_i = mlp_forward(g, store, kG4, cfg_.dual_shape(), g.constant(image_ds));
    FusedFeatures<Real> out;
    out.gated = &gated;
    out.texts = l2_normalize_rows(proj_t);
    out.images = l2_normalize_rows(proj_i);
    if (gated.size() > 0) {
      auto alpha = g.param(store.at(kAlpha));
      auto h = g.constant(gated.features);
      auto g1 = mlp_forward(g, store, kG1, cfg_.single_shape(), h);
      auto g2 = mlp_forward(g, store, kG2, cfg_.single_shape(), h);
      out.gated_texts = l2_normalize_rows(
          add(gather_rows(proj_t, std::span<const std::uint32_t>(gated.text_rows)),
              mul_scalar(g1, alpha)));
      out.gated_images = l2_normalize_rows(
          add(gather_rows(proj_i, std::span<const std::uint32_t>(gated.image_rows)),
              mul_scalar(g2, alpha)));
    }
    return out;
  }

 private:
  IntegrationConfig cfg_;
};

namespace detail {

/// logits(l, m) = <left(l | m), right(m | l)> with gated cells overridden by
/// the pair-conditioned rows.
template <class Real>
Tensor<Real> pair_logits(const Tensor<Real>& left, const Tensor<Real>& right,
                         const std::optional<Tensor<Real>>& left_gated,
                         const std::optional<Tensor<Real>>& right_gated,
                         const GatedPairs<Real>& gated) {
  auto base = matmul_nt(left, right);
  if (gated.size() == 0) return base;
  auto lg = left_gated ? *left_gated
                       : gather_rows(left, std::span<const std::uint32_t>(gated.image_rows));
  auto rg = right_gated ? *right_gated
                        : gather_rows(right, std::span<const std::uint32_t>(gated.text_rows));
  return masked_assign(base, std::span<const Cell>(gated.cells), rowwise_dot(lg, rg));
}

template <class Real>
DistPair<Real> pair_distributions(const Tensor<Real>& logits_i2t, const Tensor<Real>& tau) {
  return {tempered_softmax(logits_i2t, tau), tempered_softmax(transpose(logits_i2t), tau)};
}

template <class Real>
std::optional<Tensor<Real>> gated_or_none(const Tensor<Real>& t, const GatedPairs<Real>& g) {
  if (g.size() == 0) return std::nullopt;
  return t;
}

}  // namespace detail

/// D_T from the fused features at temperature tau_T. The t2i logits are the
/// transpose of the i2t logits since both read the same fused pair.
template <class Real>
DistPair<Real> integrated_teacher_distributions(const FusedFeatures<Real>& fused,
                                                const Tensor<Real>& tau_t) {
  const auto& gp = *fused.gated;
  auto logits = detail::pair_logits(fused.images, fused.texts,
                                    detail::gated_or_none(fused.gated_images, gp),
                                    detail::gated_or_none(fused.gated_texts, gp), gp);
  return detail::pair_distributions(logits, tau_t);
}

template <class Real>
struct CrossDistributions {
  DistPair<Real> fai;  // student images vs fused texts
  DistPair<Real> fat;  // fused images vs student texts
};

/// Cross student/integrated-teacher distributions at (tau_T + tau_S) / 2.
template <class Real>
CrossDistributions<Real> cross_feature_distributions(const Tensor<Real>& student_images,
                                                     const Tensor<Real>& student_texts,
                                                     const FusedFeatures<Real>& fused,
                                                     const Tensor<Real>& tau_s,
                                                     const Tensor<Real>& tau_t) {
  if (student_images.cols() != fused.texts.cols()) {
    throw ContractError("cross_feature_distributions: student dim " +
                        std::to_string(student_images.cols()) + " != fused dim " +
                        std::to_string(fused.texts.cols()));
  }
  const auto& gp = *fused.gated;
  auto tau = scale(add(tau_t, tau_s), Real(0.5));
  auto fai = detail::pair_logits(student_images, fused.texts, std::optional<Tensor<Real>>{},
                                 detail::gated_or_none(fused.gated_texts, gp), gp);
  auto fat = detail::pair_logits(fused.images, student_texts,
                                 detail::gated_or_none(fused.gated_images, gp),
                                 std::optional<Tensor<Real>>{}, gp);
  return {detail::pair_distributions(fai, tau), detail::pair_distributions(fat, tau)};
}

}  // namespace mcad
