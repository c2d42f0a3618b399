#pragma once

// Loss taxonomy: total = TDD + TFD, where TDD pulls similarity distributions
// toward targets and TFD aligns student features with teacher features
// through cross distributions. Every KL term is kl_rows(output, target).

#include <optional>
#include <string>

#include "mcad/integration.hpp"
#include "mcad/student.hpp"
#include "mcad/teachers.hpp"

namespace mcad {

enum class Tdd { none, gt, clip, albef, albef_plus_gt, clip_plus_gt, mt };
enum class Tfd { none, clip_fa, mt_fa };

inline std::string to_string(Tdd t) {
  switch (t) {
    case Tdd::none: return "none";
    case Tdd::gt: return "gt";
    case Tdd::clip: return "clip";
    case Tdd::albef: return "albef";
    case Tdd::albef_plus_gt: return "albef_plus_gt";
    case Tdd::clip_plus_gt: return "clip_plus_gt";
    case Tdd::mt: return "mt";
  }
  return "?";
}

inline std::string to_string(Tfd t) {
  switch (t) {
    case Tfd::none: return "none";
    case Tfd::clip_fa: return "clip_fa";
    case Tfd::mt_fa: return "mt_fa";
  }
  return "?";
}

inline Tdd parse_tdd(const std::string& s) {
  for (Tdd t : {Tdd::none, Tdd::gt, Tdd::clip, Tdd::albef, Tdd::albef_plus_gt,
                Tdd::clip_plus_gt, Tdd::mt})
    if (to_string(t) == s) return t;
  throw ConfigError("unknown tdd loss '" + s + "'");
}

inline Tfd parse_tfd(const std::string& s) {
  for (Tfd t : {Tfd::none, Tfd::clip_fa, Tfd::mt_fa})
    if (to_string(t) == s) return t;
  throw ConfigError("unknown tfd loss '" + s + "'");
}

struct LossConfig {
  Tdd tdd = Tdd::mt;
  Tfd tfd = Tfd::mt_fa;
  std::size_t k = 11;

  bool uses_single_stream() const {
    return tdd == Tdd::albef || tdd == Tdd::albef_plus_gt || tdd == Tdd::mt ||
           tfd == Tfd::mt_fa;
  }
  bool uses_integration() const { return tdd == Tdd::mt || tfd == Tfd::mt_fa; }
  bool uses_dual_cross() const { return tfd == Tfd::clip_fa; }

  /// Short label such as "mt+mt_fa", "albef+gt" or "clip_fa".
  std::string label() const {
    std::string a;
    switch (tdd) {
      case Tdd::none: break;
      case Tdd::albef_plus_gt: a = "albef+gt"; break;
      case Tdd::clip_plus_gt: a = "clip+gt"; break;
      default: a = to_string(tdd);
    }
    if (tfd == Tfd::none) return a;
    return a.empty() ? to_string(tfd) : a + "+" + to_string(tfd);
  }

  void validate(std::size_t batch_size) const {
    if (tdd == Tdd::none && tfd == Tfd::none) {
      throw ConfigError("loss: tdd and tfd cannot both be none");
    }
    if (k < 1) throw ConfigError("loss: k must be positive");
    if (k > batch_size) {
      throw ConfigError("loss: k=" + std::to_string(k) + " exceeds batch size " +
                        std::to_string(batch_size));
    }
  }
};

/// The twelve TDD/TFD combinations of the ablation grid.
inline std::vector<LossConfig> ablation_grid(std::size_t k) {
  return {{Tdd::gt, Tfd::none, k},     {Tdd::clip, Tfd::none, k},
          {Tdd::albef, Tfd::none, k},  {Tdd::albef_plus_gt, Tfd::none, k},
          {Tdd::clip_plus_gt, Tfd::none, k}, {Tdd::mt, Tfd::none, k},
          {Tdd::none, Tfd::clip_fa, k}, {Tdd::none, Tfd::mt_fa, k},
          {Tdd::mt, Tfd::mt_fa, k},    {Tdd::clip, Tfd::clip_fa, k},
          {Tdd::clip, Tfd::mt_fa, k},  {Tdd::mt, Tfd::clip_fa, k}};
}

/// Constant targets shared by every loss term of one batch.
template <class Real>
struct LossTargets {
  Tensor<Real> ds_i2t;
  Tensor<Real> ds_t2i;
  const TopKIndexSet* p_i2t = nullptr;
  const TopKIndexSet* p_t2i = nullptr;
  std::optional<Tensor<Real>> ss_i2t;  // sigma(D_SS[P]), [n,k]
  std::optional<Tensor<Real>> ss_t2i;
};

template <class Real>
LossTargets<Real> make_targets(Graph<Real>& g, const DualTargets<Real>& dual,
                               const TopKIndexSet& p_i2t, const TopKIndexSet& p_t2i,
                               const SingleStreamTargets<Real>* single) {
  LossTargets<Real> t;
  t.ds_i2t = g.constant(dual.i2t);
  t.ds_t2i = g.constant(dual.t2i);
  t.p_i2t = &p_i2t;
  t.p_t2i = &p_t2i;
  if (single) {
    t.ss_i2t = l1_normalize_rows(g.constant(gather_topk(single->i2t, p_i2t)));
    t.ss_t2i = l1_normalize_rows(g.constant(gather_topk(single->t2i, p_t2i)));
  }
  return t;
}

/// KL of both directions against the dual-stream targets.
template <class Real>
Tensor<Real> f_ds(const DistPair<Real>& d, const LossTargets<Real>& t) {
  return add(kl_rows(d.i2t, t.ds_i2t), kl_rows(d.t2i, t.ds_t2i));
}

/// KL between sigma of the top-k cells of d and sigma of the rescored cells.
template <class Real>
Tensor<Real> topk_rescore_term(const DistPair<Real>& d, const LossTargets<Real>& t) {
  if (!t.ss_i2t || !t.ss_t2i) {
    throw ConfigError("loss needs single-stream targets but none were built");
  }
  return add(kl_rows(l1_normalize_rows(gather_topk(d.i2t, *t.p_i2t)), *t.ss_i2t),
             kl_rows(l1_normalize_rows(gather_topk(d.t2i, *t.p_t2i)), *t.ss_t2i));
}

template <class Real>
Tensor<Real> f_mt(const DistPair<Real>& d, const LossTargets<Real>& t) {
  return add(f_ds(d, t), topk_rescore_term(d, t));
}

/// KL against the identity correspondence in both directions.
template <class Real>
Tensor<Real> gt_loss(const DistPair<Real>& d) {
  if (d.i2t.rows() != d.i2t.cols()) {
    throw ContractError("gt loss needs a square batch, got " + shape_str(d.i2t.value()));
  }
  auto eye = d.i2t.graph().constant(Matrix<Real>::identity(d.i2t.rows()));
  return add(kl_rows(d.i2t, eye), kl_rows(d.t2i, eye));
}

/// Student vs raw dual-teacher features at (tau_DS + tau_S) / 2.
template <class Real>
CrossDistributions<Real> dual_cross_distributions(const Tensor<Real>& student_images,
                                                  const Tensor<Real>& student_texts,
                                                  const Tensor<Real>& teacher_images,
                                                  const Tensor<Real>& teacher_texts,
                                                  const Tensor<Real>& tau_s, Real tau_ds) {
  if (student_images.cols() != teacher_texts.cols()) {
    throw ConfigError("clip_fa needs student dim " + std::to_string(student_images.cols()) +
                      " equal to dual teacher dim " + std::to_string(teacher_texts.cols()));
  }
  auto tau = scale(add(tau_s, student_images.graph().scalar(tau_ds)), Real(0.5));
  return {{similarity_distribution(student_images, teacher_texts, tau),
           similarity_distribution(teacher_texts, student_images, tau)},
          {similarity_distribution(teacher_images, student_texts, tau),
           similarity_distribution(student_texts, teacher_images, tau)}};
}

template <class Real>
struct LossInputs {
  DistPair<Real> student;
  std::optional<DistPair<Real>> integrated;           // D_T
  std::optional<CrossDistributions<Real>> cross;      // D_FAI, D_FAT
  std::optional<CrossDistributions<Real>> dual_cross; // D_FAI', D_FAT'
  LossTargets<Real> targets;
};

template <class Real>
Tensor<Real> loss_tdd(const LossConfig& cfg, const LossInputs<Real>& in) {
  const auto& s = in.student;
  const auto& t = in.targets;
  switch (cfg.tdd) {
    case Tdd::gt: return gt_loss(s);
    case Tdd::clip: return f_ds(s, t);
    case Tdd::albef: return topk_rescore_term(s, t);
    case Tdd::albef_plus_gt: return add(topk_rescore_term(s, t), gt_loss(s));
    case Tdd::clip_plus_gt: return add(f_ds(s, t), gt_loss(s));
    case Tdd::mt:
      if (!in.integrated) throw ConfigError("tdd=mt needs the integration module");
      return add(f_mt(s, t), f_mt(*in.integrated, t));
    case Tdd::none: break;
  }
  throw ConfigError("loss_tdd called with tdd=none");
}

template <class Real>
Tensor<Real> loss_tfd(const LossConfig& cfg, const LossInputs<Real>& in) {
  const auto& t = in.targets;
  switch (cfg.tfd) {
    case Tfd::mt_fa:
      if (!in.cross) throw ConfigError("tfd=mt_fa needs the integration module");
      return add(f_mt(in.cross->fai, t), f_mt(in.cross->fat, t));
    case Tfd::clip_fa:
      if (!in.dual_cross) throw ConfigError("tfd=clip_fa needs dual cross distributions");
      return add(f_ds(in.dual_cross->fai, t), f_ds(in.dual_cross->fat, t));
    case Tfd::none: break;
  }
  throw ConfigError("loss_tfd called with tfd=none");
}

template <class Real>
struct LossBreakdown {
  Tensor<Real> total;
  std::optional<Tensor<Real>> tdd;
  std::optional<Tensor<Real>> tfd;
};

template <class Real>
LossBreakdown<Real> total_loss(const LossConfig& cfg, const LossInputs<Real>& in) {
  LossBreakdown<Real> out;
  if (cfg.tdd != Tdd::none) out.tdd = loss_tdd(cfg, in);
  if (cfg.tfd != Tfd::none) out.tfd = loss_tfd(cfg, in);
  if (out.tdd && out.tfd) {
    out.total = add(*out.tdd, *out.tfd);
  } else if (out.tdd) {
    out.total = *out.tdd;
  } else if (out.tfd) {
    out.total = *out.tfd;
  } else {
    throw ConfigError("loss: tdd and tfd cannot both be none");
  }
  return out;
}

}  // namespace mcad
