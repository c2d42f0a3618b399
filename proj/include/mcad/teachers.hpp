#pragma once

// Frozen teachers. The dual-stream teacher is a table of unit embeddings plus
// its temperature; the single-stream teacher is a pair oracle returning a
// matching score and a fused pair feature.

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mcad/distmath.hpp"
#include "mcad/rng.hpp"

namespace mcad {

using ItemId = std::uint64_t;

template <class Real>
struct DualTeacherBundle {
  Matrix<Real> images;  // unit rows
  Matrix<Real> texts;   // unit rows
  std::vector<ItemId> image_ids;
  std::vector<ItemId> text_ids;
  double tau = 0.0;

  DualTeacherBundle() = default;
  DualTeacherBundle(std::vector<ItemId> img_ids, Matrix<Real> img,
                    std::vector<ItemId> txt_ids, Matrix<Real> txt, double temperature)
      : images(std::move(img)),
        texts(std::move(txt)),
        image_ids(std::move(img_ids)),
        text_ids(std::move(txt_ids)),
        tau(temperature) {
    if (!(tau > 0.0)) throw ContractError("dual teacher temperature must be positive");
    if (images.cols != texts.cols) {
      throw ContractError("dual teacher image dim " + std::to_string(images.cols) +
                          " != text dim " + std::to_string(texts.cols));
    }
    if (image_ids.size() != images.rows || text_ids.size() != texts.rows) {
      throw ContractError("dual teacher id count does not match feature rows");
    }
    require_unit_rows(images, 1e-4, "dual teacher images");
    require_unit_rows(texts, 1e-4, "dual teacher texts");
    for (std::size_t i = 0; i < image_ids.size(); ++i) image_row_[image_ids[i]] = i;
    for (std::size_t i = 0; i < text_ids.size(); ++i) text_row_[text_ids[i]] = i;
  }

  std::size_t dim() const { return images.cols; }

  Matrix<Real> image_rows(std::span<const ItemId> ids) const {
    return gather(images, image_row_, ids, "image");
  }
  Matrix<Real> text_rows(std::span<const ItemId> ids) const {
    return gather(texts, text_row_, ids, "text");
  }

 private:
  static Matrix<Real> gather(const Matrix<Real>& src,
                             const std::unordered_map<ItemId, std::size_t>& index,
                             std::span<const ItemId> ids, const char* side) {
    Matrix<Real> out(ids.size(), src.cols);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto it = index.find(ids[i]);
      if (it == index.end()) {
        throw IngestionError(std::string("dual teacher has no ") + side +
                             " id " + std::to_string(ids[i]));
      }
      const auto row = src.row(it->second);
      std::copy(row.begin(), row.end(), out.row(i).begin());
    }
    return out;
  }

  std::unordered_map<ItemId, std::size_t> image_row_;
  std::unordered_map<ItemId, std::size_t> text_row_;
};

struct PairOracleRecord {
  float score = 0.0f;      // in [0,1]
  std::vector<float> h_ss;  // fused pair feature

  friend bool operator==(const PairOracleRecord&, const PairOracleRecord&) = default;
};

/// Single-stream teacher. Queries are deterministic per pair.
class PairOracle {
 public:
  virtual ~PairOracle() = default;
  virtual PairOracleRecord query(ItemId image, ItemId text) const = 0;
  virtual std::size_t feature_dim() const = 0;
  virtual std::string backend() const = 0;
};

/// Oracle backed by a stored pair table. A missing pair is a coverage error.
class TablePairOracle final : public PairOracle {
 public:
  explicit TablePairOracle(std::size_t d_ss) : d_ss_(d_ss) {}

  void insert(ItemId image, ItemId text, PairOracleRecord rec) {
    if (rec.h_ss.size() != d_ss_) {
      throw ContractError("pair record feature dim " + std::to_string(rec.h_ss.size()) +
                          " != " + std::to_string(d_ss_));
    }
    if (!(rec.score >= 0.0f && rec.score <= 1.0f)) {
      throw ContractError("pair record score outside [0,1]");
    }
    if (!table_.emplace(std::pair{image, text}, std::move(rec)).second) {
      throw ContractError("duplicate pair (" + std::to_string(image) + "," +
                          std::to_string(text) + ")");
    }
  }

  PairOracleRecord query(ItemId image, ItemId text) const override {
    auto it = table_.find({image, text});
    if (it == table_.end()) {
      throw CoverageError("pair table lacks (image " + std::to_string(image) +
                          ", text " + std::to_string(text) + ")");
    }
    return it->second;
  }

  std::size_t feature_dim() const override { return d_ss_; }
  std::string backend() const override { return "table"; }
  std::size_t size() const { return table_.size(); }
  const std::map<std::pair<ItemId, ItemId>, PairOracleRecord>& records() const {
    return table_;
  }

 private:
  std::size_t d_ss_;
  std::map<std::pair<ItemId, ItemId>, PairOracleRecord> table_;
};

struct SyntheticOracleParams {
  double slope = 20.0;     // logit gain on latent cosine
  double threshold = 0.8;  // cosine at which the score crosses 0.5
  double noise = 0.1;      // std of per-pair logit noise
  std::size_t hidden = 32;
  std::size_t d_ss = 32;
  std::uint64_t seed = 0;
};

/// Score = logistic(slope * (cos(z_img, z_txt) - threshold) + noise), and the
/// feature is a seeded two-layer random map of [z_img; z_txt]. Outputs are
/// rounded to f32 so a table written from this oracle reproduces it exactly.
class SyntheticPairOracle final : public PairOracle {
 public:
  SyntheticPairOracle(SyntheticOracleParams params,
                      std::unordered_map<ItemId, std::vector<double>> image_latents,
                      std::unordered_map<ItemId, std::vector<double>> text_latents)
      : p_(params),
        image_latents_(std::move(image_latents)),
        text_latents_(std::move(text_latents)) {
    latent_dim_ = image_latents_.empty() ? 0 : image_latents_.begin()->second.size();
    Rng rng(derive_seed(p_.seed, 0x6f7261636c65ULL));
    const double b1 = 1.0 / std::sqrt(2.0 * double(latent_dim_));
    w1_ = Matrix<double>(2 * latent_dim_, p_.hidden);
    for (auto& v : w1_.data) v = rng.uniform(-b1, b1) * 3.0;
    const double b2 = 1.0 / std::sqrt(double(p_.hidden));
    w2_ = Matrix<double>(p_.hidden, p_.d_ss);
    for (auto& v : w2_.data) v = rng.uniform(-b2, b2) * 3.0;
  }

  PairOracleRecord query(ItemId image, ItemId text) const override {
    const auto& zi = latent(image_latents_, image, "image");
    const auto& zt = latent(text_latents_, text, "text");
    double dot = 0.0, ni = 0.0, nt = 0.0;
    for (std::size_t i = 0; i < zi.size(); ++i) {
      dot += zi[i] * zt[i];
      ni += zi[i] * zi[i];
      nt += zt[i] * zt[i];
    }
    const double cosine = dot / std::sqrt(ni * nt);
    Rng noise(derive_seed(p_.seed, image + 1, text + 1));
    const double logit = p_.slope * (cosine - p_.threshold) + p_.noise * noise.normal();
    PairOracleRecord rec;
    rec.score = static_cast<float>(1.0 / (1.0 + std::exp(-logit)));

    std::vector<double> hidden(p_.hidden, 0.0);
    for (std::size_t r = 0; r < 2 * latent_dim_; ++r) {
      const double x = r < latent_dim_ ? zi[r] : zt[r - latent_dim_];
      for (std::size_t c = 0; c < p_.hidden; ++c) hidden[c] += x * w1_(r, c);
    }
    for (auto& h : hidden) h = std::tanh(h);
    rec.h_ss.assign(p_.d_ss, 0.0f);
    for (std::size_t c = 0; c < p_.d_ss; ++c) {
      double s = 0.0;
      for (std::size_t r = 0; r < p_.hidden; ++r) s += hidden[r] * w2_(r, c);
      rec.h_ss[c] = static_cast<float>(s);
    }
    return rec;
  }

  std::size_t feature_dim() const override { return p_.d_ss; }
  std::string backend() const override { return "synthetic"; }
  const SyntheticOracleParams& params() const { return p_; }

 private:
  static const std::vector<double>& latent(
      const std::unordered_map<ItemId, std::vector<double>>& m, ItemId id,
      const char* side) {
    auto it = m.find(id);
    if (it == m.end()) {
      throw IngestionError(std::string("synthetic oracle has no ") + side +
                           " latent for id " + std::to_string(id));
    }
    return it->second;
  }

  SyntheticOracleParams p_;
  std::unordered_map<ItemId, std::vector<double>> image_latents_;
  std::unordered_map<ItemId, std::vector<double>> text_latents_;
  std::size_t latent_dim_ = 0;
  Matrix<double> w1_;
  Matrix<double> w2_;
};

// ---------------------------------------------------------------------------
// Target construction

template <class Real>
struct DualTargets {
  Matrix<Real> image_rows;  // I_DS of the batch
  Matrix<Real> text_rows;   // T_DS of the batch
  Matrix<Real> i2t;
  Matrix<Real> t2i;
};

/// Batch-local dual-stream distributions; image i is paired with text i.
template <class Real>
DualTargets<Real> dual_stream_targets(const DualTeacherBundle<Real>& bundle,
                                      std::span<const ItemId> image_ids,
                                      std::span<const ItemId> text_ids) {
  DualTargets<Real> out;
  out.image_rows = bundle.image_rows(image_ids);
  out.text_rows = bundle.text_rows(text_ids);
  const Real tau = static_cast<Real>(bundle.tau);
  out.i2t = similarity_distribution(out.image_rows, out.text_rows, tau);
  out.t2i = similarity_distribution(out.text_rows, out.image_rows, tau);
  return out;
}

/// Pair records keyed by batch-local (image row, text row).
using PairCache = std::map<Cell, PairOracleRecord>;

template <class Real>
struct SingleStreamTargets {
  SparseScoreMatrix<Real> i2t;  // rows: images, cols: texts
  SparseScoreMatrix<Real> t2i;  // rows: texts, cols: images
  PairCache cache;
  std::size_t queries = 0;
};

/// Rescores the top-k cells with the single-stream oracle. A pair selected
/// in both directions is queried once.
template <class Real>
SingleStreamTargets<Real> single_stream_targets(const PairOracle& oracle,
                                                const TopKIndexSet& p_i2t,
                                                const TopKIndexSet& p_t2i,
                                                std::span<const ItemId> image_ids,
                                                std::span<const ItemId> text_ids) {
  if (p_i2t.rows != image_ids.size() || p_i2t.cols != text_ids.size() ||
      p_t2i.rows != text_ids.size() || p_t2i.cols != image_ids.size()) {
    throw ContractError("single_stream_targets: index sets do not match the batch");
  }
  SingleStreamTargets<Real> out;
  auto fetch = [&](std::uint32_t img, std::uint32_t txt) -> const PairOracleRecord& {
    const Cell key{img, txt};
    auto it = out.cache.find(key);
    if (it == out.cache.end()) {
      auto rec = oracle.query(image_ids[img], text_ids[txt]);
      if (rec.h_ss.size() != oracle.feature_dim()) {
        throw ContractError("oracle returned feature of wrong width");
      }
      ++out.queries;
      it = out.cache.emplace(key, std::move(rec)).first;
    }
    return it->second;
  };
  std::vector<Real> vi2t, vt2i;
  vi2t.reserve(p_i2t.indices.size());
  vt2i.reserve(p_t2i.indices.size());
  for (std::size_t l = 0; l < p_i2t.rows; ++l)
    for (const auto m : p_i2t.row(l))
      vi2t.push_back(static_cast<Real>(fetch(static_cast<std::uint32_t>(l), m).score));
  for (std::size_t l = 0; l < p_t2i.rows; ++l)
    for (const auto m : p_t2i.row(l))
      vt2i.push_back(static_cast<Real>(fetch(m, static_cast<std::uint32_t>(l)).score));
  out.i2t = SparseScoreMatrix<Real>(p_i2t, std::move(vi2t));
  out.t2i = SparseScoreMatrix<Real>(p_t2i, std::move(vt2i));
  return out;
}

}  // namespace mcad
