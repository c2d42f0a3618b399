#pragma once

// Similarity-distribution algebra shared by every loss: temperature-scaled
// softmax similarity, row-wise KL, top-k selection and gathering, and the
// ratio-preserving L1 row normalization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mcad/diffcore.hpp"

namespace mcad {

/// Probabilities are clamped to this floor before taking logarithms.
inline constexpr double kKlFloor = 1e-8;

/// Per-row column selections, best first.
struct TopKIndexSet {
  std::size_t rows = 0;
  std::size_t cols = 0;  // column range the indices refer to
  std::size_t k = 0;
  std::vector<std::uint32_t> indices;  // rows * k, row-major

  std::span<const std::uint32_t> row(std::size_t r) const {
    return {indices.data() + r * k, k};
  }

  bool contains(std::size_t r, std::uint32_t c) const {
    const auto rr = row(r);
    return std::find(rr.begin(), rr.end(), c) != rr.end();
  }

  friend bool operator==(const TopKIndexSet&, const TopKIndexSet&) = default;
};

/// Scores defined only on the cells of a TopKIndexSet. Reading anything
/// else is a contract error.
template <class Real>
class SparseScoreMatrix {
 public:
  SparseScoreMatrix() = default;
  SparseScoreMatrix(TopKIndexSet defined, std::vector<Real> values)
      : defined_(std::move(defined)), values_(std::move(values)) {
    if (values_.size() != defined_.indices.size()) {
      throw ContractError("sparse score matrix: " +
                          std::to_string(values_.size()) + " values for " +
                          std::to_string(defined_.indices.size()) + " cells");
    }
    for (const Real v : values_) {
      if (!(v >= Real(0) && v <= Real(1))) {
        throw ContractError("sparse score matrix: score " + std::to_string(v) +
                            " outside [0,1]");
      }
    }
  }

  std::size_t rows() const { return defined_.rows; }
  std::size_t cols() const { return defined_.cols; }
  const TopKIndexSet& defined() const { return defined_; }
  const std::vector<Real>& values() const { return values_; }

  Real at(std::size_t r, std::size_t c) const {
    if (r < defined_.rows) {
      const auto rr = defined_.row(r);
      for (std::size_t j = 0; j < rr.size(); ++j)
        if (rr[j] == c) return values_[r * defined_.k + j];
    }
    throw ContractError("sparse score matrix: entry (" + std::to_string(r) +
                        "," + std::to_string(c) + ") is undefined");
  }

  friend bool operator==(const SparseScoreMatrix&, const SparseScoreMatrix&) = default;

 private:
  TopKIndexSet defined_;
  std::vector<Real> values_;
};

// ---------------------------------------------------------------------------
// Validators

template <class Real>
void require_unit_rows(const Matrix<Real>& m, double tol, const std::string& what) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    double ss = 0.0;
    for (const Real v : m.row(r)) ss += double(v) * double(v);
    if (std::abs(std::sqrt(ss) - 1.0) > tol) {
      throw ContractError(what + ": row " + std::to_string(r) + " has norm " +
                          std::to_string(std::sqrt(ss)));
    }
  }
}

template <class Real>
void require_distribution(const Matrix<Real>& m, double tol, const std::string& what) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    double s = 0.0;
    for (const Real v : m.row(r)) {
      if (v < Real(0)) throw ContractError(what + ": negative probability");
      s += double(v);
    }
    if (std::abs(s - 1.0) > tol) {
      throw ContractError(what + ": row " + std::to_string(r) + " sums to " +
                          std::to_string(s));
    }
  }
}

// ---------------------------------------------------------------------------
// Differentiable forms

/// softmax(logits / tau) row-wise.
template <class Real>
Tensor<Real> tempered_softmax(const Tensor<Real>& logits, const Tensor<Real>& tau) {
  if (tau.item() <= Real(0)) {
    throw ContractError("temperature must be positive, got " +
                        std::to_string(tau.item()));
  }
  return row_softmax(div_scalar(logits, tau));
}

/// softmax over columns of (I T^T) / tau.
template <class Real>
Tensor<Real> similarity_distribution(const Tensor<Real>& images,
                                     const Tensor<Real>& texts,
                                     const Tensor<Real>& tau) {
  if (images.cols() != texts.cols()) {
    throw ContractError("similarity_distribution: dimension mismatch " +
                        shape_str(images.value()) + " vs " +
                        shape_str(texts.value()));
  }
  return tempered_softmax(matmul_nt(images, texts), tau);
}

template <class Real>
Tensor<Real> similarity_distribution(const Tensor<Real>& images,
                                     const Tensor<Real>& texts, Real tau) {
  return similarity_distribution(images, texts, images.graph().scalar(tau));
}

/// sum_l KL(D_l || target_l) with both operands floored at kKlFloor inside
/// the logarithm.
template <class Real>
Tensor<Real> kl_rows(const Tensor<Real>& dist, const Tensor<Real>& target) {
  if (dist.rows() != target.rows() || dist.cols() != target.cols()) {
    throw ContractError("kl_rows: shape mismatch " + shape_str(dist.value()) +
                        " vs " + shape_str(target.value()));
  }
  const Real floor = static_cast<Real>(kKlFloor);
  auto log_ratio = sub(log(clamp_min(dist, floor)), log(clamp_min(target, floor)));
  return sum(mul(dist, log_ratio));
}

/// D[l, P[l][j]] -> [n,k]
template <class Real>
Tensor<Real> gather_topk(const Tensor<Real>& dist, const TopKIndexSet& p) {
  if (p.rows != dist.rows() || p.cols != dist.cols()) {
    throw ContractError("gather_topk: index set over " +
                        shape_str(p.rows, p.cols) + " applied to " +
                        shape_str(dist.value()));
  }
  return gather_cols(dist, std::span<const std::uint32_t>(p.indices), p.k);
}

/// Each row divided by its sum. A row summing to zero is a contract error.
template <class Real>
Tensor<Real> l1_normalize_rows(const Tensor<Real>& m) {
  const auto& v = m.value();
  for (std::size_t r = 0; r < v.rows; ++r) {
    Real s = Real(0);
    for (const Real x : v.row(r)) {
      if (x < Real(0)) {
        throw ContractError("l1_normalize_rows: negative entry in row " +
                            std::to_string(r));
      }
      s += x;
    }
    if (s <= Real(0)) {
      throw ContractError("l1_normalize_rows: row " + std::to_string(r) +
                          " sums to zero");
    }
  }
  return div_by_col(m, row_sum(m));
}

// ---------------------------------------------------------------------------
// Value forms

/// Per row, the k largest entries, best first; ties go to the lower column.
template <class Real>
TopKIndexSet topk_indices(const Matrix<Real>& dist, std::size_t k) {
  if (k < 1 || k > dist.cols) {
    throw ContractError("topk_indices: k=" + std::to_string(k) +
                        " must lie in [1, batch size " +
                        std::to_string(dist.cols) + "]");
  }
  TopKIndexSet out{dist.rows, dist.cols, k, {}};
  out.indices.reserve(dist.rows * k);
  std::vector<std::uint32_t> order(dist.cols);
  for (std::size_t r = 0; r < dist.rows; ++r) {
    std::iota(order.begin(), order.end(), 0u);
    const auto row = dist.row(r);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                      order.end(), [&](std::uint32_t a, std::uint32_t b) {
                        return row[a] > row[b] || (row[a] == row[b] && a < b);
                      });
    out.indices.insert(out.indices.end(), order.begin(),
                       order.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return out;
}

/// Scores at P, which must equal the matrix's defined set.
template <class Real>
Matrix<Real> gather_topk(const SparseScoreMatrix<Real>& scores,
                         const TopKIndexSet& p) {
  Matrix<Real> out(p.rows, p.k);
  if (p == scores.defined()) {
    out.data = scores.values();
    return out;
  }
  for (std::size_t r = 0; r < p.rows; ++r)
    for (std::size_t j = 0; j < p.k; ++j) out(r, j) = scores.at(r, p.row(r)[j]);
  return out;
}

template <class Real>
Matrix<Real> similarity_distribution(const Matrix<Real>& images,
                                     const Matrix<Real>& texts, Real tau) {
  Graph<Real> g;
  return similarity_distribution(g.constant(images), g.constant(texts), tau).value();
}

template <class Real>
Real kl_rows(const Matrix<Real>& dist, const Matrix<Real>& target) {
  Graph<Real> g;
  return kl_rows(g.constant(dist), g.constant(target)).item();
}

template <class Real>
Matrix<Real> l1_normalize_rows(const Matrix<Real>& m) {
  Graph<Real> g;
  return l1_normalize_rows(g.constant(m)).value();
}

template <class Real>
Matrix<Real> softmax_rows(const Matrix<Real>& m) {
  Graph<Real> g;
  return row_softmax(g.constant(m)).value();
}

}  // namespace mcad
