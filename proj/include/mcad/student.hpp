#pragma once

#include <cmath>
#include <string>

#include "mcad/distmath.hpp"

namespace mcad {

struct StudentConfig {
  std::size_t image_raw_dim = 32;
  std::size_t text_raw_dim = 32;
  std::size_t dim = 64;
  std::size_t hidden = 128;
  std::size_t depth = 2;
  Activation activation = Activation::tanh;
  double tau_init = 0.07;
  double tau_min = 0.01;
  double tau_max = 1.0;

  MlpShape image_shape() const { return shape(image_raw_dim); }
  MlpShape text_shape() const { return shape(text_raw_dim); }

 private:
  MlpShape shape(std::size_t in) const {
    MlpShape s;
    s.activation = activation;
    s.widths.push_back(in);
    for (std::size_t i = 1; i < depth; ++i) s.widths.push_back(hidden);
    s.widths.push_back(dim);
    return s;
  }
};

/// Dual-encoder student over pre-extracted raw vectors. Parameters live in a
/// shared ParamStore under the `student.` prefix.
class Student {
 public:
  static constexpr const char* kImagePrefix = "student.image";
  static constexpr const char* kTextPrefix = "student.text";
  static constexpr const char* kLogTau = "student.log_tau";

  Student() = default;
  explicit Student(StudentConfig cfg) : cfg_(cfg) {
    if (cfg_.depth < 1) throw ContractError("student depth must be >= 1");
  }

  const StudentConfig& config() const { return cfg_; }

  template <class Real>
  void register_params(ParamStore<Real>& store, Rng& rng) const {
    register_mlp(store, kImagePrefix, cfg_.image_shape(), rng);
    register_mlp(store, kTextPrefix, cfg_.text_shape(), rng);
    store.add(kLogTau, Matrix<Real>(1, 1, static_cast<Real>(std::log(cfg_.tau_init))),
              false);
  }

  /// MLP then row-wise l2 normalization.
  template <class Real>
  Tensor<Real> encode_images(Graph<Real>& g, ParamStore<Real>& store,
                             const Tensor<Real>& raw) const {
    return l2_normalize_rows(mlp_forward(g, store, kImagePrefix, cfg_.image_shape(), raw));
  }

  template <class Real>
  Tensor<Real> encode_texts(Graph<Real>& g, ParamStore<Real>& store,
                            const Tensor<Real>& raw) const {
    return l2_normalize_rows(mlp_forward(g, store, kTextPrefix, cfg_.text_shape(), raw));
  }

  template <class Real>
  Tensor<Real> tau(Graph<Real>& g, ParamStore<Real>& store) const {
    return exp(g.param(store.at(kLogTau)));
  }

  /// Keeps the temperature inside [tau_min, tau_max].
  template <class Real>
  void clamp_tau(ParamStore<Real>& store) const {
    auto& v = store.at(kLogTau).value.data[0];
    const Real lo = static_cast<Real>(std::log(cfg_.tau_min));
    const Real hi = static_cast<Real>(std::log(cfg_.tau_max));
    v = std::clamp(v, lo, hi);
  }

  std::size_t parameter_count() const {
    std::size_t n = 1;
    for (const auto& s : {cfg_.image_shape(), cfg_.text_shape()})
      for (std::size_t i = 0; i + 1 < s.widths.size(); ++i)
        n += s.widths[i] * s.widths[i + 1] + s.widths[i + 1];
    return n;
  }

 private:
  StudentConfig cfg_;
};

template <class Real>
struct DistPair {
  Tensor<Real> i2t;
  Tensor<Real> t2i;
};

/// softmax(I T^T / tau) and softmax(T I^T / tau).
template <class Real>
DistPair<Real> student_distributions(const Tensor<Real>& images,
                                     const Tensor<Real>& texts,
                                     const Tensor<Real>& tau) {
  return {similarity_distribution(images, texts, tau),
          similarity_distribution(texts, images, tau)};
}

}  // namespace mcad
