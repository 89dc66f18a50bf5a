#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "dualnet/losses.hpp"
#include "dualnet/tensor.hpp"

namespace dualnet {

struct BarlowConfig {
  Scalar lambda = Scalar(2e-3);  ///< off-diagonal redundancy weight

  void validate() const {
    if (!(lambda > 0)) throw std::invalid_argument("Barlow Twins lambda must be > 0");
  }
};

inline constexpr Scalar kCorrelationEps = Scalar(1e-12);

namespace detail {

struct CorrelationParts {
  std::size_t b = 0, d = 0;
  std::vector<Scalar> dot;     // [d, d] sum_b a_bi b_bj
  std::vector<Scalar> norm_a;  // [d]
  std::vector<Scalar> norm_b;  // [d]
};

inline CorrelationParts correlation_parts(const Tensor& za, const Tensor& zb) {
  require_same_shape(za, zb, "cross_correlation");
  if (za.rank() != 2) throw ShapeError("cross_correlation: embeddings must be [b, d], got " + to_string(za.shape()));
  CorrelationParts parts{za.dim(0), za.dim(1), {}, {}, {}};
  if (parts.b < 2) throw std::invalid_argument("cross_correlation: batch size must be >= 2");
  const std::size_t b = parts.b, d = parts.d;
  parts.dot.assign(d * d, 0);
  parts.norm_a.assign(d, 0);
  parts.norm_b.assign(d, 0);
  for (std::size_t s = 0; s < b; ++s) {
    const Scalar* ra = za.data() + s * d;
    const Scalar* rb = zb.data() + s * d;
    for (std::size_t i = 0; i < d; ++i) {
      parts.norm_a[i] += ra[i] * ra[i];
      parts.norm_b[i] += rb[i] * rb[i];
      for (std::size_t j = 0; j < d; ++j) parts.dot[i * d + j] += ra[i] * rb[j];
    }
  }
  for (std::size_t i = 0; i < d; ++i) {
    parts.norm_a[i] = std::sqrt(parts.norm_a[i]);
    parts.norm_b[i] = std::sqrt(parts.norm_b[i]);
  }
  return parts;
}

}  // namespace detail

/// C_ij = sum_b za_bi zb_bj / (||za_:i|| ||zb_:j|| + eps). No mean-centering.
inline Tensor cross_correlation(const Tensor& za, const Tensor& zb) {
  const auto parts = detail::correlation_parts(za, zb);
  const std::size_t d = parts.d;
  Tensor c({d, d});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      c[i * d + j] = parts.dot[i * d + j] / (parts.norm_a[i] * parts.norm_b[j] + kCorrelationEps);
  return c;
}

/// sum_i (1 - C_ii)^2 + lambda sum_{i != j} C_ij^2, with its gradient in C.
inline LossResult barlow_twins_loss(const Tensor& c, Scalar lambda) {
  if (c.rank() != 2 || c.dim(0) != c.dim(1)) {
    throw ShapeError("barlow_twins_loss: correlation matrix must be square, got " + to_string(c.shape()));
  }
  const std::size_t d = c.dim(0);
  LossResult r{0, Tensor(c.shape())};
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const Scalar v = c[i * d + j];
      if (i == j) {
        r.loss += (Scalar(1) - v) * (Scalar(1) - v);
        r.grad[i * d + j] = Scalar(-2) * (Scalar(1) - v);
      } else {
        r.loss += lambda * v * v;
        r.grad[i * d + j] = Scalar(2) * lambda * v;
      }
    }
  return r;
}

struct BarlowResult {
  Scalar loss = 0;
  Tensor correlation;
  Tensor grad_a;
  Tensor grad_b;
};

/// Loss of two embedding batches, differentiated back through the
/// correlation normalisation into both embeddings.
inline BarlowResult barlow_twins(const Tensor& za, const Tensor& zb, Scalar lambda) {
  const auto parts = detail::correlation_parts(za, zb);
  const std::size_t b = parts.b, d = parts.d;
  BarlowResult out;
  out.correlation = Tensor({d, d});
  std::vector<Scalar> denom(d * d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      denom[i * d + j] = parts.norm_a[i] * parts.norm_b[j] + kCorrelationEps;
      out.correlation[i * d + j] = parts.dot[i * d + j] / denom[i * d + j];
    }
  const LossResult lr = barlow_twins_loss(out.correlation, lambda);
  out.loss = lr.loss;

  // dC_ij/d dot_ij = 1/D_ij; dC_ij/d na_i = -dot_ij nb_j / D_ij^2; likewise for nb_j.
  std::vector<Scalar> coef(d * d), shrink_a(d, 0), shrink_b(d, 0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t ij = i * d + j;
      const Scalar g = lr.grad[ij];
      coef[ij] = g / denom[ij];
      const Scalar common = g * parts.dot[ij] / (denom[ij] * denom[ij]);
      shrink_a[i] += common * parts.norm_b[j];
      shrink_b[j] += common * parts.norm_a[i];
    }
  out.grad_a = Tensor(za.shape());
  out.grad_b = Tensor(zb.shape());
  for (std::size_t s = 0; s < b; ++s) {
    const Scalar* ra = za.data() + s * d;
    const Scalar* rb = zb.data() + s * d;
    Scalar* ga = out.grad_a.data() + s * d;
    Scalar* gb = out.grad_b.data() + s * d;
    for (std::size_t i = 0; i < d; ++i) {
      Scalar acc = 0;
      for (std::size_t j = 0; j < d; ++j) acc += coef[i * d + j] * rb[j];
      ga[i] = acc - (parts.norm_a[i] > 0 ? ra[i] / parts.norm_a[i] * shrink_a[i] : Scalar(0));
    }
    for (std::size_t j = 0; j < d; ++j) {
      Scalar acc = 0;
      for (std::size_t i = 0; i < d; ++i) acc += coef[i * d + j] * ra[i];
      gb[j] = acc - (parts.norm_b[j] > 0 ? rb[j] / parts.norm_b[j] * shrink_b[j] : Scalar(0));
    }
  }
  return out;
}

}  // namespace dualnet
