#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualnet/tensor.hpp"

namespace dualnet {

/// Loss value with its gradient w.r.t. the first (trainable) argument.
struct LossResult {
  Scalar loss = 0;
  Tensor grad;
};

namespace detail {

/// Views a [K] or [N, K] logit tensor as rows.
inline std::pair<std::size_t, std::size_t> rows_cols(const Tensor& logits) {
  if (logits.rank() == 1) return {1, logits.dim(0)};
  if (logits.rank() == 2) return {logits.dim(0), logits.dim(1)};
  throw ShapeError("logits must be [K] or [N, K], got " + to_string(logits.shape()));
}

inline void softmax_row(const Scalar* in, Scalar* out, std::size_t k, Scalar tau) {
  Scalar mx = in[0];
  for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, in[j]);
  Scalar sum = 0;
  for (std::size_t j = 0; j < k; ++j) {
    out[j] = std::exp((in[j] - mx) / tau);
    sum += out[j];
  }
  for (std::size_t j = 0; j < k; ++j) out[j] /= sum;
}

/// log softmax(in / tau) for one row.
inline void log_softmax_row(const Scalar* in, Scalar* out, std::size_t k, Scalar tau) {
  Scalar mx = in[0];
  for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, in[j]);
  Scalar sum = 0;
  for (std::size_t j = 0; j < k; ++j) sum += std::exp((in[j] - mx) / tau);
  const Scalar lse = std::log(sum);
  for (std::size_t j = 0; j < k; ++j) out[j] = (in[j] - mx) / tau - lse;
}

inline void require_tau(Scalar tau) {
  if (!(tau > 0)) throw std::invalid_argument("temperature must be positive, got " + std::to_string(tau));
}

}  // namespace detail

/// Row-wise softmax(logits / tau), max-subtracted.
inline Tensor softmax_with_temperature(const Tensor& logits, Scalar tau) {
  detail::require_tau(tau);
  auto [n, k] = detail::rows_cols(logits);
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < n; ++i) detail::softmax_row(logits.data() + i * k, out.data() + i * k, k, tau);
  return out;
}

/// Mean cross-entropy of softmax(logits) against hard labels; gradient is
/// (softmax - one_hot) / N.
inline LossResult cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  auto [n, k] = detail::rows_cols(logits);
  if (labels.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  }
  LossResult r{0, Tensor(logits.shape())};
  std::vector<Scalar> logp(k);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[i]) + " out of range for " +
                              std::to_string(k) + " classes");
    }
    detail::log_softmax_row(logits.data() + i * k, logp.data(), k, Scalar(1));
    r.loss -= logp[labels[i]];
    for (std::size_t j = 0; j < k; ++j) {
      r.grad[i * k + j] = (std::exp(logp[j]) - (j == labels[i] ? Scalar(1) : Scalar(0))) / static_cast<Scalar>(n);
    }
  }
  r.loss /= static_cast<Scalar>(n);
  return r;
}

inline LossResult cross_entropy(const Tensor& logits, std::size_t label) {
  const std::size_t labels[] = {label};
  return cross_entropy(logits, labels);
}

/// Mean over rows of KL( softmax(q/tau) || softmax(p/tau) ): q is the stored
/// target (snapshot), p the current prediction. Gradient flows into p only:
/// d/dp = (softmax(p/tau) - softmax(q/tau)) / (tau N).
inline LossResult kl_divergence(const Tensor& p_logits, const Tensor& q_logits, Scalar tau) {
  detail::require_tau(tau);
  require_same_shape(p_logits, q_logits, "kl_divergence");
  auto [n, k] = detail::rows_cols(p_logits);
  LossResult r{0, Tensor(p_logits.shape())};
  std::vector<Scalar> logp(k), logq(k);
  for (std::size_t i = 0; i < n; ++i) {
    detail::log_softmax_row(p_logits.data() + i * k, logp.data(), k, tau);
    detail::log_softmax_row(q_logits.data() + i * k, logq.data(), k, tau);
    Scalar row = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const Scalar q = std::exp(logq[j]);
      row += q * (logq[j] - logp[j]);
      r.grad[i * k + j] = (std::exp(logp[j]) - q) / (tau * static_cast<Scalar>(n));
    }
    r.loss += std::max(row, Scalar(0));
  }
  r.loss /= static_cast<Scalar>(n);
  return r;
}

/// Mean over rows of the mean squared logit difference (DER++ replay term).
inline LossResult logit_mse(const Tensor& p_logits, const Tensor& target) {
  require_same_shape(p_logits, target, "logit_mse");
  auto [n, k] = detail::rows_cols(p_logits);
  LossResult r{0, Tensor(p_logits.shape())};
  const auto denom = static_cast<Scalar>(n * k);
  for (std::size_t i = 0; i < p_logits.size(); ++i) {
    const Scalar d = p_logits[i] - target[i];
    r.loss += d * d;
    r.grad[i] = Scalar(2) * d / denom;
  }
  r.loss /= denom;
  return r;
}

}  // namespace dualnet
