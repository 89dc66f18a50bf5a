#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualnet/params.hpp"

namespace dualnet {

struct SgdConfig {
  Scalar lr = Scalar(0.03);
  Scalar momentum = 0;

  void validate() const {
    if (!(lr >= 0)) throw std::invalid_argument("sgd lr must be non-negative");
    if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("sgd momentum must lie in [0, 1)");
  }
};

/// p <- p - lr * grad(p), then clears the gradients.
inline void sgd_step(const ParamList& params, Scalar lr) {
  for (auto* p : params) {
    if (p->grad.shape() != p->value.shape()) throw std::logic_error("sgd_step: missing gradient for " + p->name);
    for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] -= lr * p->grad[i];
    p->zero_grad();
  }
}

/// SGD with optional heavy-ball momentum; velocity buffers follow the
/// parameter list and are re-created when a parameter changes shape.
class Sgd {
 public:
  explicit Sgd(SgdConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  void step(const ParamList& params) {
    if (cfg_.momentum == 0) {
      sgd_step(params, cfg_.lr);
      return;
    }
    if (velocity_.size() != params.size()) velocity_.resize(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto* p = params[k];
      if (velocity_[k].shape() != p->value.shape()) velocity_[k] = Tensor(p->value.shape());
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        velocity_[k][i] = cfg_.momentum * velocity_[k][i] + p->grad[i];
        p->value[i] -= cfg_.lr * velocity_[k][i];
      }
      p->zero_grad();
    }
  }

  const SgdConfig& config() const { return cfg_; }

 private:
  SgdConfig cfg_;
  std::vector<Tensor> velocity_;
};

struct LookaheadConfig {
  std::size_t k = 3;          ///< inner SGD steps
  Scalar epsilon = Scalar(3e-4);  ///< inner SGD learning rate
  Scalar beta = Scalar(0.5);      ///< outer interpolation rate

  void validate() const {
    if (k < 1) throw std::invalid_argument("look-ahead K must be >= 1");
    if (!(epsilon > 0)) throw std::invalid_argument("look-ahead epsilon must be > 0");
    if (!(beta > 0 && beta <= 1)) throw std::invalid_argument("look-ahead beta must lie in (0, 1]");
  }
};

/// Evaluates a loss at the current parameter values and accumulates its
/// gradient into them. Called once per inner step.
using LossClosure = std::function<Scalar()>;

/// One look-ahead round: shadow weights start at the current values, take K
/// SGD steps on the closure's loss, then the live weights move a fraction
/// beta of the way towards them. A non-finite loss restores the pre-round
/// values and throws.
inline void lookahead_round(const ParamList& params, const LossClosure& loss, const LookaheadConfig& cfg) {
  cfg.validate();
  const ParamSet start = ParamSet::capture(params);
  for (std::size_t step = 0; step < cfg.k; ++step) {
    zero_grads(params);
    const Scalar value = loss();
    bool finite = std::isfinite(value);
    for (const auto* p : params) finite = finite && p->grad.all_finite();
    if (!finite) {
      start.restore(params);
      zero_grads(params);
      throw NumericError("look-ahead round aborted: non-finite loss at inner step " + std::to_string(step + 1));
    }
    sgd_step(params, cfg.epsilon);
  }
  const ParamSet shadow = ParamSet::capture(params);
  ParamSet::interpolate(start, shadow, cfg.beta).restore(params);
}

}  // namespace dualnet
