#pragma once

#include <string>
#include <vector>

#include "dualnet/tensor.hpp"

namespace dualnet {

/// A trainable tensor together with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(Scalar(0)); }
};

/// Live, non-owning view over a model's parameters, in a stable order.
using ParamList = std::vector<Parameter*>;

inline void zero_grads(const ParamList& params) {
  for (auto* p : params) p->zero_grad();
}

inline ParamList concat(ParamList a, const ParamList& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

/// Owning snapshot of parameter values (and gradients). Copies are independent
/// of the source.
class ParamSet {
 public:
  ParamSet() = default;

  static ParamSet capture(const ParamList& live) {
    ParamSet set;
    set.items_.reserve(live.size());
    for (const auto* p : live) set.items_.push_back(*p);
    return set;
  }

  /// Writes values back into live parameters; names and shapes must line up.
  void restore(const ParamList& live) const {
    check_layout(live);
    for (std::size_t i = 0; i < items_.size(); ++i) live[i]->value = items_[i].value;
  }

  std::size_t size() const { return items_.size(); }
  const Parameter& operator[](std::size_t i) const { return items_[i]; }
  Parameter& operator[](std::size_t i) { return items_[i]; }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.value.size();
    return n;
  }

  /// (1 - beta) * a + beta * b. Exact at both endpoints.
  static ParamSet interpolate(const ParamSet& a, const ParamSet& b, Scalar beta) {
    a.check_layout(b);
    ParamSet out = a;
    for (std::size_t i = 0; i < a.items_.size(); ++i) {
      auto& dst = out.items_[i].value;
      const auto& bv = b.items_[i].value;
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = (Scalar(1) - beta) * dst[k] + beta * bv[k];
    }
    return out;
  }

  /// this += alpha * x (values only).
  void axpy(Scalar alpha, const ParamSet& x) {
    check_layout(x);
    for (std::size_t i = 0; i < items_.size(); ++i) {
      auto& dst = items_[i].value;
      const auto& src = x.items_[i].value;
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += alpha * src[k];
    }
  }

  /// Euclidean distance between the value vectors.
  static Scalar distance(const ParamSet& a, const ParamSet& b) {
    a.check_layout(b);
    long double acc = 0;
    for (std::size_t i = 0; i < a.items_.size(); ++i) {
      for (std::size_t k = 0; k < a.items_[i].value.size(); ++k) {
        const long double d = a.items_[i].value[k] - b.items_[i].value[k];
        acc += d * d;
      }
    }
    return static_cast<Scalar>(std::sqrt(acc));
  }

 private:
  void check_layout(const ParamSet& other) const {
    if (other.items_.size() != items_.size()) throw ShapeError("parameter sets differ in length");
    for (std::size_t i = 0; i < items_.size(); ++i) {
      require_same_shape(items_[i].value, other.items_[i].value, items_[i].name.c_str());
    }
  }
  void check_layout(const ParamList& live) const {
    if (live.size() != items_.size()) throw ShapeError("parameter list differs in length");
    for (std::size_t i = 0; i < items_.size(); ++i) {
      require_same_shape(items_[i].value, live[i]->value, items_[i].name.c_str());
    }
  }

  std::vector<Parameter> items_;
};

}  // namespace dualnet
