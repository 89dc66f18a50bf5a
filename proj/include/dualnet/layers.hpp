#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dualnet/params.hpp"
#include "dualnet/rng.hpp"
#include "dualnet/tensor.hpp"

namespace dualnet {

enum class Mode { train, eval };

enum class LayerKind { dense, conv2d, relu, maxpool2d, batchnorm2d, flatten, global_avg_pool, gate };

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::batchnorm2d: return "batchnorm2d";
    case LayerKind::flatten: return "flatten";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::gate: return "gate";
  }
  return "?";
}

/// Kind plus the hyper-parameters that kind reads. Unused fields are ignored.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in_features = 0;   // dense
  std::size_t out_features = 0;  // dense
  std::size_t in_channels = 0;   // conv2d, batchnorm2d
  std::size_t out_channels = 0;  // conv2d
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::optional<std::size_t> padding;  // default kernel / 2
  std::size_t pool = 2;
  bool bias = true;
  Scalar momentum = Scalar(0.1);
  Scalar eps = Scalar(1e-5);

  std::size_t pad() const { return padding.value_or(kernel / 2); }

  static LayerSpec dense(std::size_t in, std::size_t out, bool bias = true) {
    LayerSpec s;
    s.kind = LayerKind::dense;
    s.in_features = in;
    s.out_features = out;
    s.bias = bias;
    return s;
  }
  static LayerSpec conv2d(std::size_t in, std::size_t out, std::size_t kernel = 3, bool bias = true,
                          std::size_t stride = 1) {
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.in_channels = in;
    s.out_channels = out;
    s.kernel = kernel;
    s.bias = bias;
    s.stride = stride;
    return s;
  }
  static LayerSpec batchnorm2d(std::size_t channels) {
    LayerSpec s;
    s.kind = LayerKind::batchnorm2d;
    s.in_channels = channels;
    return s;
  }
  static LayerSpec maxpool2d(std::size_t window = 2) {
    LayerSpec s;
    s.kind = LayerKind::maxpool2d;
    s.pool = window;
    return s;
  }
  static LayerSpec of(LayerKind kind) {
    LayerSpec s;
    s.kind = kind;
    return s;
  }

  /// Output shape as a pure function of input shape. Throws on mismatch.
  Shape output_shape(const Shape& in) const {
    auto fail = [&](const std::string& why) {
      return ShapeError(std::string(to_string(kind)) + ": input shape " + dualnet::to_string(in) + " " + why);
    };
    switch (kind) {
      case LayerKind::dense:
        if (in.size() != 2 || in[1] != in_features) {
          throw fail("does not match declared [N, " + std::to_string(in_features) + "]");
        }
        return {in[0], out_features};
      case LayerKind::conv2d: {
        if (in.size() != 4 || in[1] != in_channels) {
          throw fail("does not match declared [N, " + std::to_string(in_channels) + ", H, W]");
        }
        const std::size_t p = pad();
        if (in[2] + 2 * p < kernel || in[3] + 2 * p < kernel) throw fail("is smaller than the kernel");
        return {in[0], out_channels, (in[2] + 2 * p - kernel) / stride + 1, (in[3] + 2 * p - kernel) / stride + 1};
      }
      case LayerKind::batchnorm2d:
        if (in.size() != 4 || in[1] != in_channels) {
          throw fail("does not match declared [N, " + std::to_string(in_channels) + ", H, W]");
        }
        return in;
      case LayerKind::maxpool2d:
        if (in.size() != 4 || in[2] < pool || in[3] < pool) throw fail("is not a poolable NCHW map");
        return {in[0], in[1], in[2] / pool, in[3] / pool};
      case LayerKind::flatten:
        if (in.size() < 2) throw fail("needs a batch axis");
        return {in[0], numel(in) / in[0]};
      case LayerKind::global_avg_pool:
        if (in.size() != 4) throw fail("is not NCHW");
        return {in[0], in[1]};
      case LayerKind::relu:
      case LayerKind::gate:
        return in;
    }
    return in;
  }
};

/// Reverse-mode layer. forward() records what backward() needs; backward()
/// returns the input gradient and adds into parameter gradients.
class Layer {
 public:
  explicit Layer(LayerSpec spec) : spec_(std::move(spec)) {}
  virtual ~Layer() = default;

  const LayerSpec& spec() const { return spec_; }

  Tensor forward(const Tensor& input, Mode mode) {
    const Shape out_shape = spec_.output_shape(input.shape());
    require_finite(input, to_string(spec_.kind));
    Tensor out = do_forward(input, mode);
    if (out.shape() != out_shape) throw ShapeError("internal: unexpected output shape");
    in_shape_ = input.shape();
    has_forward_ = true;
    return out;
  }

  Tensor backward(const Tensor& output_grad) {
    if (!has_forward_) throw std::logic_error(std::string(to_string(spec_.kind)) + ": backward without forward");
    const Shape expected = spec_.output_shape(in_shape_);
    if (output_grad.shape() != expected) {
      throw ShapeError(std::string(to_string(spec_.kind)) + ": output gradient shape " +
                       dualnet::to_string(output_grad.shape()) + " vs output " + dualnet::to_string(expected));
    }
    has_forward_ = false;
    return do_backward(output_grad);
  }

  virtual ParamList parameters() { return {}; }
  /// Non-trainable state that must round-trip through checkpoints.
  virtual std::vector<std::pair<std::string, Tensor*>> buffers() { return {}; }
  virtual std::unique_ptr<Layer> clone() const = 0;

 protected:
  virtual Tensor do_forward(const Tensor& input, Mode mode) = 0;
  virtual Tensor do_backward(const Tensor& output_grad) = 0;

  LayerSpec spec_;
  Shape in_shape_;
  bool has_forward_ = false;
};

namespace detail {

using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

template <typename Derived>
class LayerBase : public Layer {
 public:
  using Layer::Layer;
  std::unique_ptr<Layer> clone() const override {
    return std::make_unique<Derived>(static_cast<const Derived&>(*this));
  }
};

/// He-uniform style initialisation bound for fan_in.
inline void init_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in)) / std::sqrt(2.0);
  for (auto& v : t.values()) v = static_cast<Scalar>(rng.uniform(-bound, bound));
}

}  // namespace detail

class Dense final : public detail::LayerBase<Dense> {
 public:
  Dense(LayerSpec spec, Rng& rng)
      : LayerBase(std::move(spec)),
        weight_("weight", Tensor({spec_.out_features, spec_.in_features})),
        bias_("bias", Tensor({spec_.out_features})) {
    detail::init_uniform(weight_.value, spec_.in_features, rng);
  }

  ParamList parameters() override {
    if (spec_.bias) return {&weight_, &bias_};
    return {&weight_};
  }

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

  /// Appends output rows (used by the growing task-free head).
  void grow_outputs(std::size_t extra, Rng& rng) {
    Tensor w({spec_.out_features + extra, spec_.in_features});
    std::copy(weight_.value.storage().begin(), weight_.value.storage().end(), w.data());
    Tensor fresh({extra, spec_.in_features});
    detail::init_uniform(fresh, spec_.in_features, rng);
    std::copy(fresh.storage().begin(), fresh.storage().end(), w.data() + weight_.value.size());
    Tensor b({spec_.out_features + extra});
    std::copy(bias_.value.storage().begin(), bias_.value.storage().end(), b.data());
    spec_.out_features += extra;
    weight_ = Parameter(weight_.name, std::move(w));
    bias_ = Parameter(bias_.name, std::move(b));
    has_forward_ = false;
  }

 protected:
  Tensor do_forward(const Tensor& x, Mode) override {
    input_ = x;
    const std::size_t n = x.dim(0);
    Tensor out({n, spec_.out_features});
    detail::ConstMatMap X(x.data(), n, spec_.in_features);
    detail::ConstMatMap W(weight_.value.data(), spec_.out_features, spec_.in_features);
    detail::MatMap Y(out.data(), n, spec_.out_features);
    Y.noalias() = X * W.transpose();
    if (spec_.bias) {
      Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> b(bias_.value.data(), spec_.out_features);
      Y.rowwise() += b;
    }
    return out;
  }

  Tensor do_backward(const Tensor& gy) override {
    const std::size_t n = gy.dim(0);
    detail::ConstMatMap G(gy.data(), n, spec_.out_features);
    detail::ConstMatMap X(input_.data(), n, spec_.in_features);
    detail::ConstMatMap W(weight_.value.data(), spec_.out_features, spec_.in_features);
    detail::MatMap GW(weight_.grad.data(), spec_.out_features, spec_.in_features);
    GW.noalias() += G.transpose() * X;
    if (spec_.bias) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < spec_.out_features; ++o) bias_.grad[o] += gy[i * spec_.out_features + o];
    }
    Tensor gx(input_.shape());
    detail::MatMap GX(gx.data(), n, spec_.in_features);
    GX.noalias() = G * W;
    return gx;
  }

 private:
  Parameter weight_;
  Parameter bias_;
  Tensor input_;
};

/// 2-D convolution through im2col + GEMM.
class Conv2d final : public detail::LayerBase<Conv2d> {
 public:
  Conv2d(LayerSpec spec, Rng& rng)
      : LayerBase(std::move(spec)),
        weight_("weight", Tensor({spec_.out_channels, spec_.in_channels, spec_.kernel, spec_.kernel})),
        bias_("bias", Tensor({spec_.out_channels})) {
    if (spec_.kernel % 2 == 0) throw std::invalid_argument("conv2d kernel size must be odd");
    if (spec_.stride == 0) throw std::invalid_argument("conv2d stride must be positive");
    detail::init_uniform(weight_.value, spec_.in_channels * spec_.kernel * spec_.kernel, rng);
  }

  ParamList parameters() override {
    if (spec_.bias) return {&weight_, &bias_};
    return {&weight_};
  }

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

 protected:
  Tensor do_forward(const Tensor& x, Mode) override {
    const Shape out_shape = spec_.output_shape(x.shape());
    const std::size_t n = x.dim(0);
    geom_ = {x.dim(2), x.dim(3), out_shape[2], out_shape[3]};
    const std::size_t rows = spec_.in_channels * spec_.kernel * spec_.kernel;
    const std::size_t cols = geom_.oh * geom_.ow;
    columns_.assign(n * rows * cols, Scalar(0));
    Tensor out(out_shape);
    detail::ConstMatMap W(weight_.value.data(), spec_.out_channels, rows);
    for (std::size_t s = 0; s < n; ++s) {
      Scalar* col = columns_.data() + s * rows * cols;
      im2col(x.data() + s * x.stride0(), col);
      detail::MatMap Y(out.data() + s * out.stride0(), spec_.out_channels, cols);
      Y.noalias() = W * detail::ConstMatMap(col, rows, cols);
      if (spec_.bias) {
        for (std::size_t o = 0; o < spec_.out_channels; ++o) Y.row(o).array() += bias_.value[o];
      }
    }
    return out;
  }

  Tensor do_backward(const Tensor& gy) override {
    const std::size_t n = gy.dim(0);
    const std::size_t rows = spec_.in_channels * spec_.kernel * spec_.kernel;
    const std::size_t cols = geom_.oh * geom_.ow;
    detail::ConstMatMap W(weight_.value.data(), spec_.out_channels, rows);
    detail::MatMap GW(weight_.grad.data(), spec_.out_channels, rows);
    Tensor gx(in_shape_);
    std::vector<Scalar> gcol(rows * cols);
    for (std::size_t s = 0; s < n; ++s) {
      detail::ConstMatMap G(gy.data() + s * gy.stride0(), spec_.out_channels, cols);
      detail::ConstMatMap C(columns_.data() + s * rows * cols, rows, cols);
      GW.noalias() += G * C.transpose();
      if (spec_.bias) {
        for (std::size_t o = 0; o < spec_.out_channels; ++o) bias_.grad[o] += G.row(o).sum();
      }
      detail::MatMap GC(gcol.data(), rows, cols);
      GC.noalias() = W.transpose() * G;
      col2im(gcol.data(), gx.data() + s * gx.stride0());
    }
    return gx;
  }

 private:
  struct Geometry {
    std::size_t h = 0, w = 0, oh = 0, ow = 0;
  };

  template <typename Visit>
  void for_each_tap(Visit&& visit) const {
    const std::size_t k = spec_.kernel;
    const auto pad = static_cast<std::ptrdiff_t>(spec_.pad());
    const std::size_t cols = geom_.oh * geom_.ow;
    for (std::size_t c = 0; c < spec_.in_channels; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::size_t row = (c * k + ky) * k + kx;
          for (std::size_t oy = 0; oy < geom_.oh; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * spec_.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(geom_.h)) continue;
            for (std::size_t ox = 0; ox < geom_.ow; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * spec_.stride + kx) - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(geom_.w)) continue;
              visit(row * cols + oy * geom_.ow + ox, (c * geom_.h + iy) * geom_.w + ix);
            }
          }
        }
  }

  void im2col(const Scalar* img, Scalar* col) const {
    for_each_tap([&](std::size_t ci, std::size_t ii) { col[ci] = img[ii]; });
  }
  void col2im(const Scalar* col, Scalar* img) const {
    for_each_tap([&](std::size_t ci, std::size_t ii) { img[ii] += col[ci]; });
  }

  Parameter weight_;
  Parameter bias_;
  Geometry geom_;
  std::vector<Scalar> columns_;
};

class Relu final : public detail::LayerBase<Relu> {
 public:
  using LayerBase::LayerBase;

 protected:
  Tensor do_forward(const Tensor& x, Mode) override {
    Tensor out = x;
    for (auto& v : out.values()) v = v > Scalar(0) ? v : Scalar(0);
    output_ = out;
    return out;
  }
  Tensor do_backward(const Tensor& gy) override {
    Tensor gx = gy;
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (!(output_[i] > Scalar(0))) gx[i] = Scalar(0);
    return gx;
  }

 private:
  Tensor output_;
};

/// Elementwise 2*sigmoid(x): range (0, 2), value 1 at x = 0.
class Gate final : public detail::LayerBase<Gate> {
 public:
  using LayerBase::LayerBase;

 protected:
  Tensor do_forward(const Tensor& x, Mode) override {
    Tensor out = x;
    for (auto& v : out.values()) v = Scalar(2) / (Scalar(1) + std::exp(-v));
    output_ = out;
    return out;
  }
  Tensor do_backward(const Tensor& gy) override {
    // d/dx 2s(x) = 2 s (1 - s) = y (1 - y / 2)
    Tensor gx = gy;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= output_[i] * (Scalar(1) - output_[i] / Scalar(2));
    return gx;
  }

 private:
  Tensor output_;
};

class MaxPool2d final : public detail::LayerBase<MaxPool2d> {
 public:
  using LayerBase::LayerBase;

 protected:
  Tensor do_forward(const Tensor& x, Mode) override {
    Tensor out(spec_.output_shape(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oh = out.dim(2), ow = out.dim(3), k = spec_.pool;
    argmax_.assign(out.size(), 0);
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      const Scalar* src = x.data() + plane * h * w;
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          std::size_t best = (oy * k) * w + ox * k;
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t dx = 0; dx < k; ++dx) {
              const std::size_t idx = (oy * k + dy) * w + ox * k + dx;
              if (src[idx] > src[best]) best = idx;
            }
          const std::size_t o = plane * oh * ow + oy * ow + ox;
          out[o] = src[best];
          argmax_[o] = plane * h * w + best;
        }
    }
    return out;
  }
  Tensor do_backward(const Tensor& gy) override {
    Tensor gx(in_shape_);
    for (std::size_t o = 0; o < gy.size(); ++o) gx[argmax_[o]] += gy[o];
    return gx;
  }

 private:
  std::vector<std::size_t> argmax_;
};

/// Per-channel batch normalisation with affine scale/shift and running
/// statistics (unbiased variance in the running estimate).
class BatchNorm2d final : public detail::LayerBase<BatchNorm2d> {
 public:
  explicit BatchNorm2d(LayerSpec spec)
      : LayerBase(std::move(spec)),
        gamma_("gamma", Tensor({spec_.in_channels}, Scalar(1))),
        beta_("beta", Tensor({spec_.in_channels})),
        running_mean_({spec_.in_channels}),
        running_var_({spec_.in_channels}, Scalar(1)) {}

  ParamList parameters() override { return {&gamma_, &beta_}; }
  std::vector<std::pair<std::string, Tensor*>> buffers() override {
    return {{"running_mean", &running_mean_}, {"running_var", &running_var_}};
  }
  const Tensor& running_mean() const { return running_mean_; }
  const Tensor& running_var() const { return running_var_; }

 protected:
  Tensor do_forward(const Tensor& x, Mode mode) override {
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const std::size_t count = n * hw;
    mode_ = mode;
    mean_.assign(c, 0);
    inv_std_.assign(c, 0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      Scalar mean, var;
      if (mode == Mode::train) {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < hw; ++p) s += x[(i * c + ch) * hw + p];
        mean = static_cast<Scalar>(s / count);
        double ss = 0;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < hw; ++p) {
            const double d = x[(i * c + ch) * hw + p] - mean;
            ss += d * d;
          }
        var = static_cast<Scalar>(ss / count);
        const Scalar unbiased = count > 1 ? static_cast<Scalar>(ss / (count - 1)) : var;
        running_mean_[ch] = (Scalar(1) - spec_.momentum) * running_mean_[ch] + spec_.momentum * mean;
        running_var_[ch] = (Scalar(1) - spec_.momentum) * running_var_[ch] + spec_.momentum * unbiased;
      } else {
        mean = running_mean_[ch];
        var = running_var_[ch];
      }
      mean_[ch] = mean;
      inv_std_[ch] = Scalar(1) / std::sqrt(var + spec_.eps);
    }
    xhat_ = Tensor(x.shape());
    Tensor out(x.shape());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t idx = (i * c + ch) * hw + p;
          xhat_[idx] = (x[idx] - mean_[ch]) * inv_std_[ch];
          out[idx] = gamma_.value[ch] * xhat_[idx] + beta_.value[ch];
        }
    return out;
  }

  Tensor do_backward(const Tensor& gy) override {
    const std::size_t n = gy.dim(0), c = gy.dim(1), hw = gy.dim(2) * gy.dim(3);
    const auto count = static_cast<Scalar>(n * hw);
    Tensor gx(gy.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
      Scalar sum_g = 0, sum_gx = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t idx = (i * c + ch) * hw + p;
          sum_g += gy[idx];
          sum_gx += gy[idx] * xhat_[idx];
        }
      gamma_.grad[ch] += sum_gx;
      beta_.grad[ch] += sum_g;
      const Scalar g = gamma_.value[ch] * inv_std_[ch];
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t idx = (i * c + ch) * hw + p;
          if (mode_ == Mode::train) {
            gx[idx] = g * (gy[idx] - sum_g / count - xhat_[idx] * sum_gx / count);
          } else {
            gx[idx] = g * gy[idx];
          }
        }
    }
    return gx;
  }

 private:
  Parameter gamma_;
  Parameter beta_;
  Tensor running_mean_;
  Tensor running_var_;
  Mode mode_ = Mode::train;
  std::vector<Scalar> mean_;
  std::vector<Scalar> inv_std_;
  Tensor xhat_;
};

class Flatten final : public detail::LayerBase<Flatten> {
 public:
  using LayerBase::LayerBase;

 protected:
  Tensor do_forward(const Tensor& x, Mode) override { return x.reshaped(spec_.output_shape(x.shape())); }
  Tensor do_backward(const Tensor& gy) override { return gy.reshaped(in_shape_); }
};

class GlobalAvgPool final : public detail::LayerBase<GlobalAvgPool> {
 public:
  using LayerBase::LayerBase;

 protected:
  Tensor do_forward(const Tensor& x, Mode) override {
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out({n, c});
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      Scalar s = 0;
      for (std::size_t p = 0; p < hw; ++p) s += x[plane * hw + p];
      out[plane] = s / static_cast<Scalar>(hw);
    }
    return out;
  }
  Tensor do_backward(const Tensor& gy) override {
    Tensor gx(in_shape_);
    const std::size_t hw = in_shape_[2] * in_shape_[3];
    for (std::size_t plane = 0; plane < gy.size(); ++plane)
      for (std::size_t p = 0; p < hw; ++p) gx[plane * hw + p] = gy[plane] / static_cast<Scalar>(hw);
    return gx;
  }
};

inline std::unique_ptr<Layer> make_layer(const LayerSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case LayerKind::dense: return std::make_unique<Dense>(spec, rng);
    case LayerKind::conv2d: return std::make_unique<Conv2d>(spec, rng);
    case LayerKind::relu: return std::make_unique<Relu>(spec);
    case LayerKind::maxpool2d: return std::make_unique<MaxPool2d>(spec);
    case LayerKind::batchnorm2d: return std::make_unique<BatchNorm2d>(spec);
    case LayerKind::flatten: return std::make_unique<Flatten>(spec);
    case LayerKind::global_avg_pool: return std::make_unique<GlobalAvgPool>(spec);
    case LayerKind::gate: return std::make_unique<Gate>(spec);
  }
  throw std::invalid_argument("unknown layer kind");
}

/// Ordered stack of layers, deep-copyable.
class Sequential {
 public:
  explicit Sequential(std::string name = "net") : name_(std::move(name)) {}
  Sequential(const Sequential& other) : name_(other.name_) {
    layers_.reserve(other.layers_.size());
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
  }
  Sequential& operator=(const Sequential& other) {
    if (this != &other) *this = Sequential(other);
    return *this;
  }
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  Sequential& add(const LayerSpec& spec, Rng& rng) {
    auto layer = make_layer(spec, rng);
    for (auto* p : layer->parameters()) p->name = name_ + "." + std::to_string(layers_.size()) + "." + p->name;
    layers_.push_back(std::move(layer));
    return *this;
  }

  Tensor forward(Tensor x, Mode mode) {
    for (auto& l : layers_) x = l->forward(x, mode);
    return x;
  }
  Tensor backward(Tensor g) {
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  Shape output_shape(Shape in) const {
    for (const auto& l : layers_) in = l->spec().output_shape(in);
    return in;
  }

  ParamList parameters() {
    ParamList out;
    for (auto& l : layers_)
      for (auto* p : l->parameters()) out.push_back(p);
    return out;
  }

  std::vector<std::pair<std::string, Tensor*>> buffers() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      for (auto& [name, t] : layers_[i]->buffers()) out.emplace_back(name_ + "." + std::to_string(i) + "." + name, t);
    return out;
  }

  std::size_t size() const { return layers_.size(); }
  bool empty() const { return layers_.empty(); }
  Layer& operator[](std::size_t i) { return *layers_[i]; }
  const Layer& operator[](std::size_t i) const { return *layers_[i]; }

 private:
  std::string name_;
  std::vector<std::unique_ptr<Layer>> layers_;
};

}  // namespace dualnet
