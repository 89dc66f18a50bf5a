#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dualnet/barlow.hpp"
#include "dualnet/layers.hpp"
#include "dualnet/losses.hpp"
#include "dualnet/memory.hpp"
#include "dualnet/model.hpp"
#include "dualnet/trainer.hpp"

namespace dualnet {

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates probed per tensor (all of them when the tensor is smaller).
  std::size_t coords_per_tensor = 12;
  /// Floor on the denominator of the relative error, so that gradients that
  /// are zero up to rounding do not count as failures.
  double floor = 1e-6;
  double tolerance = 1e-4;
};

struct GradCheckReport {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0;
  std::string worst;

  bool passed(double tol) const { return checked > 0 && max_rel_error < tol; }
  void merge(const GradCheckReport& o) {
    checked += o.checked;
    if (o.max_rel_error >= max_rel_error) {
      max_rel_error = o.max_rel_error;
      worst = o.worst;
    }
  }
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central differences of `loss` against the gradients `forward_backward`
/// leaves in `params`. `loss` must be a deterministic function of the values.
inline GradCheckReport check_gradients(const std::string& name, const ParamList& params,
                                       const std::function<Scalar()>& loss,
                                       const std::function<void()>& forward_backward, Rng& rng,
                                       const GradCheckOptions& opt = {}) {
  zero_grads(params);
  forward_backward();
  std::vector<Tensor> analytic;
  for (const auto* p : params) analytic.push_back(p->grad);
  GradCheckReport rep{name, 0, 0, ""};
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    std::vector<std::size_t> coords(p.value.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > opt.coords_per_tensor) {
      rng.shuffle(std::span(coords));
      coords.resize(opt.coords_per_tensor);
    }
    for (auto i : coords) {
      const Scalar orig = p.value[i];
      p.value[i] = orig + static_cast<Scalar>(opt.step);
      const double up = loss();
      p.value[i] = orig - static_cast<Scalar>(opt.step);
      const double down = loss();
      p.value[i] = orig;
      const double numeric = (up - down) / (2 * opt.step);
      const double err = relative_error(analytic[k][i], numeric, opt.floor);
      ++rep.checked;
      if (err >= rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  zero_grads(params);
  return rep;
}

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<Scalar>(rng.uniform(lo, hi));
  return t;
}

inline Scalar dot(const Tensor& a, const Tensor& b) {
  Scalar s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Input + parameter gradients of one layer under the loss sum(r * layer(x)).
inline GradCheckReport check_layer(const std::string& name, Layer& layer, const Tensor& x, Mode mode, Rng& rng,
                                   const GradCheckOptions& opt) {
  Parameter input("input", x);
  const Tensor r = random_tensor(layer.spec().output_shape(x.shape()), rng);
  auto loss = [&]() { return dot(layer.forward(input.value, mode), r); };
  auto fb = [&]() {
    layer.forward(input.value, mode);
    const Tensor gx = layer.backward(r);
    for (std::size_t i = 0; i < gx.size(); ++i) input.grad[i] += gx[i];
  };
  ParamList params = layer.parameters();
  params.push_back(&input);
  return check_gradients(name, params, loss, fb, rng, opt);
}

/// Small architecture for gradient checks: two blocks on 8x8 inputs.
inline ArchConfig tiny_arch(bool batchnorm) {
  ArchConfig a;
  a.in_channels = 2;
  a.image_size = 8;
  a.widths = {8, 12};
  a.batchnorm = batchnorm;
  a.conv_bias = !batchnorm;
  a.fast_reduction = 8;
  a.projector_hidden = 7;
  a.projector_out = 5;
  return a;
}

}  // namespace detail

/// One report per layer kind.
inline std::vector<GradCheckReport> layer_gradchecks(std::uint64_t seed, const GradCheckOptions& opt = {}) {
  Rng rng(derive_seed(seed, "gradcheck.layers"));
  std::vector<GradCheckReport> out;
  {
    Dense d(LayerSpec::dense(5, 4), rng);
    out.push_back(detail::check_layer("dense", d, detail::random_tensor({3, 5}, rng), Mode::train, rng, opt));
  }
  {
    Conv2d c(LayerSpec::conv2d(2, 3, 3, true), rng);
    out.push_back(detail::check_layer("conv2d", c, detail::random_tensor({2, 2, 5, 5}, rng), Mode::train, rng, opt));
    Conv2d s(LayerSpec::conv2d(2, 3, 3, false, 2), rng);
    auto r = detail::check_layer("conv2d", s, detail::random_tensor({2, 2, 6, 6}, rng), Mode::train, rng, opt);
    out.back().merge(r);
  }
  {
    Relu relu(LayerSpec::of(LayerKind::relu));
    out.push_back(detail::check_layer("relu", relu, detail::random_tensor({2, 3, 4, 4}, rng), Mode::train, rng, opt));
  }
  {
    MaxPool2d pool(LayerSpec::maxpool2d(2));
    out.push_back(detail::check_layer("maxpool2d", pool, detail::random_tensor({2, 3, 4, 4}, rng), Mode::train, rng, opt));
  }
  {
    BatchNorm2d bn(LayerSpec::batchnorm2d(3));
    for (auto* p : bn.parameters())
      for (auto& v : p->value.values()) v += static_cast<Scalar>(rng.uniform(-0.5, 0.5));
    auto train = detail::check_layer("batchnorm2d", bn, detail::random_tensor({4, 3, 3, 3}, rng), Mode::train, rng, opt);
    auto eval = detail::check_layer("batchnorm2d", bn, detail::random_tensor({4, 3, 3, 3}, rng), Mode::eval, rng, opt);
    train.merge(eval);
    out.push_back(train);
  }
  {
    Flatten f(LayerSpec::of(LayerKind::flatten));
    out.push_back(detail::check_layer("flatten", f, detail::random_tensor({2, 3, 2, 2}, rng), Mode::train, rng, opt));
  }
  {
    GlobalAvgPool g(LayerSpec::of(LayerKind::global_avg_pool));
    out.push_back(detail::check_layer("global_avg_pool", g, detail::random_tensor({2, 3, 3, 3}, rng), Mode::train, rng, opt));
  }
  {
    Gate g(LayerSpec::of(LayerKind::gate));
    out.push_back(detail::check_layer("gate", g, detail::random_tensor({2, 3, 2, 2}, rng, -3, 3), Mode::train, rng, opt));
  }
  return out;
}

/// Barlow Twins through projector and backbone, w.r.t. the SSL parameters,
/// plus the loss alone w.r.t. both embeddings.
inline GradCheckReport barlow_gradcheck(std::uint64_t seed, const GradCheckOptions& opt = {}) {
  Rng rng(derive_seed(seed, "gradcheck.barlow"));
  const Scalar lambda = Scalar(2e-3);
  Parameter za("za", detail::random_tensor({6, 4}, rng)), zb("zb", detail::random_tensor({6, 4}, rng));
  auto direct = check_gradients(
      "barlow_twins", {&za, &zb}, [&]() { return barlow_twins(za.value, zb.value, lambda).loss; },
      [&]() {
        auto r = barlow_twins(za.value, zb.value, lambda);
        za.grad = r.grad_a;
        zb.grad = r.grad_b;
      },
      rng, opt);

  DualNetModel model(detail::tiny_arch(true), true, false, derive_seed(seed, "gradcheck.barlow.model"));
  const Tensor a = detail::random_tensor({4, 2, 8, 8}, rng, 0, 1), b = detail::random_tensor({4, 2, 8, 8}, rng, 0, 1);
  const Tensor x = concat_rows(a, b);
  auto loss = [&]() {
    const Tensor z = model.embed(x, Mode::train);
    return barlow_twins(slice_rows(z, 0, 4), slice_rows(z, 4, 8), lambda).loss;
  };
  auto fb = [&]() {
    const Tensor z = model.embed(x, Mode::train);
    auto r = barlow_twins(slice_rows(z, 0, 4), slice_rows(z, 4, 8), lambda);
    model.embed_backward(concat_rows(r.grad_a, r.grad_b));
  };
  auto e2e = check_gradients("barlow_twins", model.ssl_parameters(), loss, fb, rng, opt);
  direct.merge(e2e);
  return direct;
}

/// Replay objective (CE + memory CE + temperature KL), task-free head with
/// a snapshot shorter than the head, through fast and slow learners; once
/// plain and once with spatial dropout under a fixed mask stream.
inline GradCheckReport replay_loss_gradcheck(std::uint64_t seed, const GradCheckOptions& opt = {}) {
  Rng rng(derive_seed(seed, "gradcheck.replay"));
  GradCheckReport total{"replay_loss", 0, 0, ""};
  for (double p : {0.0, 0.3}) {
    DualNetModel model(detail::tiny_arch(true), true, false, derive_seed(seed, "gradcheck.replay.model"));
    const std::vector<int> labels = {3, 7, 9};
    model.observe_labels(labels);
    const Tensor x = detail::random_tensor({5, 2, 8, 8}, rng, 0, 1);
    const std::vector<int> incoming = {3, 7, 9};
    std::vector<MemoryEntry> mem(2);
    mem[0].label = 7;
    mem[0].soft_logits = std::vector<Scalar>{0.3, -0.4};  // taken before class 9 appeared
    mem[1].label = 9;
    mem[1].soft_logits = std::vector<Scalar>{-0.2, 0.1, 0.5};
    const std::uint64_t mask_seed = derive_seed(seed, "gradcheck.replay.mask");
    auto evaluate = [&](bool backward) {
      Rng masks(mask_seed);
      auto groups = model.forward(x, {}, Mode::train, DropoutSpec{p, Mode::train}, masks);
      auto r = replay_loss(groups, model.registry(), incoming, std::nullopt, mem, Method::dualnet, Scalar(2),
                           Scalar(2), Scalar(0.1));
      if (backward) model.backward(r.group_grads);
      return r.loss;
    };
    auto rep = check_gradients("replay_loss", model.supervised_parameters(), [&]() { return evaluate(false); },
                               [&]() { evaluate(true); }, rng, opt);
    total.merge(rep);
  }
  return total;
}

/// Scalar loss on the gated feature h'_L, checked separately w.r.t. the
/// fast parameters (theta) and the backbone (phi).
inline std::pair<GradCheckReport, GradCheckReport> gated_gradcheck(std::uint64_t seed, const GradCheckOptions& opt = {}) {
  Rng rng(derive_seed(seed, "gradcheck.gated"));
  DualNetModel model(detail::tiny_arch(false), true, true, derive_seed(seed, "gradcheck.gated.model"));
  const Tensor x = detail::random_tensor({3, 2, 8, 8}, rng, 0, 1);
  const Tensor r = detail::random_tensor({3, 12, 2, 2}, rng);
  auto loss = [&]() {
    Rng unused(0);
    auto h = model.slow_features(x, Mode::train);
    return detail::dot(model.fast_adapt(x, h, DropoutSpec{0.0, Mode::train}, unused), r);
  };
  auto fb = [&]() {
    Rng unused(0);
    auto h = model.slow_features(x, Mode::train);
    model.fast_adapt(x, h, DropoutSpec{0.0, Mode::train}, unused);
    model.slow_backward(model.fast_backward(r));
  };
  auto theta = check_gradients("gated_path_theta", model.fast_parameters(), loss, fb, rng, opt);
  auto phi = check_gradients("gated_path_phi", model.slow_parameters(), loss, fb, rng, opt);
  return {theta, phi};
}

/// Every check over `seeds` seeds, merged per check name.
inline std::vector<GradCheckReport> gradcheck_suite(std::size_t seeds, const GradCheckOptions& opt = {}) {
  std::map<std::string, GradCheckReport> merged;
  std::vector<std::string> order;
  auto add = [&](const GradCheckReport& r) {
    if (!merged.count(r.name)) {
      merged[r.name] = GradCheckReport{r.name, 0, 0, ""};
      order.push_back(r.name);
    }
    merged[r.name].merge(r);
  };
  for (std::uint64_t s = 0; s < seeds; ++s) {
    for (const auto& r : layer_gradchecks(s, opt)) add(r);
    add(barlow_gradcheck(s, opt));
    add(replay_loss_gradcheck(s, opt));
    auto [theta, phi] = gated_gradcheck(s, opt);
    add(theta);
    add(phi);
  }
  std::vector<GradCheckReport> out;
  for (const auto& n : order) out.push_back(merged[n]);
  return out;
}

}  // namespace dualnet
