#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>

#include "dualnet/rng.hpp"
#include "dualnet/tensor.hpp"

namespace dualnet {

/// Per-sample image distortions. Every draw is a function of
/// (seed, sample index, view index) only.
struct AugmentPolicy {
  std::size_t crop_padding = 4;
  double flip_probability = 0.5;
  double brightness_lo = 0.8;
  double brightness_hi = 1.2;
  double noise_sigma = 0.02;
  Scalar clamp_lo = 0;
  Scalar clamp_hi = 1;

  static AugmentPolicy identity() { return {0, 0.0, 1.0, 1.0, 0.0, -1e30, 1e30}; }
  /// Weak augmentation used on supervised paths: random crop and flip only.
  static AugmentPolicy crop_flip() { return {4, 0.5, 1.0, 1.0, 0.0, -1e30, 1e30}; }

  bool is_identity() const {
    return crop_padding == 0 && flip_probability == 0 && brightness_lo == 1 && brightness_hi == 1 &&
           noise_sigma == 0;
  }
};

struct ViewPair {
  Tensor view_a;
  Tensor view_b;
};

namespace detail {

/// Augments one CHW image in place.
inline void augment_image(Scalar* img, std::size_t c, std::size_t h, std::size_t w, const AugmentPolicy& policy,
                          Rng& rng) {
  const std::size_t plane = h * w;
  std::vector<Scalar> src(img, img + c * plane);
  const auto pad = static_cast<std::ptrdiff_t>(policy.crop_padding);
  std::ptrdiff_t dy = 0, dx = 0;
  if (pad > 0) {
    dy = static_cast<std::ptrdiff_t>(rng.index(2 * policy.crop_padding + 1)) - pad;
    dx = static_cast<std::ptrdiff_t>(rng.index(2 * policy.crop_padding + 1)) - pad;
  }
  const bool flip = policy.flip_probability > 0 && rng.bernoulli(policy.flip_probability);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double scale =
        policy.brightness_hi > policy.brightness_lo ? rng.uniform(policy.brightness_lo, policy.brightness_hi) : policy.brightness_lo;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t xs = flip ? w - 1 - x : x;
        const auto sy = static_cast<std::ptrdiff_t>(y) + dy;
        const auto sx = static_cast<std::ptrdiff_t>(xs) + dx;
        Scalar v = 0;
        if (sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(h) && sx < static_cast<std::ptrdiff_t>(w)) {
          v = src[ch * plane + static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)];
        }
        v = static_cast<Scalar>(v * scale);
        if (policy.noise_sigma > 0) v += static_cast<Scalar>(policy.noise_sigma * rng.normal());
        img[ch * plane + y * w + x] = std::clamp(v, policy.clamp_lo, policy.clamp_hi);
      }
  }
}

}  // namespace detail

/// Applies the policy to every image of an NCHW batch; `stream` separates
/// independent augmentations of the same batch.
inline Tensor augment_batch(const Tensor& batch, const AugmentPolicy& policy, std::uint64_t seed,
                            std::uint64_t stream = 0) {
  if (batch.rank() != 4) throw ShapeError("augment_batch expects NCHW, got " + to_string(batch.shape()));
  Tensor out = batch;
  if (policy.is_identity()) return out;
  const std::size_t c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  for (std::size_t i = 0; i < batch.dim(0); ++i) {
    Rng rng(derive_seed(seed, "augment", (stream << 32) ^ i));
    detail::augment_image(out.data() + i * out.stride0(), c, h, w, policy, rng);
  }
  return out;
}

inline ViewPair make_views(const Tensor& batch, const AugmentPolicy& policy, std::uint64_t seed) {
  if (batch.empty() || batch.rank() != 4) throw std::invalid_argument("make_views: batch must be a nonempty NCHW tensor");
  return {augment_batch(batch, policy, seed, 1), augment_batch(batch, policy, seed, 2)};
}

}  // namespace dualnet
