// Copyright 2026 The TIMI Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef TIMI_LATENT_FIELD_HPP
#define TIMI_LATENT_FIELD_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "timi/error.hpp"

namespace timi {

// Spatial extent of a voxel grid, D outermost and W innermost.
struct Dims3 {
  std::size_t depth = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  constexpr std::size_t volume() const noexcept { return depth * height * width; }
  // Token index of voxel (d, h, w).
  constexpr std::size_t index(std::size_t d, std::size_t h, std::size_t w) const noexcept {
    return (d * height + h) * width + w;
  }
  friend constexpr bool operator==(const Dims3&, const Dims3&) = default;
};

// Channel-major C x D x H x W real field. Houses latents, gradients, momentum.
class LatentField {
 public:
  LatentField() = default;
  LatentField(std::size_t channels, Dims3 dims, double fill = 0.0)
      : channels_(channels), dims_(dims), data_(channels * dims.volume(), fill) {}
  LatentField(std::size_t channels, Dims3 dims, std::vector<double> data)
      : channels_(channels), dims_(dims), data_(std::move(data)) {
    if (data_.size() != channels_ * dims_.volume()) {
      throw Error("shape", "data length " + std::to_string(data_.size()) +
                               " does not match C*D*H*W");
    }
  }

  std::size_t channels() const noexcept { return channels_; }
  const Dims3& dims() const noexcept { return dims_; }
  std::size_t token_count() const noexcept { return dims_.volume(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  double& at(std::size_t c, std::size_t v) { return data_[c * token_count() + v]; }
  double at(std::size_t c, std::size_t v) const { return data_[c * token_count() + v]; }
  double& operator()(std::size_t c, std::size_t d, std::size_t h, std::size_t w) {
    return data_[c * token_count() + dims_.index(d, h, w)];
  }
  double operator()(std::size_t c, std::size_t d, std::size_t h, std::size_t w) const {
    return data_[c * token_count() + dims_.index(d, h, w)];
  }

  std::span<double> channel(std::size_t c) { return {data_.data() + c * token_count(), token_count()}; }
  std::span<const double> channel(std::size_t c) const {
    return {data_.data() + c * token_count(), token_count()};
  }

  bool same_shape(const LatentField& o) const noexcept {
    return channels_ == o.channels_ && dims_ == o.dims_;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  LatentField& operator+=(const LatentField& o) {
    require_same(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  LatentField& operator-=(const LatentField& o) {
    require_same(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  LatentField& operator*=(double s) {
    for (double& x : data_) x *= s;
    return *this;
  }

  friend bool operator==(const LatentField&, const LatentField&) = default;

 private:
  void require_same(const LatentField& o) const {
    if (!same_shape(o)) throw Error("shape", "latent field shapes differ");
  }

  std::size_t channels_ = 0;
  Dims3 dims_{};
  std::vector<double> data_;
};

inline LatentField operator+(LatentField a, const LatentField& b) { return a += b; }
inline LatentField operator-(LatentField a, const LatentField& b) { return a -= b; }
inline LatentField operator*(double s, LatentField a) { return a *= s; }

// Binary occupancy grid (one byte per voxel, values 0 or 1).
struct VoxelGrid {
  Dims3 dims{};
  std::vector<std::uint8_t> cells;

  VoxelGrid() = default;
  explicit VoxelGrid(Dims3 d) : dims(d), cells(d.volume(), 0) {}

  bool occupied(std::size_t d, std::size_t h, std::size_t w) const {
    return cells[dims.index(d, h, w)] != 0;
  }
  void set(std::size_t d, std::size_t h, std::size_t w, bool on = true) {
    cells[dims.index(d, h, w)] = on ? 1 : 0;
  }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), std::uint8_t{1}));
  }

  friend bool operator==(const VoxelGrid&, const VoxelGrid&) = default;
};

// SplitMix64 stream. The update and output mix are the published constants
// (Steele, Lea, Flood 2014), so the stream is reproducible in any language:
//   state += 0x9E3779B97F4A7C15
//   z = state; z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
//   z = (z ^ (z >> 27)) * 0x94D049BB133111EB; return z ^ (z >> 31)
// uniform() takes the top 53 bits; normal() is the Box-Muller
// transform on (1 - u1, u2), emitting the cosine branch then the sine branch.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() noexcept {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n) by rejection, n > 0.
  std::uint64_t below(std::uint64_t n) noexcept {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }
  // Uniform integer in [lo, hi].
  std::int64_t between(std::int64_t lo, std::int64_t hi) noexcept {
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Normalized, symmetric 1D Gaussian truncated at radius ceil(3 sigma).
class GaussianKernel1D {
 public:
  explicit GaussianKernel1D(double sigma) : sigma_(sigma) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw Error("invalid-sigma", std::to_string(sigma));
    radius_ = static_cast<std::size_t>(std::ceil(3.0 * sigma));
    weights_.resize(2 * radius_ + 1);
    double total = 0.0;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      const double x = static_cast<double>(i) - static_cast<double>(radius_);
      weights_[i] = std::exp(-x * x / (2.0 * sigma * sigma));
      total += weights_[i];
    }
    for (double& w : weights_) w /= total;
  }

  double sigma() const noexcept { return sigma_; }
  std::size_t radius() const noexcept { return radius_; }
  std::span<const double> weights() const noexcept { return weights_; }
  // Weight at signed offset i, |i| <= radius.
  double operator[](std::ptrdiff_t i) const {
    return weights_[static_cast<std::size_t>(i + static_cast<std::ptrdiff_t>(radius_))];
  }

 private:
  double sigma_;
  std::size_t radius_ = 0;
  std::vector<double> weights_;
};

// Population standard deviation over every entry (Welford, sequential order).
inline double field_std(const LatentField& f) {
  if (f.empty()) throw Error("empty-field");
  double mean = 0.0;
  double m2 = 0.0;
  std::size_t n = 0;
  for (double x : f.data()) {
    ++n;
    const double delta = x - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (x - mean);
  }
  return std::sqrt(m2 / static_cast<double>(n));
}

inline double field_max_abs(const LatentField& f) {
  if (f.empty()) throw Error("empty-field");
  double m = 0.0;
  for (double x : f.data()) m = std::max(m, std::abs(x));
  return m;
}

namespace detail {

// One separable pass along an axis with edge-replicate boundaries. `stride`
// is the distance between neighbors along the axis, `n` its length.
inline void convolve_axis(std::span<const double> in, std::span<double> out, const Dims3& dims,
                          int axis, const GaussianKernel1D& kernel) {
  const std::size_t n = axis == 0 ? dims.depth : axis == 1 ? dims.height : dims.width;
  const std::size_t stride = axis == 0 ? dims.height * dims.width : axis == 1 ? dims.width : 1;
  const auto r = static_cast<std::ptrdiff_t>(kernel.radius());
  const auto last = static_cast<std::ptrdiff_t>(n) - 1;
  for (std::size_t v = 0; v < dims.volume(); ++v) {
    const auto pos = static_cast<std::ptrdiff_t>((v / stride) % n);
    const std::size_t base = v - static_cast<std::size_t>(pos) * stride;
    double acc = 0.0;
    for (std::ptrdiff_t i = -r; i <= r; ++i) {
      const std::ptrdiff_t p = std::clamp(pos + i, std::ptrdiff_t{0}, last);
      acc += kernel[i] * in[base + static_cast<std::size_t>(p) * stride];
    }
    out[v] = acc;
  }
}

}  // namespace detail

// Per-channel separable Gaussian blur along D, H, W with replicate padding.
inline LatentField gaussian_smooth(const LatentField& f, double sigma) {
  const GaussianKernel1D kernel(sigma);
  LatentField out(f.channels(), f.dims());
  std::vector<double> scratch(f.token_count());
  for (std::size_t c = 0; c < f.channels(); ++c) {
    auto dst = out.channel(c);
    detail::convolve_axis(f.channel(c), dst, f.dims(), 0, kernel);
    detail::convolve_axis(dst, scratch, f.dims(), 1, kernel);
    detail::convolve_axis(scratch, dst, f.dims(), 2, kernel);
  }
  return out;
}

}  // namespace timi

#endif  // TIMI_LATENT_FIELD_HPP
