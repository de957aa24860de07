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

#ifndef TIMI_TOY_PIPELINE_HPP
#define TIMI_TOY_PIPELINE_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "timi/latent_field.hpp"

// A training-free stand-in for a pretrained image-to-3D model: a
// resolution-preserving toy VAE over occupancy grids and a stack of
// joint-attention layers over the sequence [condition tokens; latent tokens].
//
// Each layer embeds latent token v from (pos3d(v), z[:, v]) and condition token
// m from (pos2d(m), payload(m)). Positions use a sinusoidal encoding with four
// fixed frequencies per axis (sin and cos, 8 features per axis), so the
// slot-aligned bilinear form q.k reduces to a shift-invariant kernel
// sum_f amp_f cos(omega_f (a - b)) along every encoded axis. Layer weights only
// rescale those slots (seeded per layer), so every coefficient below is the
// effective q.k coefficient with the 1/sqrt(d) factor already applied.
//
// Logit of latent row v against condition column m:
//   [ lateral * (K(h_v - h_m) + K(w_v - w_m)) + sum_c q_c(v) * payload_m[c] ] / tau
//   q_0 = gain_0 z_0 + occ_bias      (occupancy slot)
//   q_1 = gain_1 z_1 + depth cos(pi depth_v)
//   q_2 = gain_2 z_2 + depth sin(pi depth_v)
//   q_3 = gain_3 z_3 + extent
// Latent key columns are positional only: [latent_bias + latent_pos * sum_a K(.)] / tau,
// which makes their log-sum-exp separable over the three axes. The latent bias is
// chosen so the pooled self-attention mass of a row weighs like one aligned
// background token at every temperature and resolution.
//
// The clean-sample readout of the final layer is
//   x0[:, v] = sum_m A_zc[v, m] payload_m + (1 - sum_m A_zc[v, m]) background_code.

namespace timi {

inline constexpr std::size_t kLatentChannels = 4;
inline constexpr std::size_t kPeFeaturesPerAxis = 8;
inline constexpr std::array<double, 4> kPeFrequencies{std::numbers::pi, 11.7, 18.9, 25.0};
inline constexpr std::array<double, 4> kPeAmplitudes{0.26, 0.31, 0.28, 0.15};

using Payload = std::array<double, kLatentChannels>;
inline constexpr Payload kBackgroundCode{-1.0, 0.0, 0.0, 0.0};

// [sin(w0 x), cos(w0 x), sin(w1 x), cos(w1 x), ...]
inline std::array<double, kPeFeaturesPerAxis> positional_encoding(double x) {
  std::array<double, kPeFeaturesPerAxis> pe{};
  for (std::size_t f = 0; f < kPeFrequencies.size(); ++f) {
    pe[2 * f] = std::sin(kPeFrequencies[f] * x);
    pe[2 * f + 1] = std::cos(kPeFrequencies[f] * x);
  }
  return pe;
}

// pe(a)^T diag(amp) pe(b), evaluated in closed form. K(0) = 1.
inline double positional_kernel(double delta) {
  double k = 0.0;
  for (std::size_t f = 0; f < kPeFrequencies.size(); ++f) {
    k += kPeAmplitudes[f] * std::cos(kPeFrequencies[f] * delta);
  }
  return k;
}

// Normalized voxel-center coordinate along an axis of n voxels.
inline double voxel_coord(std::size_t i, std::size_t n) {
  return (static_cast<double>(i) + 0.5) / static_cast<double>(n);
}

struct ConditionSet {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::vector<Payload> payloads;                // M
  std::vector<std::array<double, 2>> positions;  // M normalized (row, col) in [0,1]^2

  std::size_t size() const noexcept { return payloads.size(); }

  // Tokens laid out row-major at the cell centers of a gh x gw grid.
  static ConditionSet on_grid(std::size_t gh, std::size_t gw, std::vector<Payload> payloads) {
    ConditionSet cs;
    cs.grid_h = gh;
    cs.grid_w = gw;
    cs.payloads = std::move(payloads);
    cs.positions.reserve(gh * gw);
    for (std::size_t i = 0; i < gh; ++i) {
      for (std::size_t j = 0; j < gw; ++j) cs.positions.push_back({voxel_coord(i, gh), voxel_coord(j, gw)});
    }
    cs.validate();
    return cs;
  }

  void validate() const {
    const std::size_t m = grid_h * grid_w;
    if (m == 0 || payloads.size() != m || positions.size() != m) {
      throw Error("condition", "expected grid_h*grid_w payloads and positions");
    }
    for (const auto& p : payloads) {
      for (double x : p) {
        if (!std::isfinite(x)) throw Error("condition", "non-finite payload entry");
      }
    }
  }
};

struct InstanceMaskSet {
  std::size_t token_count = 0;
  std::vector<std::vector<std::uint8_t>> masks;  // K x M, entries 0/1

  InstanceMaskSet() = default;
  InstanceMaskSet(std::size_t m, std::vector<std::vector<std::uint8_t>> ms)
      : token_count(m), masks(std::move(ms)) {
    validate();
  }

  std::size_t size() const noexcept { return masks.size(); }

  void validate() const {
    if (masks.empty()) throw Error("mask-dim", "no instance masks");
    for (std::size_t k = 0; k < masks.size(); ++k) {
      if (masks[k].size() != token_count) {
        throw Error("mask-dim", "mask " + std::to_string(k) + " has length " +
                                    std::to_string(masks[k].size()) + ", expected " +
                                    std::to_string(token_count));
      }
      bool any = false;
      for (auto b : masks[k]) {
        if (b > 1) throw Error("mask-dim", "mask entries must be 0 or 1");
        any = any || b != 0;
      }
      if (!any) throw Error("mask-dim", "mask " + std::to_string(k) + " selects no token");
    }
  }
};

struct DenoiserConfig {
  std::size_t n_layers = 6;
  std::size_t d = 32;
  double attn_temperature = 1.0;
  std::uint64_t weight_seed = 0x7131D5EEDULL;

  void validate() const {
    if (n_layers == 0) throw Error("config", "n_layers must be positive");
    if (d < kLatentChannels + 3 * kPeFeaturesPerAxis) {
      throw Error("config", "d must cover the latent channels plus the 3-axis positional encoding");
    }
    if (!(attn_temperature > 0.0) || !std::isfinite(attn_temperature)) {
      throw Error("config", "attn_temperature must be positive");
    }
  }
};

// Effective bilinear coefficients of one joint-attention layer.
struct LayerWeights {
  double lateral = 0.0;
  double latent_pos = 0.0;
  Payload content_gain{};
  double depth = 0.0;
  double extent = 0.0;
  double occ_bias = 0.0;
};

namespace detail {

// Reference coefficients before the per-layer seeded jitter.
inline constexpr double kLateral = 6.0;
inline constexpr double kLatentPos = 0.5;
inline constexpr Payload kContentGain{1.0, 0.5, 0.5, 0.5};
inline constexpr double kDepth = 60.0;
// Half-extents (normalized) at which the depth boundary is placed exactly on
// the instance surface; in between it is within a fraction of a voxel.
inline constexpr double kExtentLo = 2.0 / 32.0;
inline constexpr double kExtentHi = 5.0 / 32.0;

}  // namespace detail

inline std::vector<LayerWeights> make_layer_weights(const DenoiserConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.weight_seed);
  auto jitter = [&rng] { return rng.uniform(0.85, 1.15); };
  std::vector<LayerWeights> layers(cfg.n_layers);
  for (auto& lw : layers) {
    lw.lateral = detail::kLateral * jitter();
    lw.latent_pos = detail::kLatentPos * jitter();
    for (std::size_t c = 0; c < kLatentChannels; ++c) lw.content_gain[c] = detail::kContentGain[c] * jitter();
    lw.depth = detail::kDepth * jitter();
    // Foreground beats an aligned background token iff
    //   2 occ_bias + depth cos(pi dz) + extent e > 0,
    // with the root dz = e pinned at both reference half-extents.
    const double c_lo = std::cos(std::numbers::pi * detail::kExtentLo);
    const double c_hi = std::cos(std::numbers::pi * detail::kExtentHi);
    lw.extent = lw.depth * (c_lo - c_hi) / (detail::kExtentHi - detail::kExtentLo);
    lw.occ_bias = -0.5 * (lw.depth * c_lo + lw.extent * detail::kExtentLo);
  }
  return layers;
}

// Attention state of one layer kept for the backward pass.
struct AttentionCapture {
  std::size_t layer = 0;  // 1-based
  Dims3 dims{};           // spatial shape of the latent the rows index
  std::size_t rows = 0;   // L latent tokens
  std::size_t cols = 0;   // M condition tokens
  std::vector<double> a_zc;             // rows x cols
  std::vector<double> log_denominator;  // log of the full (M + L)-column softmax denominator
  std::vector<double> latent_mass;      // per-row mass on the L latent-key columns
  Payload query_gain{};                 // d logit(v, m) / d z[c, v] = query_gain[c] * key_content[m][c]
  std::vector<Payload> key_content;     // condition-side content slots (payloads)

  double at(std::size_t v, std::size_t m) const { return a_zc[v * cols + m]; }
  std::span<const double> row(std::size_t v) const { return {a_zc.data() + v * cols, cols}; }
  double condition_mass(std::size_t v) const {
    double s = 0.0;
    for (double a : row(v)) s += a;
    return s;
  }
};

struct ForwardResult {
  LatentField x0_hat;
  std::vector<AttentionCapture> captures;  // ascending layer order
};

inline LatentField toy_encode(const VoxelGrid& occupancy) {
  LatentField z(kLatentChannels, occupancy.dims);
  for (std::size_t v = 0; v < occupancy.cells.size(); ++v) {
    z.at(0, v) = occupancy.cells[v] != 0 ? 1.0 : -1.0;
  }
  return z;
}

inline VoxelGrid toy_decode(const LatentField& z) {
  if (z.channels() < 1) throw Error("shape", "toy_decode needs at least one channel");
  VoxelGrid g(z.dims());
  for (std::size_t v = 0; v < g.cells.size(); ++v) g.cells[v] = z.at(0, v) > 0.0 ? 1 : 0;
  return g;
}

inline LatentField init_noise(Dims3 dims, std::size_t channels, Rng& rng) {
  LatentField z(channels, dims);
  for (double& x : z.data()) x = rng.normal();
  return z;
}

// Deterministic Euler interpolation toward the clean-sample estimate.
inline LatentField sampler_step(const LatentField& z_s, const LatentField& x0_hat, std::size_t s,
                                std::size_t total_steps) {
  if (s >= total_steps) {
    throw Error("step-overflow", "step " + std::to_string(s) + " of " + std::to_string(total_steps));
  }
  if (!z_s.same_shape(x0_hat)) throw Error("shape", "sampler_step operands differ in shape");
  if (total_steps - s == 1) return x0_hat;
  const double rate = 1.0 / static_cast<double>(total_steps - s);
  LatentField out = z_s;
  auto o = out.data();
  auto x = x0_hat.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += (x[i] - o[i]) * rate;
  return out;
}

namespace detail {

inline double log_add_exp(double a, double b) {
  const double hi = std::max(a, b);
  return hi + std::log(std::exp(a - hi) + std::exp(b - hi));
}

// log sum_x exp(gain K(p_i - p_x) / tau) over the n positions of one axis, for every i.
inline std::vector<double> axis_log_partition(std::size_t n, double gain, double tau) {
  std::vector<double> out(n);
  std::vector<double> s(n);
  for (std::size_t i = 0; i < n; ++i) {
    double hi = -INFINITY;
    for (std::size_t x = 0; x < n; ++x) {
      s[x] = gain * positional_kernel(voxel_coord(i, n) - voxel_coord(x, n)) / tau;
      hi = std::max(hi, s[x]);
    }
    double acc = 0.0;
    for (std::size_t x = 0; x < n; ++x) acc += std::exp(s[x] - hi);
    out[i] = hi + std::log(acc);
  }
  return out;
}

// Runs one layer over every latent row. Fills `cap` when non-null and
// accumulates the readout into `x0` when non-null.
inline void attend_layer(const LatentField& z, const ConditionSet& cond, const LayerWeights& lw,
                         double tau, AttentionCapture* cap, LatentField* x0) {
  const Dims3& dims = z.dims();
  const std::size_t L = dims.volume();
  const std::size_t M = cond.size();

  // lateral[(h, w), m]: positional part of the condition logits.
  std::vector<double> th(dims.height * M);
  std::vector<double> tw(dims.width * M);
  for (std::size_t h = 0; h < dims.height; ++h) {
    for (std::size_t m = 0; m < M; ++m) {
      th[h * M + m] = lw.lateral * positional_kernel(voxel_coord(h, dims.height) - cond.positions[m][0]);
    }
  }
  for (std::size_t w = 0; w < dims.width; ++w) {
    for (std::size_t m = 0; m < M; ++m) {
      tw[w * M + m] = lw.lateral * positional_kernel(voxel_coord(w, dims.width) - cond.positions[m][1]);
    }
  }

  // Pooled latent-key log mass, separable over axes.
  const auto pd = axis_log_partition(dims.depth, lw.latent_pos, tau);
  const auto ph = axis_log_partition(dims.height, lw.latent_pos, tau);
  const auto pw = axis_log_partition(dims.width, lw.latent_pos, tau);
  const double sink = (2.0 * lw.lateral - lw.occ_bias) / tau;
  const double centre = pd[dims.depth / 2] + ph[dims.height / 2] + pw[dims.width / 2];

  if (cap != nullptr) {
    cap->dims = dims;
    cap->rows = L;
    cap->cols = M;
    cap->a_zc.assign(L * M, 0.0);
    cap->log_denominator.assign(L, 0.0);
    cap->latent_mass.assign(L, 0.0);
    for (std::size_t c = 0; c < kLatentChannels; ++c) cap->query_gain[c] = lw.content_gain[c] / tau;
    cap->key_content = cond.payloads;
  }

  // Columns sharing a payload share the content part of the logit, so
  // exp(s[m] - hi) = exp(lat[m] - lat_max[class]) * exp(lat_max[class] + content[class] - hi)
  // and the first factor is tabulated once per (h, w).
  std::vector<std::size_t> cls(M);
  std::vector<Payload> class_code;
  for (std::size_t m = 0; m < M; ++m) {
    const auto it = std::find(class_code.begin(), class_code.end(), cond.payloads[m]);
    cls[m] = static_cast<std::size_t>(it - class_code.begin());
    if (it == class_code.end()) class_code.push_back(cond.payloads[m]);
  }
  const std::size_t n_cls = class_code.size();
  const std::size_t HW = dims.height * dims.width;
  std::vector<double> lat_max(HW * n_cls, -INFINITY);
  std::vector<double> lat_exp(HW * M);
  for (std::size_t h = 0; h < dims.height; ++h) {
    for (std::size_t w = 0; w < dims.width; ++w) {
      const std::size_t hw = h * dims.width + w;
      double* lm = lat_max.data() + hw * n_cls;
      double* le = lat_exp.data() + hw * M;
      for (std::size_t m = 0; m < M; ++m) {
        le[m] = (th[h * M + m] + tw[w * M + m]) / tau;
        lm[cls[m]] = std::max(lm[cls[m]], le[m]);
      }
      for (std::size_t m = 0; m < M; ++m) le[m] = std::exp(le[m] - lm[cls[m]]);
    }
  }

  std::vector<double> s(M);
  std::vector<double> class_logit(n_cls);
  for (std::size_t d = 0; d < dims.depth; ++d) {
    const double depth_pos = voxel_coord(d, dims.depth);
    const Payload query_bias{lw.occ_bias, lw.depth * std::cos(std::numbers::pi * depth_pos),
                             lw.depth * std::sin(std::numbers::pi * depth_pos), lw.extent};
    for (std::size_t h = 0; h < dims.height; ++h) {
      for (std::size_t w = 0; w < dims.width; ++w) {
        const std::size_t v = dims.index(d, h, w);
        const std::size_t hw = h * dims.width + w;
        Payload q;
        for (std::size_t c = 0; c < kLatentChannels; ++c) q[c] = lw.content_gain[c] * z.at(c, v) + query_bias[c];

        const double lse_latent = sink + pd[d] + ph[h] + pw[w] - centre;
        double hi = lse_latent;
        const double* lm = lat_max.data() + hw * n_cls;
        for (std::size_t k = 0; k < n_cls; ++k) {
          const Payload& p = class_code[k];
          class_logit[k] = lm[k] + (q[0] * p[0] + q[1] * p[1] + q[2] * p[2] + q[3] * p[3]) / tau;
          hi = std::max(hi, class_logit[k]);
        }
        for (std::size_t k = 0; k < n_cls; ++k) class_logit[k] = std::exp(class_logit[k] - hi);
        const double latent_exp = std::exp(lse_latent - hi);
        const double* le = lat_exp.data() + hw * M;
        double total = latent_exp;
        for (std::size_t m = 0; m < M; ++m) {
          s[m] = le[m] * class_logit[cls[m]];
          total += s[m];
        }
        const double inv = 1.0 / total;
        double cond_mass = 0.0;
        Payload mix{};
        for (std::size_t m = 0; m < M; ++m) {
          const double a = s[m] * inv;
          s[m] = a;
          cond_mass += a;
          if (x0 != nullptr) {
            const Payload& p = cond.payloads[m];
            for (std::size_t c = 0; c < kLatentChannels; ++c) mix[c] += a * p[c];
          }
        }
        if (cap != nullptr) {
          std::copy(s.begin(), s.end(), cap->a_zc.begin() + static_cast<std::ptrdiff_t>(v * M));
          cap->log_denominator[v] = hi + std::log(total);
          cap->latent_mass[v] = latent_exp * inv;
        }
        if (x0 != nullptr) {
          for (std::size_t c = 0; c < kLatentChannels; ++c) {
            x0->at(c, v) = mix[c] + (1.0 - cond_mass) * kBackgroundCode[c];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Forward pass of the toy denoiser. Layers do not feed each other (every layer
// embeds the same z), so only the captured layers and the final readout layer
// are evaluated; the skipped layers cannot influence any output.
inline ForwardResult denoiser_forward(const LatentField& z, const ConditionSet& cond,
                                      const DenoiserConfig& cfg,
                                      const std::set<std::size_t>& capture_layers) {
  cfg.validate();
  cond.validate();
  if (z.channels() != kLatentChannels) throw Error("shape", "denoiser expects 4 latent channels");
  for (std::size_t l : capture_layers) {
    if (l < 1 || l > cfg.n_layers) throw Error("bad-layer", "layer " + std::to_string(l));
  }
  const auto weights = make_layer_weights(cfg);
  ForwardResult out;
  out.x0_hat = LatentField(kLatentChannels, z.dims());
  for (std::size_t l : capture_layers) {
    AttentionCapture cap;
    cap.layer = l;
    detail::attend_layer(z, cond, weights[l - 1], cfg.attn_temperature, &cap,
                         l == cfg.n_layers ? &out.x0_hat : nullptr);
    out.captures.push_back(std::move(cap));
  }
  if (!capture_layers.contains(cfg.n_layers)) {
    detail::attend_layer(z, cond, weights.back(), cfg.attn_temperature, nullptr, &out.x0_hat);
  }
  return out;
}

}  // namespace timi

#endif  // TIMI_TOY_PIPELINE_HPP
