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

#ifndef TIMI_ISG_HPP
#define TIMI_ISG_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <set>
#include <span>
#include <vector>

#include "timi/latent_field.hpp"
#include "timi/toy_pipeline.hpp"

// Instance-aware separation guidance: instance probability maps P = A_zc M^T,
// structure-aware weights W (column-normalized masked attention), and the
// weighted negative log-likelihood
//   L_sep = - sum_k sum_v W[v,k] log(P[v,k] + eps)
// averaged over the guided layers, with its gradient with respect to the latent.

namespace timi {

inline constexpr double kDefaultEps = 1e-6;

// L x K, row-major.
struct InstanceProbabilityMap {
  std::size_t layer = 0;
  std::size_t rows = 0;
  std::size_t instances = 0;
  std::vector<double> p;

  double at(std::size_t v, std::size_t k) const { return p[v * instances + k]; }
};

struct SpatialWeightMap {
  std::size_t rows = 0;
  std::size_t instances = 0;
  double eps = kDefaultEps;
  std::vector<double> w;

  double at(std::size_t v, std::size_t k) const { return w[v * instances + k]; }
  double column_sum(std::size_t k) const {
    double s = 0.0;
    for (std::size_t v = 0; v < rows; ++v) s += at(v, k);
    return s;
  }
};

struct SeparationLossReport {
  double loss_value = 0.0;
  std::vector<double> per_layer_losses;
  LatentField grad;
};

namespace detail {

inline void check_masks(const AttentionCapture& cap, const InstanceMaskSet& masks) {
  masks.validate();
  if (masks.token_count != cap.cols) {
    throw Error("mask-dim", "masks cover " + std::to_string(masks.token_count) +
                                " tokens, capture has " + std::to_string(cap.cols));
  }
}

}  // namespace detail

namespace detail {

// Columns grouped by their mask membership pattern, so per-row sums over
// masks cost one pass over the columns plus one pass over the groups.
struct ColumnGroups {
  std::vector<std::size_t> group;                 // per column
  std::vector<std::vector<std::size_t>> members;  // per group: instances whose mask holds it

  explicit ColumnGroups(const InstanceMaskSet& masks) : group(masks.token_count) {
    std::vector<std::vector<std::size_t>> seen;
    for (std::size_t m = 0; m < masks.token_count; ++m) {
      std::vector<std::size_t> pattern;
      for (std::size_t k = 0; k < masks.size(); ++k) {
        if (masks.masks[k][m] != 0) pattern.push_back(k);
      }
      const auto it = std::find(members.begin(), members.end(), pattern);
      group[m] = static_cast<std::size_t>(it - members.begin());
      if (it == members.end()) members.push_back(std::move(pattern));
    }
  }
  std::size_t size() const noexcept { return members.size(); }
};

inline InstanceProbabilityMap probability_grouped(const AttentionCapture& cap, const InstanceMaskSet& masks,
                                                  const ColumnGroups& groups) {
  InstanceProbabilityMap out;
  out.layer = cap.layer;
  out.rows = cap.rows;
  out.instances = masks.size();
  out.p.assign(cap.rows * masks.size(), 0.0);
  std::vector<double> gsum(groups.size());
  for (std::size_t v = 0; v < cap.rows; ++v) {
    std::fill(gsum.begin(), gsum.end(), 0.0);
    const auto a = cap.row(v);
    for (std::size_t m = 0; m < cap.cols; ++m) gsum[groups.group[m]] += a[m];
    for (std::size_t g = 0; g < groups.size(); ++g) {
      for (std::size_t k : groups.members[g]) out.p[v * out.instances + k] += gsum[g];
    }
  }
  return out;
}

inline SpatialWeightMap weights_from_probability(const InstanceProbabilityMap& prob, double eps) {
  if (!(eps > 0.0)) throw Error("config", "eps must be positive");
  SpatialWeightMap out;
  out.rows = prob.rows;
  out.instances = prob.instances;
  out.eps = eps;
  out.w.assign(prob.p.size(), 0.0);
  for (std::size_t k = 0; k < out.instances; ++k) {
    double total = 0.0;
    for (std::size_t v = 0; v < out.rows; ++v) total += prob.at(v, k);
    const double denom = total + eps;
    for (std::size_t v = 0; v < out.rows; ++v) out.w[v * out.instances + k] = prob.at(v, k) / denom;
  }
  return out;
}

}  // namespace detail

// P[v, k] = sum over the masked columns of A_zc[v, :].
inline InstanceProbabilityMap instance_probability(const AttentionCapture& cap,
                                                   const InstanceMaskSet& masks) {
  detail::check_masks(cap, masks);
  return detail::probability_grouped(cap, masks, detail::ColumnGroups(masks));
}

// W[v, k] = P[v, k] / (sum_v' P[v', k] + eps).
inline SpatialWeightMap spatial_weights(const AttentionCapture& cap, const InstanceMaskSet& masks,
                                        double eps = kDefaultEps) {
  return detail::weights_from_probability(instance_probability(cap, masks), eps);
}

namespace detail {

inline double layer_loss(const InstanceProbabilityMap& prob, const SpatialWeightMap& weights, double eps) {
  double loss = 0.0;
  for (std::size_t k = 0; k < prob.instances; ++k) {
    double lk = 0.0;
    for (std::size_t v = 0; v < prob.rows; ++v) lk += weights.at(v, k) * std::log(prob.at(v, k) + eps);
    loss -= lk;
  }
  return loss;
}

}  // namespace detail

// Loss only, with W optionally frozen (one map per capture). Used by the
// finite-difference oracle, which must hold W constant to match the detached
// analytic gradient.
inline double separation_loss_value(std::span<const AttentionCapture> caps, const InstanceMaskSet& masks,
                                    double eps_log, const std::vector<SpatialWeightMap>* frozen = nullptr) {
  if (caps.empty()) throw Error("no-captures");
  double total = 0.0;
  for (std::size_t i = 0; i < caps.size(); ++i) {
    const auto prob = instance_probability(caps[i], masks);
    const SpatialWeightMap w = frozen != nullptr ? (*frozen)[i] : detail::weights_from_probability(prob, eps_log);
    total += detail::layer_loss(prob, w, eps_log);
  }
  return total / static_cast<double>(caps.size());
}

// Loss and its gradient with respect to z. W is treated as a constant target.
inline SeparationLossReport separation_loss(std::span<const AttentionCapture> caps,
                                            const InstanceMaskSet& masks, double eps_log = kDefaultEps) {
  if (caps.empty()) throw Error("no-captures");
  if (!(eps_log > 0.0)) throw Error("config", "eps_log must be positive");
  const Dims3 dims = caps.front().dims;
  SeparationLossReport report;
  report.grad = LatentField(kLatentChannels, dims);
  const double layer_scale = 1.0 / static_cast<double>(caps.size());
  const std::size_t K = masks.size();

  const detail::ColumnGroups groups(masks);
  std::vector<double> gamma(K);
  std::vector<double> g_group(groups.size());
  for (const auto& cap : caps) {
    if (cap.dims != dims) throw Error("shape", "captures disagree on latent shape");
    detail::check_masks(cap, masks);
    const auto prob = detail::probability_grouped(cap, masks, groups);
    const auto weights = detail::weights_from_probability(prob, eps_log);
    report.per_layer_losses.push_back(detail::layer_loss(prob, weights, eps_log));

    for (std::size_t v = 0; v < cap.rows; ++v) {
      // dL/dP[v,k] = -gamma_k; dL/dA[v,m] = g_m = -sum_k gamma_k M_k[m].
      double g_bar = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        gamma[k] = weights.at(v, k) / (prob.at(v, k) + eps_log);
        g_bar -= gamma[k] * prob.at(v, k);
      }
      for (std::size_t g = 0; g < groups.size(); ++g) {
        double acc = 0.0;
        for (std::size_t k : groups.members[g]) acc -= gamma[k];
        g_group[g] = acc - g_bar;
      }
      // Softmax backward over the full row; latent-key columns carry g = 0
      // and do not depend on z, so only condition columns reach the query.
      Payload acc{};
      const auto a = cap.row(v);
      for (std::size_t m = 0; m < cap.cols; ++m) {
        const double ds = a[m] * g_group[groups.group[m]];
        const Payload& key = cap.key_content[m];
        for (std::size_t c = 0; c < kLatentChannels; ++c) acc[c] += ds * key[c];
      }
      for (std::size_t c = 0; c < kLatentChannels; ++c) {
        report.grad.at(c, v) += layer_scale * cap.query_gain[c] * acc[c];
      }
    }
  }
  double sum = 0.0;
  for (double l : report.per_layer_losses) sum += l;
  report.loss_value = sum * layer_scale;
  return report;
}

// Central finite differences of the separation loss, W frozen at z.
inline LatentField fd_gradient_oracle(const LatentField& z, const ConditionSet& cond,
                                      const DenoiserConfig& cfg, const InstanceMaskSet& masks,
                                      const std::set<std::size_t>& guided_layers, double h,
                                      double eps_log = kDefaultEps) {
  if (!(h > 0.0)) throw Error("config", "finite-difference step must be positive");
  if (z.size() > 4096) throw Error("oracle-too-large", std::to_string(z.size()) + " entries");
  const auto base = denoiser_forward(z, cond, cfg, guided_layers);
  std::vector<SpatialWeightMap> frozen;
  for (const auto& cap : base.captures) frozen.push_back(spatial_weights(cap, masks, eps_log));

  LatentField grad(z.channels(), z.dims());
  LatentField probe = z;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double x = z.data()[i];
    probe.data()[i] = x + h;
    const double up = separation_loss_value(denoiser_forward(probe, cond, cfg, guided_layers).captures,
                                            masks, eps_log, &frozen);
    probe.data()[i] = x - h;
    const double down = separation_loss_value(denoiser_forward(probe, cond, cfg, guided_layers).captures,
                                              masks, eps_log, &frozen);
    probe.data()[i] = x;
    grad.data()[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace timi

#endif  // TIMI_ISG_HPP
