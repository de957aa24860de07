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

#ifndef TIMI_SGU_HPP
#define TIMI_SGU_HPP

#include <cmath>
#include <cstdio>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "timi/isg.hpp"
#include "timi/latent_field.hpp"

namespace timi {

struct GuidanceConfig {
  double alpha = 0.1;
  double sigma = 1.5;
  double beta = 0.9;
  double eps = 1e-6;
  std::size_t guided_layer_max = 4;
  std::size_t guided_step_max = 15;
  bool use_isg = true;
  bool use_gm = true;
  bool use_sr = true;
  bool use_momentum = true;

  void validate() const {
    if (!(alpha > 0.0)) throw Error("config", "alpha must be positive");
    if (use_sr && !(sigma > 0.0)) throw Error("config", "sigma must be positive when smoothing is on");
    if (!(beta >= 0.0 && beta < 1.0)) throw Error("config", "beta must lie in [0, 1)");
    if (!(eps > 0.0)) throw Error("config", "eps must be positive");
  }
};

struct StepLogEntry {
  std::size_t step = 0;
  double loss = 0.0;
  double mu_max = 0.0;
  double lambda = 0.0;
  double max_delta = 0.0;
  double std_z = 0.0;
};

class GuidanceState {
 public:
  GuidanceState() = default;
  explicit GuidanceState(const LatentField& like) : momentum_(like.channels(), like.dims()) {}

  const LatentField& momentum() const noexcept { return momentum_; }
  LatentField& momentum() noexcept { return momentum_; }
  const std::vector<StepLogEntry>& log() const noexcept { return log_; }

  void append(const StepLogEntry& e) {
    if (!log_.empty() && e.step <= log_.back().step) {
      throw Error("log-order", "step log must be strictly increasing");
    }
    log_.push_back(e);
  }

 private:
  LatentField momentum_;
  std::vector<StepLogEntry> log_;
};

// g_reg = K_sigma * grad, or the raw gradient when smoothing is off.
inline LatentField regularize_gradient(const LatentField& grad, const GuidanceConfig& cfg) {
  if (!cfg.use_sr) return grad;
  return gaussian_smooth(grad, cfg.sigma);
}

struct AdaptiveScale {
  double mu_max = 0.0;
  double lambda = 0.0;
  double std_z = 0.0;
  LatentField delta_z;
};

// Peak-normalized scaling: lambda = alpha * std(z) / (max|g_reg| + eps), so
// that max|delta_z| never exceeds alpha * std(z). Without GM, lambda = alpha.
inline AdaptiveScale adaptive_scale(const LatentField& g_reg, const LatentField& z_t,
                                    const GuidanceConfig& cfg) {
  if (!g_reg.same_shape(z_t)) throw Error("shape", "gradient and latent differ in shape");
  AdaptiveScale out;
  out.mu_max = field_max_abs(g_reg);
  out.std_z = field_std(z_t);
  out.lambda = cfg.use_gm ? cfg.alpha * out.std_z / (out.mu_max + cfg.eps) : cfg.alpha;
  out.delta_z = out.lambda * g_reg;
  return out;
}

// m <- beta m + (1 - beta) delta. Returns the applied update.
inline LatentField momentum_update(GuidanceState& state, const LatentField& delta_z,
                                   const GuidanceConfig& cfg) {
  if (!state.momentum().same_shape(delta_z)) throw Error("shape", "momentum and update differ in shape");
  if (!cfg.use_momentum) return delta_z;
  auto m = state.momentum().data();
  auto d = delta_z.data();
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = cfg.beta * m[i] + (1.0 - cfg.beta) * d[i];
  return state.momentum();
}

// One guided update at denoising step `step` (0-based):
// loss -> smooth -> scale -> momentum -> z - m. The caller gates the window.
inline LatentField apply_guided_step(const LatentField& z_t, std::span<const AttentionCapture> caps,
                                     const InstanceMaskSet& masks, GuidanceState& state,
                                     const GuidanceConfig& cfg, std::size_t step) {
  if (!cfg.use_isg || step >= cfg.guided_step_max) {
    throw Error("window", "step " + std::to_string(step) + " is outside the guided window");
  }
  for (const auto& cap : caps) {
    if (cap.layer > cfg.guided_layer_max) {
      throw Error("window", "layer " + std::to_string(cap.layer) + " is outside the guided window");
    }
  }
  if (state.momentum().empty()) state = GuidanceState(z_t);

  const auto report = separation_loss(caps, masks, cfg.eps);
  const auto g_reg = regularize_gradient(report.grad, cfg);
  const auto scaled = adaptive_scale(g_reg, z_t, cfg);
  const auto m = momentum_update(state, scaled.delta_z, cfg);

  StepLogEntry entry;
  entry.step = step;
  entry.loss = report.loss_value;
  entry.mu_max = scaled.mu_max;
  entry.lambda = scaled.lambda;
  entry.max_delta = field_max_abs(scaled.delta_z);
  entry.std_z = scaled.std_z;
  state.append(entry);
  return z_t - m;
}

inline std::string step_log_csv(const std::vector<StepLogEntry>& log) {
  auto fmt = [](double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return std::string(buf);
  };
  std::string out = "step,loss,mu_max,lambda,max_delta,std_z\n";
  for (const auto& e : log) {
    out += std::to_string(e.step) + "," + fmt(e.loss) + "," + fmt(e.mu_max) + "," + fmt(e.lambda) + "," +
           fmt(e.max_delta) + "," + fmt(e.std_z) + "\n";
  }
  return out;
}

}  // namespace timi

#endif  // TIMI_SGU_HPP
