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

#ifndef TIMI_RUN_HPP
#define TIMI_RUN_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "timi/error.hpp"
#include "timi/isg.hpp"
#include "timi/latent_field.hpp"
#include "timi/metrics.hpp"
#include "timi/scene_harness.hpp"
#include "timi/sgu.hpp"
#include "timi/toy_pipeline.hpp"

namespace timi {

// Flat run configuration. Its JSON echo parses back to the same value.
struct RunConfig {
  GuidanceConfig guidance;
  DenoiserConfig denoiser;
  std::size_t total_steps = 50;
  std::size_t points_cap = 2048;
  double fscore_tau = 0.1;
  std::size_t min_component_size = 4;
  std::uint64_t seed = 0;
  std::string output_dir;

  void validate() const {
    guidance.validate();
    denoiser.validate();
    if (total_steps == 0) throw Error("config", "total_steps must be positive");
    if (guidance.use_isg) {
      if (guidance.guided_layer_max < 1 || guidance.guided_layer_max > denoiser.n_layers) {
        throw Error("config", "guided_layer_max must lie in [1, n_layers]");
      }
    }
    if (points_cap == 0) throw Error("config", "points_cap must be positive");
    if (!(fscore_tau > 0.0)) throw Error("config", "fscore_tau must be positive");
  }

  EvalConfig eval() const { return {points_cap, fscore_tau, min_component_size, seed}; }

  friend bool operator==(const RunConfig& a, const RunConfig& b) {
    return to_json(a) == to_json(b);
  }

  static nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    j["alpha"] = c.guidance.alpha;
    j["sigma"] = c.guidance.sigma;
    j["beta"] = c.guidance.beta;
    j["eps"] = c.guidance.eps;
    j["guided_layer_max"] = c.guidance.guided_layer_max;
    j["guided_step_max"] = c.guidance.guided_step_max;
    j["use_isg"] = c.guidance.use_isg;
    j["use_gm"] = c.guidance.use_gm;
    j["use_sr"] = c.guidance.use_sr;
    j["use_momentum"] = c.guidance.use_momentum;
    j["n_layers"] = c.denoiser.n_layers;
    j["d"] = c.denoiser.d;
    j["attn_temperature"] = c.denoiser.attn_temperature;
    j["weight_seed"] = c.denoiser.weight_seed;
    j["total_steps"] = c.total_steps;
    j["points_cap"] = c.points_cap;
    j["fscore_tau"] = c.fscore_tau;
    j["min_component_size"] = c.min_component_size;
    j["seed"] = c.seed;
    j["output_dir"] = c.output_dir;
    return j;
  }

  // Missing keys keep their defaults; unknown keys are rejected.
  static RunConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error("config", "run config must be a JSON object");
    RunConfig c;
    const nlohmann::json known = to_json(c);
    for (const auto& [key, value] : j.items()) {
      if (!known.contains(key)) throw Error("config", "unknown config key " + key);
    }
    auto get = [&j](const char* key, auto& field) {
      if (!j.contains(key)) return;
      try {
        field = j.at(key).get<std::decay_t<decltype(field)>>();
      } catch (const nlohmann::json::exception& e) {
        throw Error("config", std::string(key) + ": " + e.what());
      }
    };
    get("alpha", c.guidance.alpha);
    get("sigma", c.guidance.sigma);
    get("beta", c.guidance.beta);
    get("eps", c.guidance.eps);
    get("guided_layer_max", c.guidance.guided_layer_max);
    get("guided_step_max", c.guidance.guided_step_max);
    get("use_isg", c.guidance.use_isg);
    get("use_gm", c.guidance.use_gm);
    get("use_sr", c.guidance.use_sr);
    get("use_momentum", c.guidance.use_momentum);
    get("n_layers", c.denoiser.n_layers);
    get("d", c.denoiser.d);
    get("attn_temperature", c.denoiser.attn_temperature);
    get("weight_seed", c.denoiser.weight_seed);
    get("total_steps", c.total_steps);
    get("points_cap", c.points_cap);
    get("fscore_tau", c.fscore_tau);
    get("min_component_size", c.min_component_size);
    get("seed", c.seed);
    get("output_dir", c.output_dir);
    return c;
  }
};

struct RunResult {
  VoxelGrid prediction;
  LatentField latent;
  GuidanceState state;
  // (step, L_sep) at the last step of the guided window when probing is
  // requested; measured before any update, with or without guidance.
  std::vector<std::pair<std::size_t, double>> probe_losses;
  double wall_time_s = 0.0;
};

// init_noise -> per step: forward (capturing the guided layers inside the
// window) -> optional guided update -> sampler step; then toy_decode.
// The guided update does not re-run the forward pass, so the sampler uses
// the clean-sample estimate computed before the update.
inline RunResult run_pipeline(const ConditionSet& cond, const InstanceMaskSet& masks, Dims3 dims,
                              const RunConfig& cfg, bool probe = false) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(cfg.seed);
  LatentField z = init_noise(dims, kLatentChannels, rng);
  RunResult out;
  out.state = GuidanceState(z);

  const auto& g = cfg.guidance;
  std::set<std::size_t> window_layers;
  for (std::size_t l = 1; l <= std::min(g.guided_layer_max, cfg.denoiser.n_layers); ++l) window_layers.insert(l);

  for (std::size_t s = 0; s < cfg.total_steps; ++s) {
    const bool in_window = s < g.guided_step_max;
    const bool guided = g.use_isg && in_window;
    const bool probe_here = probe && s + 1 == std::min(g.guided_step_max, cfg.total_steps);
    const bool capture = guided || probe_here;
    ForwardResult fwd = denoiser_forward(z, cond, cfg.denoiser, capture ? window_layers : std::set<std::size_t>{});
    if (!fwd.x0_hat.all_finite()) throw Error("numerical-divergence", "step " + std::to_string(s));
    if (probe_here) {
      out.probe_losses.emplace_back(s, separation_loss_value(fwd.captures, masks, g.eps));
    }
    if (guided) {
      z = apply_guided_step(z, fwd.captures, masks, out.state, g, s);
      // A latent whose spread overflows is as unusable as a non-finite one.
      if (!z.all_finite() || !std::isfinite(out.state.log().back().std_z)) throw Error("numerical-divergence", "step " + std::to_string(s));
    }
    fwd.captures.clear();
    z = sampler_step(z, fwd.x0_hat, s, cfg.total_steps);
    if (!z.all_finite()) throw Error("numerical-divergence", "step " + std::to_string(s));
  }
  out.prediction = toy_decode(z);
  out.latent = std::move(z);
  out.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

inline RunResult run_scene(const SceneRecord& rec, const RunConfig& cfg, bool probe = false) {
  return run_pipeline(rec.condition, rec.masks, rec.fused.dims, cfg, probe);
}

inline MetricRow evaluate_scene(const VoxelGrid& pred, const SceneRecord& rec, const EvalConfig& cfg) {
  return evaluate_scene(pred, rec.fused, rec.instances, cfg);
}

struct BaselineReport {
  double ssr = 0.0;
  std::size_t n_pred = 0;
  std::size_t n_gt = 0;
};

// Runs the unguided pipeline and reports how many instances survive.
inline BaselineReport entangled_baseline_check(const SceneRecord& rec, RunConfig cfg) {
  cfg.guidance.use_isg = false;
  const RunResult r = run_scene(rec, cfg);
  const InstanceSet found = extract_instances(r.prediction, cfg.min_component_size);
  return {ssr(found.size(), rec.instances.size()), found.size(), rec.instances.size()};
}

}  // namespace timi

#endif  // TIMI_RUN_HPP
