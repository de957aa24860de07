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

#ifndef TIMI_SELFTEST_HPP
#define TIMI_SELFTEST_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "timi/io.hpp"
#include "timi/isg.hpp"
#include "timi/latent_field.hpp"
#include "timi/metrics.hpp"
#include "timi/run.hpp"
#include "timi/scene_harness.hpp"
#include "timi/sgu.hpp"
#include "timi/toy_pipeline.hpp"

// Invariant battery behind `timi selftest`. Every check compares library
// output with an independent slow oracle or a closed form.

namespace timi::selftest {

struct Options {
  bool corrupt_gradient = false;  // adds 1e-2 to one analytic gradient entry
};

struct Outcome {
  bool passed = false;
  std::string detail;
};

struct Check {
  std::string group;
  std::string name;
  std::function<Outcome(const Options&)> run;
};

// A small random latent with a token grid whose tokens belong to one of K
// instances or to the background. Each instance owns at least one token.
struct ProbeCase {
  LatentField z;
  ConditionSet cond;
  InstanceMaskSet masks;
};

inline ProbeCase make_probe_case(std::uint64_t seed, std::size_t side, std::size_t token_side, std::size_t K) {
  Rng rng(seed);
  ProbeCase pc;
  pc.z = init_noise({side, side, side}, kLatentChannels, rng);
  std::vector<Payload> codes(K);
  for (auto& code : codes) {
    const double dc = rng.uniform(0.1, 0.9);
    code = {1.0, std::cos(std::numbers::pi * dc), std::sin(std::numbers::pi * dc), rng.uniform(0.05, 0.2)};
  }
  const std::size_t M = token_side * token_side;
  std::vector<Payload> payloads(M, kBackgroundCode);
  std::vector<std::vector<std::uint8_t>> masks(K, std::vector<std::uint8_t>(M, 0));
  for (std::size_t m = 0; m < M; ++m) {
    // The first K tokens seed every instance; the rest draw an owner or stay background.
    const std::size_t owner = m < K ? m : rng.below(K + 1);
    if (owner < K) {
      payloads[m] = codes[owner];
      masks[owner][m] = 1;
    }
  }
  pc.cond = ConditionSet::on_grid(token_side, token_side, std::move(payloads));
  pc.masks = InstanceMaskSet(M, std::move(masks));
  return pc;
}

namespace detail {

inline Outcome verdict(bool ok, std::string detail) { return {ok, std::move(detail)}; }

inline std::string num(double x) { return io::format_real(x); }

inline Outcome check_gradient(const Options& opt) {
  DenoiserConfig cfg;
  const std::set<std::size_t> layers{1, 2, 3, 4};
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto pc = make_probe_case(1000 + seed, 4, 4, 2);
    const auto fwd = denoiser_forward(pc.z, pc.cond, cfg, layers);
    auto analytic = separation_loss(fwd.captures, pc.masks).grad;
    if (opt.corrupt_gradient) analytic.data()[0] += 1e-2;
    const auto fd = fd_gradient_oracle(pc.z, pc.cond, cfg, pc.masks, layers, 1e-4);
    double num_err = 0.0;
    double scale = 0.0;
    for (std::size_t i = 0; i < fd.size(); ++i) {
      num_err = std::max(num_err, std::abs(analytic.data()[i] - fd.data()[i]));
      scale = std::max(scale, std::abs(fd.data()[i]));
    }
    worst = std::max(worst, num_err / scale);
  }
  return verdict(worst < 1e-4, "max relative error " + num(worst));
}

inline Outcome check_kernel_sum(const Options&) {
  double worst = 0.0;
  for (double sigma : {0.5, 1.0, 1.5, 2.0, 3.7}) {
    const GaussianKernel1D k(sigma);
    double s = 0.0;
    for (double w : k.weights()) s += w;
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return verdict(worst <= 1e-12, "max |sum - 1| " + num(worst));
}

inline Outcome check_kernel_constant(const Options&) {
  const LatentField f(2, {7, 9, 5}, 3.25);
  const auto g = gaussian_smooth(f, 1.5);
  double worst = 0.0;
  for (double x : g.data()) worst = std::max(worst, std::abs(x - 3.25));
  return verdict(worst <= 1e-12, "max deviation " + num(worst));
}

inline Outcome check_kernel_impulse(const Options&) {
  LatentField f(1, {13, 13, 13}, 0.0);
  f(0, 6, 6, 6) = 1.0;
  const auto g = gaussian_smooth(f, 1.5);
  // Oracle: center weight from the closed-form Gaussian, normalized by a direct sum.
  double total = 0.0;
  for (int i = -5; i <= 5; ++i) total += std::exp(-static_cast<double>(i * i) / (2.0 * 1.5 * 1.5));
  const double w0 = 1.0 / total;
  const double err = std::abs(g(0, 6, 6, 6) - w0 * w0 * w0);
  return verdict(err <= 1e-12, "center error " + num(err));
}

// A compact guided scene shared by the pipeline checks.
inline SceneRecord small_scene(std::uint64_t seed) {
  SceneSpec spec;
  spec.dims = {16, 16, 16};
  spec.instances = 2;
  spec.size_min = 4;
  spec.size_max = 7;
  spec.gap = 0;
  spec.seed = seed;
  return generate_scene(spec);
}

inline RunConfig small_run(std::uint64_t seed) {
  RunConfig cfg;
  cfg.total_steps = 20;
  cfg.guidance.guided_step_max = 8;
  cfg.seed = seed;
  return cfg;
}

inline Outcome check_peak_bound(const Options&) {
  double worst_bound = -INFINITY;
  double worst_identity = 0.0;
  std::size_t entries = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    for (double alpha : {0.1, 0.3}) {
      RunConfig cfg = small_run(seed);
      cfg.guidance.alpha = alpha;
      const auto r = run_scene(small_scene(seed), cfg);
      for (const auto& e : r.state.log()) {
        ++entries;
        worst_bound = std::max(worst_bound, e.max_delta - (alpha * e.std_z + 1e-9));
        const double expect = alpha * e.std_z * e.mu_max / (e.mu_max + cfg.guidance.eps);
        worst_identity = std::max(worst_identity, std::abs(e.max_delta - expect));
      }
    }
  }
  const bool ok = entries > 0 && worst_bound <= 0.0 && worst_identity <= 1e-9;
  return verdict(ok, std::to_string(entries) + " steps, identity error " + num(worst_identity));
}

inline Outcome check_momentum(const Options&) {
  GuidanceConfig cfg;
  LatentField unit(1, {1, 1, 1}, 1.0);
  GuidanceState state(unit);
  const double expect[] = {0.1, 0.19, 0.271};
  double worst = 0.0;
  for (double e : expect) worst = std::max(worst, std::abs(momentum_update(state, unit, cfg).data()[0] - e));
  // Zero input: exact geometric decay.
  const LatentField zero(1, {1, 1, 1}, 0.0);
  double m = state.momentum().data()[0];
  bool geometric = true;
  for (int i = 0; i < 10; ++i) {
    const double next = momentum_update(state, zero, cfg).data()[0];
    geometric = geometric && next == cfg.beta * m;
    m = next;
  }
  return verdict(worst <= 1e-12 && geometric, "max error " + num(worst));
}

// Captures come from generated scenes, the inputs guidance actually sees.
// The column sum is S / (S + eps) for masked mass S, so this bounds eps / S.
inline Outcome check_weight_norm(const Options&) {
  DenoiserConfig cfg;
  double worst = 0.0;
  double min_mass = INFINITY;
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    SceneSpec spec;
    spec.dims = {16, 16, 16};
    spec.instances = 0;
    spec.size_max = 8;
    spec.token_h = spec.token_w = 8;
    spec.seed = 5000 + seed;
    const SceneRecord rec = generate_scene(spec);
    Rng rng(seed);
    const auto z = init_noise(spec.dims, kLatentChannels, rng);
    const auto fwd = denoiser_forward(z, rec.condition, cfg, {1 + seed % cfg.n_layers});
    const auto& cap = fwd.captures.front();
    const auto w = spatial_weights(cap, rec.masks);
    for (std::size_t k = 0; k < rec.masks.size(); ++k) {
      // Masked attention mass summed directly from the capture.
      double mass = 0.0;
      for (std::size_t v = 0; v < cap.rows; ++v) {
        for (std::size_t m = 0; m < cap.cols; ++m) mass += rec.masks.masks[k][m] != 0 ? cap.at(v, m) : 0.0;
      }
      if (mass == 0.0) continue;
      ++checked;
      min_mass = std::min(min_mass, mass);
      worst = std::max(worst, std::abs(w.column_sum(k) - 1.0));
    }
  }
  return verdict(checked > 0 && worst <= 1e-6, std::to_string(checked) + " columns, max |sum - 1| " + num(worst) +
                                                   ", min mass " + num(min_mass));
}

inline double brute_chamfer(const PointSet& a, const PointSet& b) {
  auto one_way = [](const PointSet& x, const PointSet& y) {
    double s = 0.0;
    for (const auto& p : x.points) {
      double best = INFINITY;
      for (const auto& q : y.points) {
        const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
        best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
      }
      s += best;
    }
    return s / static_cast<double>(x.size());
  };
  return one_way(a, b) + one_way(b, a);
}

inline Outcome check_chamfer(const Options&) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(9000 + seed);
    PointSet a, b;
    const auto na = 1 + rng.below(512);
    const auto nb = 1 + rng.below(512);
    for (std::uint64_t i = 0; i < na; ++i) a.points.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
    for (std::uint64_t i = 0; i < nb; ++i) b.points.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
    worst = std::max(worst, std::abs(chamfer(a, b) - brute_chamfer(a, b)));
  }
  return verdict(worst <= 1e-9, "max error " + num(worst));
}

inline Outcome check_lcd_ssr(const Options&) {
  const PointSet tri{{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}}};
  const PointSet one{{{0, 0, 0}}};
  const PointSet far{{{3, 4, 0}}};
  const bool ok = lcd(tri, tri) == 0.0 && lcd(one, far) == 10.0 &&
                  lcd(PointSet{{{0, 0, 0}, {1, 0, 0}}}, PointSet{{{0, 0, 0}}}) == 0.5 &&
                  ssr(3, 4) == 0.75 && ssr(4, 3) == 0.75 && ssr(0, 2) == 0.0;
  return verdict(ok, ok ? "hand cases exact" : "hand case mismatch");
}

inline double assignment_cost(std::span<const double> cost, std::size_t m, const std::vector<std::size_t>& rows_to_cols) {
  double s = 0.0;
  for (std::size_t i = 0; i < rows_to_cols.size(); ++i) {
    if (rows_to_cols[i] != SIZE_MAX) s += cost[i * m + rows_to_cols[i]];
  }
  return s;
}

inline Outcome check_hungarian(const Options&) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(7000 + seed);
    const std::size_t n = 1 + rng.below(6);
    const std::size_t m = 1 + rng.below(6);
    std::vector<double> cost(n * m);
    for (double& c : cost) c = rng.uniform(0.0, 10.0);
    const double got = assignment_cost(cost, m, hungarian(cost, n, m));
    // Exhaustive: permute the larger side, pair with the first min(n, m).
    const std::size_t big = std::max(n, m);
    std::vector<std::size_t> perm(big);
    std::iota(perm.begin(), perm.end(), 0);
    double best = INFINITY;
    do {
      double s = 0.0;
      for (std::size_t i = 0; i < std::min(n, m); ++i) s += n <= m ? cost[i * m + perm[i]] : cost[perm[i] * m + i];
      best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    worst = std::max(worst, std::abs(got - best));
  }
  return verdict(worst <= 1e-12, "max cost gap " + num(worst));
}

inline Outcome check_determinism(const Options&) {
  const auto rec = small_scene(3);
  const auto again = small_scene(3);
  const RunConfig cfg = small_run(3);
  const auto a = run_scene(rec, cfg);
  const auto b = run_scene(again, cfg);
  const bool ok = rec.fused == again.fused && a.latent == b.latent && a.prediction == b.prediction &&
                  step_log_csv(a.state.log()) == step_log_csv(b.state.log());
  return verdict(ok, ok ? "bit-identical reruns" : "reruns differ");
}

}  // namespace detail

inline std::vector<Check> battery() {
  return {
      {"gradient", "gradient-vs-finite-differences", detail::check_gradient},
      {"kernel", "kernel-weights-sum-to-one", detail::check_kernel_sum},
      {"kernel", "kernel-constant-fixed-point", detail::check_kernel_constant},
      {"kernel", "kernel-impulse-center", detail::check_kernel_impulse},
      {"peak", "peak-update-bound", detail::check_peak_bound},
      {"momentum", "momentum-recursion", detail::check_momentum},
      {"weights", "weight-normalization", detail::check_weight_norm},
      {"metrics", "chamfer-vs-brute-force", detail::check_chamfer},
      {"metrics", "lcd-and-ssr-hand-cases", detail::check_lcd_ssr},
      {"metrics", "hungarian-vs-exhaustive", detail::check_hungarian},
      {"determinism", "pipeline-rerun", detail::check_determinism},
  };
}

inline bool matches(const Check& c, const std::string& filter) {
  return filter.empty() || c.group.find(filter) != std::string::npos || c.name.find(filter) != std::string::npos;
}

}  // namespace timi::selftest

#endif  // TIMI_SELFTEST_HPP
