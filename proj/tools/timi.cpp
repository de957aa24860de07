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

// timi: scene generation, guided runs, evaluation, ablation sweeps and the
// invariant self-test. Diagnostics go to stderr; data goes to files.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "timi/commands.hpp"
#include "timi/selftest.hpp"

namespace {

using timi::Error;
using timi::RunConfig;
namespace cmd = timi::commands;

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("TIMI_SEED");
  if (s == nullptr || *s == '\0') return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0') throw Error("usage", "TIMI_SEED must be a non-negative integer");
  return v;
}

// Flags shared by run and sweep, layered over an optional JSON config.
struct RunFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha, sigma, beta, temperature;
  std::optional<std::size_t> layer_max, step_max, steps;
  bool no_isg = false, no_sgu = false, no_gm = false, no_sr = false, no_momentum = false;
  bool timing = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON run config (flat keys)");
    app->add_option("--seed", seed, "noise seed (overrides TIMI_SEED and the config)");
    app->add_option("--alpha", alpha, "guidance strength");
    app->add_option("--sigma", sigma, "smoothing width in voxels");
    app->add_option("--beta", beta, "momentum decay");
    app->add_option("--temperature", temperature, "attention temperature");
    app->add_option("--guided-layer-max", layer_max, "last guided attention layer");
    app->add_option("--guided-step-max", step_max, "number of guided denoising steps");
    app->add_option("--steps", steps, "total denoising steps");
    app->add_flag("--no-isg", no_isg, "disable separation guidance");
    app->add_flag("--no-sgu", no_sgu, "disable smoothing, adaptive scaling and momentum");
    app->add_flag("--no-gm", no_gm, "disable adaptive scaling");
    app->add_flag("--no-sr", no_sr, "disable gradient smoothing");
    app->add_flag("--no-momentum", no_momentum, "disable momentum");
    app->add_flag("--timing", timing, "record wall time instead of 0");
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path.empty()) cfg = RunConfig::from_json(timi::io::read_json(config_path));
    if (const auto s = env_seed()) cfg.seed = *s;
    if (seed) cfg.seed = *seed;
    auto& g = cfg.guidance;
    if (alpha) g.alpha = *alpha;
    if (sigma) g.sigma = *sigma;
    if (beta) g.beta = *beta;
    if (temperature) cfg.denoiser.attn_temperature = *temperature;
    if (layer_max) g.guided_layer_max = *layer_max;
    if (step_max) g.guided_step_max = *step_max;
    if (steps) cfg.total_steps = *steps;
    if (no_isg) g.use_isg = false;
    if (no_sgu) g.use_gm = g.use_sr = g.use_momentum = false;
    if (no_gm) g.use_gm = false;
    if (no_sr) g.use_sr = false;
    if (no_momentum) g.use_momentum = false;
    cfg.validate();
    return cfg;
  }
};

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

int run_selftest(const std::string& filter, bool corrupt) {
  timi::selftest::Options opt;
  opt.corrupt_gradient = corrupt;
  std::size_t failed = 0;
  std::size_t ran = 0;
  std::printf("%-34s %-6s %8s  %s\n", "check", "result", "seconds", "detail");
  for (const auto& check : timi::selftest::battery()) {
    if (!timi::selftest::matches(check, filter)) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    timi::selftest::Outcome out;
    try {
      out = check.run(opt);
    } catch (const std::exception& e) {
      out = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%-34s %-6s %8.2f  %s\n", check.name.c_str(), out.passed ? "PASS" : "FAIL", secs,
                out.detail.c_str());
    if (!out.passed) ++failed;
  }
  if (ran == 0) {
    std::cerr << "selftest: no check matches filter '" << filter << "'\n";
    return 1;
  }
  std::printf("%zu/%zu passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Training-free multi-instance separation guidance on a toy voxel diffusion model"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-scenes", "write seeded synthetic scenes and a manifest");
  cmd::GenOptions gen_opt;
  std::optional<std::uint64_t> gen_seed;
  std::string gen_out;
  gen->add_option("--count", gen_opt.count, "number of scenes")->required();
  gen->add_option("--seed", gen_seed, "seed of the first scene");
  gen->add_option("--gap", gen_opt.gap, "empty voxels between adjacent instances (0, 1 or 2)");
  gen->add_option("--k", gen_opt.instances, "instances per scene (0 draws 2..4)");
  gen->add_option("--dims", gen_opt.side, "grid side length");
  gen->add_option("--out", gen_out, "output directory")->required();

  auto* run = app.add_subcommand("run", "run the pipeline on one scene");
  RunFlags run_flags;
  std::string run_scene, run_out;
  run->add_option("--scene", run_scene, "scene directory")->required();
  run->add_option("--out", run_out, "output directory")->required();
  run_flags.attach(run);

  auto* eval = app.add_subcommand("eval", "score predictions against their scenes");
  std::string eval_scenes, eval_preds, eval_out, eval_ply, eval_config;
  std::optional<std::uint64_t> eval_seed;
  eval->add_option("--scenes", eval_scenes, "scene directory with scenes.json")->required();
  eval->add_option("--preds", eval_preds, "directory holding one run directory per scene id")->required();
  eval->add_option("--out", eval_out, "results CSV path")->required();
  eval->add_option("--config", eval_config, "JSON run config supplying the metric settings");
  eval->add_option("--seed", eval_seed, "point sampling seed");
  eval->add_option("--ply", eval_ply, "directory for sampled prediction point clouds");

  auto* sw = app.add_subcommand("sweep", "ablation sweep over one parameter");
  RunFlags sweep_flags;
  std::string sweep_scenes, sweep_out, sweep_values;
  cmd::SweepOptions sweep_opt;
  sw->add_option("--scenes", sweep_scenes, "scene directory with scenes.json")->required();
  sw->add_option("--out", sweep_out, "output directory")->required();
  sw->add_option("--param", sweep_opt.param, "guided_layer_max | guided_step_max | alpha | sigma | toggles")
      ->required();
  sw->add_option("--values", sweep_values, "comma-separated values (defaults per parameter)");
  sw->add_option("--jobs", sweep_opt.jobs, "concurrent scene runs");
  sweep_flags.attach(sw);

  auto* st = app.add_subcommand("selftest", "run the invariant battery");
  std::string st_filter;
  bool st_corrupt = false;
  st->add_option("--filter", st_filter, "run only checks whose group or name contains this text");
  st->add_flag("--corrupt-gradient", st_corrupt, "perturb the analytic gradient (gate sensitivity hook)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) {
      if (const auto s = env_seed()) gen_opt.seed = *s;
      if (gen_seed) gen_opt.seed = *gen_seed;
      const auto entries = cmd::gen_scenes(gen_out, gen_opt);
      std::cerr << "gen-scenes: wrote " << entries.size() << " scenes to " << gen_out << "\n";
    } else if (*run) {
      const RunConfig cfg = run_flags.resolve();
      const auto r = cmd::run_scene_dir(run_scene, run_out, cfg, run_flags.timing);
      std::cerr << "run: " << r.state.log().size() << " guided steps, wrote " << run_out << "\n";
    } else if (*eval) {
      RunConfig cfg;
      if (!eval_config.empty()) cfg = RunConfig::from_json(timi::io::read_json(eval_config));
      if (const auto s = env_seed()) cfg.seed = *s;
      if (eval_seed) cfg.seed = *eval_seed;
      const auto rows = cmd::eval_dirs(eval_scenes, eval_preds, cfg.eval(), eval_ply);
      cmd::write_results(eval_out, rows);
      std::cerr << "eval: scored " << rows.size() << " scenes into " << eval_out << "\n";
    } else if (*sw) {
      const RunConfig cfg = sweep_flags.resolve();
      sweep_opt.values = split_csv(sweep_values);
      sweep_opt.timing = sweep_flags.timing;
      const auto rows = cmd::sweep(sweep_scenes, sweep_out, cfg, sweep_opt);
      std::cerr << "sweep: " << rows.size() << " rows written to " << sweep_out << "\n";
    } else if (*st) {
      return run_selftest(st_filter, st_corrupt);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cmd::exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
