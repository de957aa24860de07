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

#ifndef TIMI_COMMANDS_HPP
#define TIMI_COMMANDS_HPP

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "timi/error.hpp"
#include "timi/io.hpp"
#include "timi/metrics.hpp"
#include "timi/run.hpp"
#include "timi/scene_harness.hpp"

// File-level commands behind the `timi` tool. Each one reads and writes a
// fixed directory layout so that runs can be chained and compared byte for byte.
//
//   <scenes>/scenes.json            manifest: id, seed, dir per scene
//   <scenes>/<id>/                  one SceneRecord directory
//   <run>/pred.{json,f64}           decoded occupancy (1 x D x H x W)
//   <run>/latent.{json,f64}         final latent (C x D x H x W)
//   <run>/steps.csv                 guided step log
//   <run>/config.json               effective RunConfig
//   <run>/run.json                  scene id and wall time (0 unless timed)

namespace timi::commands {

namespace fs = std::filesystem;

struct ManifestEntry {
  std::string id;
  std::uint64_t seed = 0;
  std::string dir;
};

inline std::string scene_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%03zu", i);
  return buf;
}

inline std::vector<ManifestEntry> read_manifest(const fs::path& scenes_dir) {
  const auto j = io::read_json(scenes_dir / "scenes.json");
  std::vector<ManifestEntry> out;
  try {
    for (const auto& e : j.at("scenes")) {
      out.push_back({e.at("id").get<std::string>(), e.at("seed").get<std::uint64_t>(), e.at("dir").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("data", (scenes_dir / "scenes.json").string() + ": " + e.what());
  }
  return out;
}

struct GenOptions {
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::size_t gap = 0;
  std::size_t instances = 0;  // 0 draws K in [2, 4] per scene
  std::size_t side = 32;
};

// Scene i uses seed + i. A packing failure retries with a derived seed, and
// the seed that succeeded is the one recorded in the manifest.
inline std::vector<ManifestEntry> gen_scenes(const fs::path& out, const GenOptions& opt) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Error("io", "cannot create " + out.string() + ": " + ec.message());
  std::vector<ManifestEntry> entries;
  nlohmann::json manifest;
  manifest["scenes"] = nlohmann::json::array();
  manifest["gap"] = opt.gap;
  manifest["seed"] = opt.seed;
  for (std::size_t i = 0; i < opt.count; ++i) {
    SceneSpec spec;
    spec.dims = {opt.side, opt.side, opt.side};
    spec.instances = opt.instances;
    spec.gap = opt.gap;
    spec.size_max = std::min<std::size_t>(spec.size_max, opt.side);
    std::optional<SceneRecord> rec;
    for (std::uint64_t attempt = 0; attempt < 8 && !rec; ++attempt) {
      spec.seed = opt.seed + i + (attempt << 32);
      try {
        rec = generate_scene(spec);
      } catch (const Error& e) {
        if (e.code() != "packing-failed") throw;
      }
    }
    if (!rec) throw Error("packing-failed", "scene " + std::to_string(i));
    const ManifestEntry entry{scene_id(i), spec.seed, scene_id(i)};
    save_scene(out / entry.dir, *rec);
    manifest["scenes"].push_back({{"id", entry.id}, {"seed", entry.seed}, {"dir", entry.dir}});
    entries.push_back(entry);
  }
  io::write_json(out / "scenes.json", manifest);
  return entries;
}

// Noise seed of a scene run: the config seed offset by the scene seed, so a
// suite shares one config yet every scene starts from its own noise.
inline RunConfig scene_run_config(RunConfig cfg, const SceneRecord& rec) {
  cfg.seed += rec.spec.seed;
  return cfg;
}

inline RunResult run_scene_dir(const fs::path& scene_dir, const fs::path& out, const RunConfig& cfg_in,
                               bool timing) {
  const SceneRecord rec = load_scene(scene_dir);
  RunConfig cfg = cfg_in;
  cfg.output_dir = out.string();
  cfg.validate();
  const RunResult r = run_scene(rec, scene_run_config(cfg, rec), false);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Error("io", "cannot create " + out.string() + ": " + ec.message());
  io::write_grid(out / "pred", r.prediction);
  io::write_field(out / "latent", r.latent);
  io::write_text(out / "steps.csv", step_log_csv(r.state.log()));
  io::write_json(out / "config.json", RunConfig::to_json(cfg));
  nlohmann::json meta;
  meta["scene_dir"] = scene_dir.string();
  meta["time_s"] = timing ? r.wall_time_s : 0.0;
  io::write_json(out / "run.json", meta);
  return r;
}

// One row per manifest scene, in manifest order, plus the mean row.
inline std::vector<MetricRow> eval_dirs(const fs::path& scenes_dir, const fs::path& preds_dir,
                                        const EvalConfig& cfg, const fs::path& ply_dir = {}) {
  const auto manifest = read_manifest(scenes_dir);
  std::string missing;
  for (const auto& e : manifest) {
    if (!fs::exists(preds_dir / e.id / "pred.json")) missing += (missing.empty() ? "" : ",") + e.id;
  }
  if (!missing.empty()) throw Error("data", "missing predictions for " + missing);
  std::vector<MetricRow> rows;
  for (const auto& e : manifest) {
    const SceneRecord rec = load_scene(scenes_dir / e.dir);
    const VoxelGrid pred = io::read_grid(preds_dir / e.id / "pred");
    MetricRow row = evaluate_scene(pred, rec, cfg);
    row.scene_id = e.id;
    const fs::path meta = preds_dir / e.id / "run.json";
    if (fs::exists(meta)) row.time_s = io::read_json(meta).value("time_s", 0.0);
    if (!ply_dir.empty()) {
      fs::create_directories(ply_dir);
      const auto frame = SceneFrame::from_grid(rec.fused);
      const auto pts = sample_points(pred.dims, occupied_voxels(pred), frame, cfg.points_cap, cfg.seed);
      io::write_text(ply_dir / (e.id + ".ply"), ply_ascii(pts));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_results(const fs::path& out_csv, std::span<const MetricRow> rows) {
  if (out_csv.has_parent_path()) fs::create_directories(out_csv.parent_path());
  io::write_text(out_csv, results_csv(rows, true));
}

// Ablation arms: baseline (no ISG), isg_only (ISG with every SGU part off),
// full, and single-part removals of the SGU.
inline void apply_arm(RunConfig& cfg, const std::string& arm) {
  auto& g = cfg.guidance;
  if (arm == "baseline") {
    g.use_isg = false;
  } else if (arm == "isg_only") {
    g.use_isg = true;
    g.use_gm = g.use_sr = g.use_momentum = false;
  } else if (arm == "full") {
    g.use_isg = g.use_gm = g.use_sr = g.use_momentum = true;
  } else if (arm == "no_gm") {
    g.use_gm = false;
  } else if (arm == "no_sr") {
    g.use_sr = false;
  } else if (arm == "no_momentum") {
    g.use_momentum = false;
  } else {
    throw Error("usage", "unknown toggle arm " + arm);
  }
}

inline const std::vector<std::string>& sweep_params() {
  static const std::vector<std::string> names{"guided_layer_max", "guided_step_max", "alpha", "sigma", "toggles"};
  return names;
}

inline std::vector<std::string> default_sweep_values(const std::string& param) {
  if (param == "guided_layer_max") return {"1", "2", "3", "4", "5", "8"};
  if (param == "guided_step_max") return {"5", "10", "15", "20", "25"};
  if (param == "alpha") return {"0.1", "0.2", "0.3", "0.4", "0.5"};
  if (param == "sigma") return {"0.5", "1.0", "1.5", "2.0", "2.5"};
  if (param == "toggles") return {"baseline", "isg_only", "full"};
  throw Error("usage", "unknown sweep parameter " + param);
}

inline double parse_real(const std::string& s) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size()) throw Error("usage", "not a number: " + s);
  return x;
}

inline std::size_t parse_count(const std::string& s) {
  const double x = parse_real(s);
  if (x < 0 || x != std::floor(x)) throw Error("usage", "not a non-negative integer: " + s);
  return static_cast<std::size_t>(x);
}

inline RunConfig sweep_config(RunConfig cfg, const std::string& param, const std::string& value) {
  if (param == "guided_layer_max") {
    cfg.guidance.guided_layer_max = parse_count(value);
  } else if (param == "guided_step_max") {
    cfg.guidance.guided_step_max = parse_count(value);
  } else if (param == "alpha") {
    cfg.guidance.alpha = parse_real(value);
  } else if (param == "sigma") {
    cfg.guidance.sigma = parse_real(value);
  } else if (param == "toggles") {
    apply_arm(cfg, value);
  } else {
    throw Error("usage", "unknown sweep parameter " + param);
  }
  return cfg;
}

// Runs fn(i) for i in [0, n) on at most `jobs` threads. Exceptions are
// rethrown for the lowest failing index, so failures are order-deterministic.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, n));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct SweepOptions {
  std::string param;
  std::vector<std::string> values;
  std::size_t jobs = 1;
  bool timing = false;
};

// For each value: run every manifest scene into <out>/<param>=<value>/<id>,
// evaluate into <out>/<param>=<value>/results.csv, and append that value's
// mean row to <out>/sweep_<param>.csv.
inline std::vector<MetricRow> sweep(const fs::path& scenes_dir, const fs::path& out, const RunConfig& base_in,
                                    const SweepOptions& opt) {
  const auto& names = sweep_params();
  if (std::find(names.begin(), names.end(), opt.param) == names.end()) {
    throw Error("usage", "unknown sweep parameter " + opt.param);
  }
  const auto values = opt.values.empty() ? default_sweep_values(opt.param) : opt.values;
  RunConfig base = base_in;
  if (opt.param == "guided_layer_max") {
    // Every arm shares one network deep enough for the largest window.
    for (const auto& v : values) base.denoiser.n_layers = std::max(base.denoiser.n_layers, parse_count(v));
  }
  std::vector<RunConfig> configs;
  for (const auto& v : values) {
    configs.push_back(sweep_config(base, opt.param, v));
    configs.back().validate();
  }
  const auto manifest = read_manifest(scenes_dir);
  std::vector<MetricRow> means;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::string label = opt.param + "=" + values[i];
    const fs::path arm_dir = out / label;
    parallel_for(manifest.size(), opt.jobs, [&](std::size_t s) {
      run_scene_dir(scenes_dir / manifest[s].dir, arm_dir / manifest[s].id, configs[i], opt.timing);
    });
    const auto rows = eval_dirs(scenes_dir, arm_dir, configs[i].eval());
    write_results(arm_dir / "results.csv", rows);
    means.push_back(mean_row(rows, label));
  }
  std::string csv = std::string(kResultsHeader) + "\n";
  for (const auto& r : means) csv += csv_line(r) + "\n";
  fs::create_directories(out);
  io::write_text(out / ("sweep_" + opt.param + ".csv"), csv);
  return means;
}

// Exit status contract of the tool.
inline int exit_code_for(const Error& e) {
  if (e.code() == "usage" || e.code() == "config") return 1;
  if (e.code() == "numerical-divergence") return 3;
  return 2;
}

}  // namespace timi::commands

#endif  // TIMI_COMMANDS_HPP
